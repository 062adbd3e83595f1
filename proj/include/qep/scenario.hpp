#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "qep/channel.hpp"
#include "qep/detect.hpp"
#include "qep/source.hpp"
#include "qep/theory.hpp"

namespace qep {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kScenarioSchemaVersion = 1;

/// All violations found in a scenario, not just the first.
class ValidationError : public std::runtime_error {
  public:
    explicit ValidationError(std::vector<std::string> violations);
    const std::vector<std::string>& violations() const { return violations_; }

  private:
    std::vector<std::string> violations_;
};

class ParseError : public std::runtime_error {
  public:
    ParseError(const std::string& what, std::size_t line, std::size_t column)
        : std::runtime_error(what), line_(line), column_(column)
    {
    }
    std::size_t line() const { return line_; }
    std::size_t column() const { return column_; }

  private:
    std::size_t line_;
    std::size_t column_;
};

/// One of the four probe/noise on-off measurement settings.
struct Configuration {
    bool probe_on = true;
    bool noise_on = true;

    /// "probe:on|noise:off" style.
    std::string label() const;
    /// File-name friendly form, "probe-on_noise-off".
    std::string stem() const;
    static Configuration parse(const std::string& label);

    friend bool operator==(const Configuration&, const Configuration&) = default;
};

enum class ReferenceMode { All, Conditional };

struct AnalysisSettings {
    double bin_width_ps = 100.0;
    double window_ps = 100.0;
    int accidental_shifts = 5;
    double fit_bin_ps = 20.0;
    double peak_threshold_sigma = 5.0;
};

struct OutputSettings {
    /// Conditional: REF tags only for pulses that produced a detection.
    ReferenceMode reference = ReferenceMode::Conditional;
    bool common_random_numbers = true;
};

struct ScenarioConfig {
    std::uint64_t seed = 1;
    std::uint64_t pulses = 0;
    PumpSpec pump;
    PhaseMatchModel phase_match;
    EmissionRates rates;
    SpectralBand herald_band{1530.0, 13.0};
    SpectralBand probe_band{1551.0, 13.0};
    DispersionModel dispersion;
    GratingSpec grating;
    Scene scene;
    ChannelSpec channels;
    DetectorSpec ref_detector;
    DetectorSpec herald_detector;
    DetectorSpec probe_detector;
    std::vector<Configuration> configurations;
    AnalysisSettings analysis;
    OutputSettings output;

    double duration_s() const { return static_cast<double>(pulses) / static_cast<double>(pump.repetition_rate_hz); }
    bool has(const Configuration& c) const;

    /// Canonical JSON form; parse_scenario(to_json()) round-trips.
    nlohmann::json to_json() const;
    /// SHA-256 of the compact canonical JSON.
    Fingerprint fingerprint() const;

    /// Per-pulse parameters of the closed-form rate model for this scenario
    /// (loopback transmission; detector efficiencies folded into eta).
    theory::RateParams rate_params() const;
};

/// Validates and converts; throws ValidationError listing every problem.
ScenarioConfig parse_scenario(const nlohmann::json& j);

/// Reads a JSON file; ParseError carries line and column.
ScenarioConfig load_scenario(const std::filesystem::path& path);

/// Parses text, mapping nlohmann errors to ParseError with line/column.
nlohmann::json parse_json_text(const std::string& text);

/// Non-fatal regime notes (e.g. per-pulse probabilities above 0.1).
std::vector<std::string> scenario_warnings(const ScenarioConfig& cfg);

/// Sets a dotted path ("channels.noise_rate_hz") in a scenario document.
/// Throws ValidationError if the path does not exist.
void set_json_path(nlohmann::json& doc, const std::string& path, const nlohmann::json& value);

}  // namespace qep

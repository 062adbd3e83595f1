#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "qep/analysis.hpp"
#include "qep/scenario.hpp"

namespace qep {

/// Detected tags split by origin, before configuration-specific assembly.
/// Every list is sorted.
struct SimulationComponents {
    std::vector<Picoseconds> herald;        ///< signal, singles and darks
    std::vector<Picoseconds> probe_signal;  ///< source photons returned from the scene
    std::vector<Picoseconds> probe_noise;   ///< injected background
    std::vector<Picoseconds> probe_dark;
    Picoseconds lead_in = 0;
    Picoseconds duration = 0;
    std::uint64_t pulses = 0;
    std::uint64_t pairs_generated = 0;
    DetectDiagnostics diagnostics;
};

/// Offset added to every timestamp so that negative dispersion shifts and
/// jitter never produce negative tags.
Picoseconds lead_in_ps(const ScenarioConfig& cfg);

/// One pass over all pulses; `threads` <= 0 uses the hardware count.
/// Output does not depend on the thread count.
SimulationComponents simulate_components(const ScenarioConfig& cfg, std::uint64_t seed, int threads = 0);

/// REF/HERALD/PROBE stream of one configuration. `seed` drives the REF
/// jitter and must be the seed the components were simulated with.
TagStream assemble_stream(const ScenarioConfig& cfg, const SimulationComponents& comp, const Configuration& which,
                          std::uint64_t seed);
TagStream assemble_stream(const ScenarioConfig& cfg, const SimulationComponents& comp, const Configuration& which);

struct SimulationResult {
    std::vector<std::pair<Configuration, TagStream>> streams;
    std::vector<std::string> warnings;
    std::uint64_t pairs_generated = 0;
    /// Detected source photons at the probe detector in the probe:on runs.
    std::uint64_t probe_signal_tags = 0;
    DetectDiagnostics diagnostics;
};

/// Streams for every configured setting. With common random numbers all
/// settings share one realization; otherwise each gets its own seed.
SimulationResult simulate(const ScenarioConfig& cfg, int threads = 0);

/// Length of the union of a target's probe intervals, ps.
double probe_window_width(const WindowSet& w);

/// `<stem>.qtt` for each stream.
std::vector<std::filesystem::path> write_streams(const SimulationResult& r, const std::filesystem::path& dir);

struct TargetReport {
    ReconstructedTarget target;
    std::optional<Estimate> snr_c;
    std::optional<Estimate> snr_q;
    std::optional<Estimate> esnr;
    CarBin car;
    /// Noise over signal single counts inside this target's probe windows.
    std::optional<double> noise_db;
    std::vector<std::pair<std::string, WindowCounts>> counts;
};

struct AnalysisReport {
    std::string fingerprint;
    /// Configuration the targets and windows were reconstructed from.
    std::string reference_configuration;
    /// Configuration CAR was measured in.
    std::string car_configuration;
    std::vector<CarBin> car_bins;
    std::vector<TargetReport> targets;
    double delta_distance_cm = 0.0;
    double delta_direction_deg = 0.0;
    /// Detector jitters in quadrature, and the median fitted width of the
    /// significant JTI row peaks, which also carries dispersion broadening
    /// inside a herald bin.
    double coincidence_fwhm_model_ps = 0.0;
    std::optional<double> coincidence_fwhm_measured_ps;
    std::optional<RandomnessReport> randomness;
    std::string randomness_note;
    /// Injected noise over source signal, both counted inside the target
    /// probe windows (whole-period totals when no target was found).
    std::optional<double> noise_intensity_db;
    bool calibrated = false;
    double calibration_residual_nm = 0.0;
    std::vector<ClassicalPeak> classical_peaks;
    std::vector<std::pair<std::string, std::uint64_t>> tag_counts;

    nlohmann::json to_json() const;
};

using StreamSet = std::vector<std::pair<Configuration, TagStream>>;

/// Full analysis. Throws ValidationError if a stream's fingerprint differs
/// from the scenario's.
AnalysisReport analyze(const ScenarioConfig& cfg, const StreamSet& streams,
                       const std::optional<CalibrationMap>& herald_map = std::nullopt);

/// Reads `<stem>.qtt` files for the configured settings from `dir`.
StreamSet read_streams(const ScenarioConfig& cfg, const std::filesystem::path& dir);

/// Maps a noise intensity in dB to an injected noise rate. Calibrated on a
/// noise-free pilot run: detected signal counts per second inside the
/// target windows, and the fraction of the period those windows cover.
struct NoiseScale {
    double signal_rate_hz = 0.0;
    double window_fraction = 0.0;

    double noise_rate_hz(double db, double probe_qe) const;
};

NoiseScale calibrate_noise_scale(const nlohmann::json& scenario, int threads = 0);

struct SweepSpec {
    /// Dotted scenario path, or "noise_intensity_db" to set the injected
    /// noise relative to the measured probe signal.
    std::string path;
    std::vector<double> values;
    nlohmann::json overrides = nlohmann::json::object();
    /// Optional merge patches applied to single points, one per value
    /// (e.g. a longer run at lower pump power).
    std::vector<nlohmann::json> per_value;

    static SweepSpec from_json(const nlohmann::json& j);
};

struct SweepRow {
    double value = 0.0;
    std::string target;
    double direction_deg = 0.0;
    double distance_m = 0.0;
    std::optional<Estimate> snr_c;
    std::optional<Estimate> snr_q;
    std::optional<Estimate> esnr;
    double car = 0.0;
    bool car_lower_bound = false;
    std::optional<double> noise_db;
    /// Injected noise rate the point ran with.
    double noise_rate_hz = 0.0;
};

std::vector<SweepRow> sweep(const nlohmann::json& scenario, const SweepSpec& spec, int threads = 0);

std::string sweep_csv_header();
std::string sweep_csv_row(const SweepRow& r);

/// Threads from QEPLIDAR_THREADS, else hardware concurrency.
int default_thread_count();

}  // namespace qep

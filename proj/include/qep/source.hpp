#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "qep/model.hpp"
#include "qep/random.hpp"

namespace qep {

class SamplingError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct PumpSpec {
    std::int64_t repetition_rate_hz = 19'270'000;
    double center_frequency_thz = 194.6;
    /// Envelope parameter of the sum-frequency Gaussian in the JSI, GHz.
    double spectral_fwhm_ghz = 31.6;
    double pulse_duration_ps = 12.0;

    double period_ps() const { return 1e12 / static_cast<double>(repetition_rate_hz); }
    double center_wavelength_nm() const { return frequency_to_wavelength(center_frequency_thz); }
};

/// Phase mismatch kappa(detuning) as a polynomial in (f_pr - f_p) [THz],
/// coefficients in rad/m per THz^k. All-zero means flat phase matching.
struct PhaseMatchModel {
    std::vector<double> kappa_coefficients;
    double length_m = 0.01;

    double kappa(double detuning_thz) const;
    /// sinc^2(kappa * l / 2) at the given probe detuning.
    double efficiency(double detuning_thz) const;
};

struct EmissionRates {
    double pair_rate = 0.0;           ///< mean pairs per pump pulse
    double single_probe_rate = 0.0;   ///< uncorrelated probe-band photons per pulse
    double single_herald_rate = 0.0;  ///< uncorrelated herald-band photons per pulse

    double total() const { return pair_rate + single_probe_rate + single_herald_rate; }
};

/// Ideal rectangular passband.
struct SpectralBand {
    double center_nm = 0.0;
    double width_nm = 0.0;

    double min_nm() const { return center_nm - 0.5 * width_nm; }
    double max_nm() const { return center_nm + 0.5 * width_nm; }
    double min_thz() const { return wavelength_to_frequency(max_nm()); }
    double max_thz() const { return wavelength_to_frequency(min_nm()); }
    bool contains_frequency(double f_thz) const { return f_thz >= min_thz() && f_thz <= max_thz(); }
    bool overlaps(const SpectralBand& other) const
    {
        return min_nm() < other.max_nm() && other.min_nm() < max_nm();
    }
};

struct PairEmission {
    Picoseconds generation_time = 0;
    double herald_frequency_thz = 0.0;
    double probe_frequency_thz = 0.0;
};

struct SingleEmission {
    Picoseconds generation_time = 0;
    double frequency_thz = 0.0;
};

struct PulseEmissions {
    std::vector<PairEmission> pairs;
    std::vector<SingleEmission> herald_singles;
    std::vector<SingleEmission> probe_singles;

    bool empty() const { return pairs.empty() && herald_singles.empty() && probe_singles.empty(); }
    void clear()
    {
        pairs.clear();
        herald_singles.clear();
        probe_singles.clear();
    }
};

/// Joint spectral intensity, 1 at the on-resonance maximum with flat phase
/// matching.
double jsi_weight(double herald_thz, double probe_thz, const PumpSpec& pump, const PhaseMatchModel& pm);

/// Start time of pulse `pulse_index` on the integer-picosecond clock. The
/// schedule rounds the exact rational time, so consecutive differences are
/// floor(T) or ceil(T) and the mean period is exact.
Picoseconds pulse_time(std::uint64_t pulse_index, const PumpSpec& pump);

/// Index of the pulse whose start is nearest to `t` (t >= 0).
std::uint64_t nearest_pulse(Picoseconds t, const PumpSpec& pump);

/// Precomputed state for per-pulse emission sampling.
class EmissionModel {
  public:
    EmissionModel(PumpSpec pump, PhaseMatchModel pm, EmissionRates rates, SpectralBand herald_band,
                  SpectralBand probe_band, int max_attempts = 10000);

    /// Rejection-samples (herald, probe) frequencies from the JSI restricted
    /// to the band product.
    void sample_pair(CounterRng& rng, double& herald_thz, double& probe_thz) const;

    const PumpSpec& pump() const { return pump_; }
    const PhaseMatchModel& phase_match() const { return pm_; }
    const EmissionRates& rates() const { return rates_; }
    const SpectralBand& herald_band() const { return herald_band_; }
    const SpectralBand& probe_band() const { return probe_band_; }

    /// Sampled sum-frequency standard deviation, THz.
    double sum_sigma_thz() const { return sum_sigma_thz_; }

  private:
    friend void sample_pulse_emissions(std::uint64_t, std::uint64_t, const EmissionModel&, PulseEmissions&);

    PumpSpec pump_;
    PhaseMatchModel pm_;
    EmissionRates rates_;
    SpectralBand herald_band_;
    SpectralBand probe_band_;
    int max_attempts_;
    double sum_sigma_thz_;
    double exp_neg_total_;
    bool flat_phase_match_;
};

/// Emissions of one pump pulse. Depends only on (pulse_index, seed).
void sample_pulse_emissions(std::uint64_t pulse_index, std::uint64_t seed, const EmissionModel& model,
                            PulseEmissions& out);

PulseEmissions sample_pulse_emissions(std::uint64_t pulse_index, std::uint64_t seed, const EmissionModel& model);

}  // namespace qep

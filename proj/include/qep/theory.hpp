#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qep::theory {

class RegimeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class OracleError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Per-pulse probabilities. Noise and dark rates given per second must be
/// multiplied by the pump period first (see from_rates_hz).
struct RateParams {
    double nu_cc = 0.0;
    double nu_sc_p = 0.0;
    double nu_sc_h = 0.0;
    double nu_noise_p = 0.0;
    double nu_dc_p = 0.0;
    double nu_dc_h = 0.0;
    double eta_p = 1.0;
    double eta_h = 1.0;

    /// Builds per-pulse values from per-second noise/dark rates.
    static RateParams from_rates_hz(double nu_cc, double nu_sc_p, double nu_sc_h, double noise_hz, double dark_p_hz,
                                    double dark_h_hz, double eta_p, double eta_h, double period_s);
};

/// Throws std::invalid_argument if a field is outside [0, 1]; returns
/// warnings for composite probabilities above 0.1 (first-order breakdown).
std::vector<std::string> validate(const RateParams& p);

struct DetectionProbabilities {
    double sc_on_on = 0.0;
    double sc_off_on = 0.0;
    double cc_on_on = 0.0;
    double cc_off_on = 0.0;
};

DetectionProbabilities detection_probabilities(const RateParams& p);

struct SnrPair {
    std::optional<double> classical;
    std::optional<double> quantum;
};

/// Closed forms; nullopt marks an undefined ratio (zero denominator).
SnrPair snr_closed_form(const RateParams& p);
std::optional<double> esnr_closed_form(const RateParams& p);
std::optional<double> car_closed_form(const RateParams& p);

/// Per-second rates for the Fisher-information model.
struct FisherParams {
    double nu = 0.0;     ///< pairs / s
    double nu_b = 0.0;   ///< probe-channel noise / s
    double eta_p = 1.0;
    double eta_h = 1.0;
    double t_pump_s = 1.0 / 19.27e6;
    double t_cc_s = 100e-12;

    RateParams to_rate_params() const;
};

struct FisherRates {
    double p_cc = 0.0;
    double p_p = 0.0;
    double p_h = 0.0;
};

/// Throws RegimeError if any rate is negative.
FisherRates fisher_rates(const FisherParams& fp);

std::optional<double> fisher_information_quantum(const FisherParams& fp);
std::optional<double> fisher_information_classical(const FisherParams& fp);

struct FisherEnhancement {
    double e_fisher = 0.0;
    double coincidence_term = 0.0;
    double herald_term = 0.0;
    double probe_term = 0.0;

    double coincidence_share() const { return coincidence_term / e_fisher; }
};

std::optional<FisherEnhancement> fisher_enhancement(const FisherParams& fp);

struct OracleOptions {
    /// Largest count per channel; 0 picks mean + 12 sqrt(mean), widened until
    /// the retained mass is at least 1 - 1e-10.
    int truncation = 0;
    /// Central-difference step on eta_p.
    double step = 1e-5;
};

/// Brute-force Fisher information about eta_p from the three-channel
/// Poisson likelihood, summed over a truncated count cube.
double fisher_numeric_oracle(const FisherParams& fp, const OracleOptions& opt = {});

/// Same, for the single probe-channel likelihood at eta_h = 0.
double fisher_numeric_oracle_classical(const FisherParams& fp, const OracleOptions& opt = {});

}  // namespace qep::theory

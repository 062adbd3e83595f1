#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qep/channel.hpp"
#include "qep/detect.hpp"
#include "qep/source.hpp"

namespace qep {

class AnalysisError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class FitError : public std::runtime_error {
  public:
    FitError(const std::string& what, double rms_residual)
        : std::runtime_error(what), rms_residual_(rms_residual)
    {
    }
    double rms_residual() const { return rms_residual_; }

  private:
    double rms_residual_;
};

class NoPeakError : public FitError {
  public:
    explicit NoPeakError(const std::string& what) : FitError(what, 0.0) {}
};

class CalibrationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- folding

struct FoldedEvent {
    Channel channel = Channel::Herald;
    /// Ordinal of the REF tag the event is assigned to.
    std::uint64_t pulse = 0;
    /// Tag time minus REF time, in [-T/2, T/2).
    Picoseconds relative = 0;
};

struct FoldedEvents {
    double period_ps = 0.0;
    std::vector<Picoseconds> ref_times;
    /// Sorted by (pulse, relative).
    std::vector<FoldedEvent> heralds;
    std::vector<FoldedEvent> probes;
    /// HERALD/PROBE tags with no REF tag within half a period.
    std::uint64_t unassigned = 0;

    /// Ordinal of the REF tag nearest ref_times[pulse] + k T, if one lies
    /// within T/2 of it.
    std::optional<std::uint64_t> shifted_pulse(std::uint64_t pulse, int k) const;
};

FoldedEvents fold_to_pulse_frame(const TagStream& stream, double period_ps);

/// Calls fn(herald, probe) for every same-pulse herald x probe combination.
void for_each_coincidence(const FoldedEvents& f,
                          const std::function<void(const FoldedEvent&, const FoldedEvent&)>& fn);

/// Same, pairing heralds of pulse i with probes of pulse i + k.
void for_each_shifted_coincidence(const FoldedEvents& f, int k,
                                  const std::function<void(const FoldedEvent&, const FoldedEvent&)>& fn);

// --------------------------------------------------------------- histograms

/// Square-binned histogram over [origin, origin + n * bin_width) on both
/// axes. x is probe relative time, y is herald relative time.
struct Histogram2D {
    double origin_ps = 0.0;
    double bin_width_ps = 100.0;
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::vector<std::uint64_t> counts;

    Histogram2D() = default;
    Histogram2D(double origin, double bin_width, std::size_t n);

    std::optional<std::size_t> bin_of(double t) const;
    double bin_center(std::size_t i) const { return origin_ps + (static_cast<double>(i) + 0.5) * bin_width_ps; }
    std::uint64_t& at(std::size_t ix, std::size_t iy) { return counts[iy * nx + ix]; }
    std::uint64_t at(std::size_t ix, std::size_t iy) const { return counts[iy * nx + ix]; }
    void add(double x, double y);
    std::uint64_t total() const;
};

Histogram2D build_jti(const FoldedEvents& folded, double bin_width_ps = 100.0);

/// `x_bin,y_bin,count` rows for nonzero cells (bin centers in ps).
void write_jti_csv(const Histogram2D& h, const std::filesystem::path& path);

/// 1-D histogram of probe relative times over the folded period.
std::vector<std::uint64_t> probe_time_histogram(const FoldedEvents& folded, double bin_width_ps);

// --------------------------------------------------------------- peak fit

struct GaussianFitResult {
    double mean = 0.0;
    double fwhm = 0.0;
    double amplitude = 0.0;
    double baseline = 0.0;
    double rms_residual = 0.0;
    int iterations = 0;
};

/// Gaussian + constant least-squares fit (Levenberg-Marquardt).
/// Throws NoPeakError for empty or flat data, FitError if it does not
/// converge within 200 iterations.
GaussianFitResult fit_gaussian_peak(std::span<const double> bin_centers, std::span<const double> counts);

// ------------------------------------------------------------ CAR and SNR

struct Estimate {
    double value = 0.0;
    double sigma = 0.0;
};

struct RowOptions {
    double window_ps = 100.0;
    int accidental_shifts = 5;  ///< per side
    double fit_bin_ps = 20.0;
    double fit_halfspan_ps = 1000.0;
    /// Rows with fewer coincidences than this in the fit span are skipped.
    std::uint64_t min_counts = 5;
};

/// Per herald-bin coincidence peak.
struct RowPeak {
    std::size_t herald_bin = 0;
    double herald_center_ps = 0.0;
    double probe_peak_ps = 0.0;
    bool fitted = false;  ///< false: centroid fallback
    double fwhm_ps = 0.0;
    std::uint64_t n_cc = 0;
    double n_acc = 0.0;
    /// Mean herald time of coincidences inside the N_CC window.
    double mean_herald_ps = 0.0;
};

std::vector<RowPeak> find_row_peaks(const Histogram2D& jti, const FoldedEvents& folded, const RowOptions& opt = {});

struct CarBin {
    std::size_t herald_bin = 0;
    double herald_center_ps = 0.0;
    double probe_peak_ps = 0.0;
    std::uint64_t n_cc = 0;
    double n_acc = 0.0;
    double car = 0.0;
    /// N_ACC was zero: car holds N_CC / epsilon with epsilon = 1 / (2 shifts),
    /// a lower bound.
    bool lower_bound = false;
};

std::vector<CarBin> car_per_herald_bin(const Histogram2D& jti, const FoldedEvents& folded,
                                       const RowOptions& opt = {});

/// CAR from counts with the same sentinel rule as car_per_herald_bin.
CarBin car_from_counts(std::uint64_t n_cc, double n_acc, int accidental_shifts);

/// One rectangle of a target's coincidence window.
struct RowWindow {
    double herald_lo = 0.0;
    double herald_hi = 0.0;
    double probe_lo = 0.0;
    double probe_hi = 0.0;
};

/// A target's windows: coincidences count inside any rectangle, single
/// counts inside the union of the probe intervals.
struct WindowSet {
    std::string label;
    std::vector<RowWindow> rows;
};

struct WindowCounts {
    std::uint64_t n_sc = 0;
    std::uint64_t n_cc = 0;
    double n_acc = 0.0;
};

WindowCounts count_window(const FoldedEvents& folded, const WindowSet& w, int accidental_shifts = 5);
/// All windows in one pass over the data.
std::vector<WindowCounts> count_windows(const FoldedEvents& folded, std::span<const WindowSet> windows,
                                        int accidental_shifts = 5);

/// (N_on - N_off) / N_off. With paired (common random number) runs the
/// signal and background counts are independent Poisson; otherwise on and
/// off are. Undefined when N_off = 0.
std::optional<Estimate> snr_from_counts(double n_on, double n_off, bool paired = true);

std::vector<std::optional<Estimate>> snr_classical(const FoldedEvents& on, const FoldedEvents& off,
                                                   std::span<const WindowSet> windows, bool paired = true);
std::vector<std::optional<Estimate>> snr_quantum(const FoldedEvents& on, const FoldedEvents& off,
                                                 std::span<const WindowSet> windows, bool paired = true);

/// SNR_Q / SNR_C; undefined when SNR_C <= 0.
std::optional<Estimate> snr_enhancement(const Estimate& snr_q, const Estimate& snr_c);

/// 10 log10(N_false / N_true); undefined when N_true <= 0.
std::optional<double> noise_intensity_db(double n_true, double n_false);

/// Probe-histogram bins exceeding median + k sqrt(median).
struct ClassicalPeak {
    std::size_t bin = 0;
    double center_ps = 0.0;
    std::uint64_t count = 0;
    double baseline = 0.0;
};
std::vector<ClassicalPeak> classical_peaks(const FoldedEvents& folded, double bin_width_ps = 100.0,
                                           double k_sigma = 5.0);

// ------------------------------------------------------------ calibration

/// Monotone arrival-time -> wavelength map.
class CalibrationMap {
  public:
    /// Inverse of the configured dispersion model.
    static CalibrationMap from_dispersion(const DispersionModel& d);
    /// Polynomial through anchors; coefficients act on (t - t_center) / t_scale.
    static CalibrationMap from_polynomial(std::vector<double> coeffs, double t_center, double t_scale, double t_lo,
                                          double t_hi);

    double wavelength_at(double time_ps) const;
    bool is_fallback() const { return fallback_.has_value(); }

    std::vector<std::pair<double, double>> anchors;  ///< (time ps, wavelength nm)
    double residual_nm = 0.0;
    double time_lo_ps = 0.0;
    double time_hi_ps = 0.0;
    std::vector<double> coefficients;
    double t_center = 0.0;
    double t_scale = 1.0;

  private:
    std::optional<DispersionModel> fallback_;
};

struct Feature {
    enum class Kind { Minimum, Maximum };
    Kind kind = Kind::Minimum;
    double position = 0.0;
    double prominence = 0.0;
};

/// Local extrema of a 3-point-smoothed sampled curve whose prominence is at
/// least `min_prominence` of the curve's range; positions refined by a
/// quadratic vertex through the neighbouring samples.
std::vector<Feature> detect_features(std::span<const double> x, std::span<const double> y,
                                     double min_prominence = 0.1, int smoothing_passes = 2);

struct CalibrationOptions {
    double min_prominence = 0.1;
    int smoothing_passes = 2;
};

/// Aligns features of a herald arrival-time histogram with those of a
/// reference transmission curve.
CalibrationMap calibrate_time_to_wavelength(std::span<const double> time_centers_ps,
                                            std::span<const double> counts,
                                            std::span<const double> reference_wavelength_nm,
                                            std::span<const double> reference_transmission,
                                            const CalibrationOptions& opt = {});

// ---------------------------------------------------------- reconstruction

struct ReconstructedTarget {
    double direction_deg = 0.0;
    double distance_m = 0.0;
    std::uint64_t peak_count = 0;
    std::size_t herald_bin = 0;
    std::size_t n_rows = 0;
    double delta_distance_m = 0.0;
    double delta_direction_deg = 0.0;
    /// Windows to reuse for SNR counting.
    WindowSet window;
};

struct ReconstructOptions {
    RowOptions rows;
    double threshold_sigma = 5.0;
    bool loopback = false;
    double coincidence_fwhm_ps = 110.1;
    double herald_jitter_fwhm_ps = 89.9;
    double pump_bandwidth_nm = 0.25;
    /// Significant rows may be this many bins apart and still cluster.
    std::size_t max_gap_rows = 1;
    /// Largest range change between clustered rows, in units of the
    /// distance resolution.
    double max_range_step = 3.0;
    /// Clusters with fewer significant rows are discarded. Each row's peak
    /// is the maximum over the whole probe axis, so isolated rows are
    /// dominated by look-elsewhere fluctuations at high noise.
    std::size_t min_rows = 2;
};

std::vector<ReconstructedTarget> reconstruct_targets(const Histogram2D& jti, const FoldedEvents& folded,
                                                     const CalibrationMap& herald_map, const GratingSpec& grating,
                                                     const DispersionModel& dispersion, const PumpSpec& pump,
                                                     const ReconstructOptions& opt = {});

/// Rows qualify when N_CC > b + k sqrt(b), b = max(N_ACC, 1).
bool row_is_significant(const RowPeak& r, double k_sigma);

// -------------------------------------------------------------- resolution

/// (c/2) sqrt(dt^2 + (slope * dl)^2), in cm.
double distance_resolution(double coincidence_fwhm_ps, double slope_ns_per_nm, double pump_bandwidth_nm);

/// sqrt((dt / slope)^2 + (l0 / R)^2) * |dtheta/dl|(l0), in degrees.
double direction_resolution(double herald_jitter_fwhm_ps, double slope_ns_per_nm, double wavelength_nm,
                            const GratingSpec& grating);

// -------------------------------------------------------------- randomness

struct RandomnessReport {
    std::size_t n = 0;
    double chi2 = 0.0;
    int dof = 0;
    double p_value = 0.0;
    double lag1_correlation = 0.0;
    double lag1_standard_error = 0.0;
    double min_entropy_bits = 0.0;
};

/// `model` gives the expected probability of each bin of width `bin_width`
/// starting at `origin`; it is renormalized. Bins with expectation < 5 are
/// merged with neighbours. Throws AnalysisError below 1000 events.
RandomnessReport randomness_report(std::span<const double> times_ps, double origin_ps, double bin_width_ps,
                                   std::span<const double> model);

/// Expected herald relative-time bin probabilities: JSI marginal of paired
/// photons, uniform-in-frequency singles and uniform-in-time darks, mixed
/// by the given weights and blurred by a Gaussian of `jitter_sigma_ps`.
std::vector<double> herald_time_model(const EmissionModel& model, const DispersionModel& dispersion,
                                      double jitter_sigma_ps, double origin_ps, double bin_width_ps,
                                      std::size_t n_bins, double pair_weight, double single_weight,
                                      double dark_weight);

}  // namespace qep

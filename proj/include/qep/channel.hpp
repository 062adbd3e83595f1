#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qep/model.hpp"
#include "qep/random.hpp"
#include "qep/source.hpp"

namespace qep {

/// Arrival-time shift after the dispersive spool, as a function of
/// wavelength. Longer wavelengths arrive later. For a spool with group-
/// velocity dispersion beta2 the slope is D*L = -2 pi c beta2 L / lambda^2.
struct DispersionModel {
    enum class Mode { Linear, Polynomial };

    Mode mode = Mode::Linear;
    double slope_ns_per_nm = 0.4;
    double anchor_wavelength_nm = 1540.56;
    /// Polynomial mode: shift [ps] = sum_k c_k (lambda - anchor)^k, lambda in nm.
    std::vector<double> polynomial_ps;
    double fiber_length_km = 0.0;
    /// Wavelength interval over which the mapping is defined.
    double valid_min_nm = 1400.0;
    double valid_max_nm = 1700.0;

    double shift_ps(double wavelength_nm) const;
    /// d(shift)/d(lambda), ps/nm.
    double slope_ps_per_nm(double wavelength_nm) const;
    /// Inverse of shift_ps; throws DomainError outside the validity interval.
    double wavelength_at_shift(double shift_ps) const;
    /// Throws DomainError if the mapping is not strictly increasing on [lo, hi].
    void check_monotone(double lo_nm, double hi_nm) const;
};

/// Arrival time after dispersion of a photon generated at `generation_time`.
double dispersed_arrival(double frequency_thz, double generation_time_ps, const DispersionModel& dispersion);

struct GratingSpec {
    double groove_density_per_mm = 600.0;
    double incidence_angle_deg = 3.05;
    int diffraction_order = -1;
    double beam_waist_mm = 3.6;

    double period_nm() const { return 1e6 / groove_density_per_mm; }
};

/// |theta_m| in degrees, from alpha (sin theta_m + sin theta_i) = m lambda.
double diffraction_angle(double wavelength_nm, const GratingSpec& grating);

/// |d theta_m / d lambda| in deg/nm.
double angular_dispersion(double wavelength_nm, const GratingSpec& grating);

/// Resolving power |m| w / alpha.
double resolving_power(const GratingSpec& grating);

struct Target {
    std::string id;
    double center_wavelength_nm = 0.0;
    double angular_halfwidth_deg = 0.0;
    double distance_m = 0.0;
    double roundtrip_efficiency = 1.0;
};

struct Scene {
    /// Probe fed straight back to the detector: no grating, no free space.
    bool loopback = false;
    std::vector<Target> targets;
};

/// Index of the target whose angular interval contains `angle_deg`.
std::optional<std::size_t> find_target(double angle_deg, const Scene& scene, const GratingSpec& grating);

struct ChannelSpec {
    double probe_efficiency = 1.0;
    double herald_efficiency = 1.0;
    double noise_rate_hz = 0.0;
};

/// Everything the probe path needs, bundled so per-photon calls stay cheap.
struct ProbePath {
    const Scene& scene;
    const GratingSpec& grating;
    const DispersionModel& dispersion;
    const ChannelSpec& channel;
};

/// Arrival time of a probe-band photon at the probe detector input, or
/// nothing if it misses every target or is lost. Survival randomness only
/// decides presence; the time is a pure function of frequency and geometry.
std::optional<double> propagate_probe(double frequency_thz, double generation_time_ps, const ProbePath& path,
                                      CounterRng& rng);

inline std::optional<double> propagate_probe(const PairEmission& e, const ProbePath& path, CounterRng& rng)
{
    return propagate_probe(e.probe_frequency_thz, static_cast<double>(e.generation_time), path, rng);
}

std::optional<double> propagate_herald(double frequency_thz, double generation_time_ps,
                                       const DispersionModel& dispersion, const ChannelSpec& channel,
                                       CounterRng& rng);

inline std::optional<double> propagate_herald(const PairEmission& e, const DispersionModel& dispersion,
                                              const ChannelSpec& channel, CounterRng& rng)
{
    return propagate_herald(e.herald_frequency_thz, static_cast<double>(e.generation_time), dispersion, channel,
                            rng);
}

/// Uniform Poisson arrivals at `rate_hz` on [begin_ps, end_ps), appended
/// unsorted to `out`.
void sample_uniform_arrivals(double begin_ps, double end_ps, double rate_hz, CounterRng& rng,
                             std::vector<double>& out);

/// Injected probe-band noise over [0, duration), sorted.
std::vector<double> sample_noise_arrivals(double duration_s, const ChannelSpec& channel,
                                          const SpectralBand& probe_band, std::uint64_t seed);

}  // namespace qep

#include "qep/channel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qep {

namespace {

constexpr double kDegPerRad = 180.0 / std::numbers::pi;

double sin_diffracted(double wavelength_nm, const GratingSpec& g)
{
    return g.diffraction_order * wavelength_nm / g.period_nm() - std::sin(g.incidence_angle_deg / kDegPerRad);
}

}  // namespace

double DispersionModel::shift_ps(double wavelength_nm) const
{
    if (!(wavelength_nm >= valid_min_nm && wavelength_nm <= valid_max_nm))
        throw DomainError("wavelength " + std::to_string(wavelength_nm) + " nm outside dispersion validity band ["
                          + std::to_string(valid_min_nm) + ", " + std::to_string(valid_max_nm) + "]");
    const double x = wavelength_nm - anchor_wavelength_nm;
    if (mode == Mode::Linear)
        return slope_ns_per_nm * 1e3 * x;
    double acc = 0.0;
    for (auto it = polynomial_ps.rbegin(); it != polynomial_ps.rend(); ++it)
        acc = acc * x + *it;
    return acc;
}

double DispersionModel::slope_ps_per_nm(double wavelength_nm) const
{
    if (mode == Mode::Linear)
        return slope_ns_per_nm * 1e3;
    const double x = wavelength_nm - anchor_wavelength_nm;
    double acc = 0.0;
    for (std::size_t k = polynomial_ps.size(); k-- > 1;)
        acc = acc * x + static_cast<double>(k) * polynomial_ps[k];
    return acc;
}

double DispersionModel::wavelength_at_shift(double shift) const
{
    if (mode == Mode::Linear) {
        const double w = anchor_wavelength_nm + shift / (slope_ns_per_nm * 1e3);
        if (!(w >= valid_min_nm && w <= valid_max_nm))
            throw DomainError("arrival shift " + std::to_string(shift) + " ps maps outside the validity band");
        return w;
    }
    double lo = valid_min_nm;
    double hi = valid_max_nm;
    if (shift < shift_ps(lo) || shift > shift_ps(hi))
        throw DomainError("arrival shift " + std::to_string(shift) + " ps maps outside the validity band");
    for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
        const double mid = 0.5 * (lo + hi);
        (shift_ps(mid) < shift ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

void DispersionModel::check_monotone(double lo_nm, double hi_nm) const
{
    if (mode == Mode::Linear) {
        if (!(slope_ns_per_nm > 0.0))
            throw DomainError("linear dispersion slope must be positive");
        return;
    }
    constexpr int kSteps = 2000;
    for (int i = 0; i <= kSteps; ++i) {
        const double w = lo_nm + (hi_nm - lo_nm) * i / kSteps;
        if (!(slope_ps_per_nm(w) > 0.0))
            throw DomainError("polynomial dispersion is not strictly increasing at " + std::to_string(w) + " nm");
    }
}

double dispersed_arrival(double frequency_thz, double generation_time_ps, const DispersionModel& dispersion)
{
    return generation_time_ps + dispersion.shift_ps(frequency_to_wavelength(frequency_thz));
}

double diffraction_angle(double wavelength_nm, const GratingSpec& grating)
{
    const double s = sin_diffracted(wavelength_nm, grating);
    if (!(std::fabs(s) <= 1.0))
        throw DomainError("evanescent diffraction order at " + std::to_string(wavelength_nm) + " nm");
    return std::fabs(std::asin(s)) * kDegPerRad;
}

double angular_dispersion(double wavelength_nm, const GratingSpec& grating)
{
    const double s = sin_diffracted(wavelength_nm, grating);
    if (!(std::fabs(s) < 1.0))
        throw DomainError("evanescent diffraction order at " + std::to_string(wavelength_nm) + " nm");
    const double cos_theta = std::sqrt(1.0 - s * s);
    return std::abs(grating.diffraction_order) / (grating.period_nm() * cos_theta) * kDegPerRad;
}

double resolving_power(const GratingSpec& grating)
{
    return std::abs(grating.diffraction_order) * grating.beam_waist_mm * 1e6 / grating.period_nm();
}

std::optional<std::size_t> find_target(double angle_deg, const Scene& scene, const GratingSpec& grating)
{
    for (std::size_t i = 0; i < scene.targets.size(); ++i) {
        const auto& t = scene.targets[i];
        if (std::fabs(angle_deg - diffraction_angle(t.center_wavelength_nm, grating)) <= t.angular_halfwidth_deg)
            return i;
    }
    return std::nullopt;
}

std::optional<double> propagate_probe(double frequency_thz, double generation_time_ps, const ProbePath& path,
                                      CounterRng& rng)
{
    const double arrival = dispersed_arrival(frequency_thz, generation_time_ps, path.dispersion);
    if (path.scene.loopback) {
        if (!rng.bernoulli(path.channel.probe_efficiency))
            return std::nullopt;
        return arrival;
    }
    const double theta = diffraction_angle(frequency_to_wavelength(frequency_thz), path.grating);
    const auto hit = find_target(theta, path.scene, path.grating);
    if (!hit)
        return std::nullopt;
    const auto& target = path.scene.targets[*hit];
    if (!rng.bernoulli(path.channel.probe_efficiency * target.roundtrip_efficiency))
        return std::nullopt;
    return arrival + 2.0 * target.distance_m / kSpeedOfLightMPerPs;
}

std::optional<double> propagate_herald(double frequency_thz, double generation_time_ps,
                                       const DispersionModel& dispersion, const ChannelSpec& channel,
                                       CounterRng& rng)
{
    if (!rng.bernoulli(channel.herald_efficiency))
        return std::nullopt;
    return dispersed_arrival(frequency_thz, generation_time_ps, dispersion);
}

void sample_uniform_arrivals(double begin_ps, double end_ps, double rate_hz, CounterRng& rng,
                             std::vector<double>& out)
{
    if (!(rate_hz > 0.0) || !(end_ps > begin_ps))
        return;
    const double span = end_ps - begin_ps;
    const std::uint64_t n = rng.poisson(rate_hz * span * 1e-12);
    for (std::uint64_t i = 0; i < n; ++i)
        out.push_back(begin_ps + span * rng.uniform());
}

std::vector<double> sample_noise_arrivals(double duration_s, const ChannelSpec& channel,
                                          const SpectralBand& probe_band, std::uint64_t seed)
{
    if (!(duration_s > 0.0))
        throw DomainError("noise duration must be positive");
    (void)probe_band;  // noise is spectrally flat inside the probe passband
    std::vector<double> out;
    CounterRng rng(seed, 0, Substream::Noise);
    sample_uniform_arrivals(0.0, duration_s * 1e12, channel.noise_rate_hz, rng, out);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace qep

#include "qep/source.hpp"

#include <cmath>
#include <numbers>

namespace qep {

namespace {

double sinc(double x)
{
    if (std::fabs(x) < 1e-8)
        return 1.0 - x * x / 6.0;
    return std::sin(x) / x;
}

constexpr double kEightLn2 = 8.0 * std::numbers::ln2;

}  // namespace

double PhaseMatchModel::kappa(double detuning_thz) const
{
    double acc = 0.0;
    for (auto it = kappa_coefficients.rbegin(); it != kappa_coefficients.rend(); ++it)
        acc = acc * detuning_thz + *it;
    return acc;
}

double PhaseMatchModel::efficiency(double detuning_thz) const
{
    const double s = sinc(0.5 * kappa(detuning_thz) * length_m);
    return s * s;
}

namespace {
__extension__ using u128 = unsigned __int128;
}  // namespace

double jsi_weight(double herald_thz, double probe_thz, const PumpSpec& pump, const PhaseMatchModel& pm)
{
    const double width_thz = pump.spectral_fwhm_ghz * 1e-3;
    const double x = 2.0 * pump.center_frequency_thz - herald_thz - probe_thz;
    const double envelope = std::exp(-kEightLn2 * x * x / (width_thz * width_thz));
    return pm.efficiency(probe_thz - pump.center_frequency_thz) * envelope;
}

Picoseconds pulse_time(std::uint64_t pulse_index, const PumpSpec& pump)
{
    const auto rate = static_cast<u128>(pump.repetition_rate_hz);
    const u128 num = static_cast<u128>(pulse_index) * 1'000'000'000'000ull;
    return static_cast<Picoseconds>((num + rate / 2) / rate);
}

std::uint64_t nearest_pulse(Picoseconds t, const PumpSpec& pump)
{
    if (t <= 0)
        return 0;
    const auto rate = static_cast<u128>(pump.repetition_rate_hz);
    const auto i0 = static_cast<std::uint64_t>(static_cast<u128>(t) * rate / 1'000'000'000'000ull);
    const Picoseconds t0 = pulse_time(i0, pump);
    const Picoseconds t1 = pulse_time(i0 + 1, pump);
    return (t - t0 <= t1 - t) ? i0 : i0 + 1;
}

EmissionModel::EmissionModel(PumpSpec pump, PhaseMatchModel pm, EmissionRates rates, SpectralBand herald_band,
                             SpectralBand probe_band, int max_attempts)
    : pump_(pump), pm_(std::move(pm)), rates_(rates), herald_band_(herald_band), probe_band_(probe_band),
      max_attempts_(max_attempts)
{
    // exp(-8 ln2 x^2 / w^2) is a Gaussian with sigma = w / (4 sqrt(ln 2)).
    sum_sigma_thz_ = pump_.spectral_fwhm_ghz * 1e-3 / (4.0 * std::sqrt(std::numbers::ln2));
    exp_neg_total_ = std::exp(-rates_.total());
    flat_phase_match_ = true;
    for (double c : pm_.kappa_coefficients)
        flat_phase_match_ = flat_phase_match_ && c == 0.0;
}

void EmissionModel::sample_pair(CounterRng& rng, double& herald_thz, double& probe_thz) const
{
    const double pr_lo = probe_band_.min_thz();
    const double pr_span = probe_band_.max_thz() - pr_lo;
    const double two_fp = 2.0 * pump_.center_frequency_thz;
    for (int attempt = 0; attempt < max_attempts_; ++attempt) {
        const double f_pr = pr_lo + pr_span * rng.uniform();
        const double f_h = two_fp + sum_sigma_thz_ * rng.normal() - f_pr;
        if (!herald_band_.contains_frequency(f_h))
            continue;
        if (!flat_phase_match_ && rng.uniform() >= pm_.efficiency(f_pr - pump_.center_frequency_thz))
            continue;
        herald_thz = f_h;
        probe_thz = f_pr;
        return;
    }
    throw SamplingError("JSI rejection sampling exceeded " + std::to_string(max_attempts_)
                        + " attempts: herald band " + std::to_string(herald_band_.center_nm) + " +/- "
                        + std::to_string(0.5 * herald_band_.width_nm) + " nm has no support against probe band "
                        + std::to_string(probe_band_.center_nm) + " nm");
}

void sample_pulse_emissions(std::uint64_t pulse_index, std::uint64_t seed, const EmissionModel& model,
                            PulseEmissions& out)
{
    out.clear();
    const double total = model.rates_.total();
    if (total <= 0.0)
        return;

    CounterRng rng(seed, pulse_index, Substream::Emission);
    // Poisson(total) by inversion, then a categorical split: equivalent in
    // law to three independent Poisson draws, and one uniform per empty pulse.
    std::uint64_t n = 0;
    if (total < 30.0) {
        const double u = rng.uniform();
        double p = model.exp_neg_total_;
        double cdf = p;
        while (u > cdf && p > 0.0) {
            ++n;
            p *= total / static_cast<double>(n);
            cdf += p;
        }
    } else {
        n = rng.poisson(total);
    }
    if (n == 0)
        return;

    const Picoseconds t = pulse_time(pulse_index, model.pump_);
    const auto& r = model.rates_;
    for (std::uint64_t k = 0; k < n; ++k) {
        const double c = rng.uniform() * total;
        if (c < r.pair_rate) {
            PairEmission e;
            e.generation_time = t;
            model.sample_pair(rng, e.herald_frequency_thz, e.probe_frequency_thz);
            out.pairs.push_back(e);
        } else if (c < r.pair_rate + r.single_probe_rate) {
            const auto& b = model.probe_band_;
            out.probe_singles.push_back({t, b.min_thz() + (b.max_thz() - b.min_thz()) * rng.uniform()});
        } else {
            const auto& b = model.herald_band_;
            out.herald_singles.push_back({t, b.min_thz() + (b.max_thz() - b.min_thz()) * rng.uniform()});
        }
    }
}

PulseEmissions sample_pulse_emissions(std::uint64_t pulse_index, std::uint64_t seed, const EmissionModel& model)
{
    PulseEmissions out;
    sample_pulse_emissions(pulse_index, seed, model, out);
    return out;
}

}  // namespace qep

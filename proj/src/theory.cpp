#include "qep/theory.hpp"

#include <array>
#include <cmath>

namespace qep::theory {

namespace {

std::optional<double> ratio(double num, double den)
{
    if (den == 0.0 || !std::isfinite(num / den))
        return std::nullopt;
    return num / den;
}

double herald_side(const RateParams& p)
{
    return (p.nu_cc + p.nu_sc_h) * p.eta_h + p.nu_dc_h;
}

}  // namespace

RateParams RateParams::from_rates_hz(double nu_cc, double nu_sc_p, double nu_sc_h, double noise_hz,
                                     double dark_p_hz, double dark_h_hz, double eta_p, double eta_h,
                                     double period_s)
{
    RateParams p;
    p.nu_cc = nu_cc;
    p.nu_sc_p = nu_sc_p;
    p.nu_sc_h = nu_sc_h;
    p.nu_noise_p = noise_hz * period_s;
    p.nu_dc_p = dark_p_hz * period_s;
    p.nu_dc_h = dark_h_hz * period_s;
    p.eta_p = eta_p;
    p.eta_h = eta_h;
    return p;
}

std::vector<std::string> validate(const RateParams& p)
{
    const std::array<std::pair<const char*, double>, 8> fields{{{"nu_cc", p.nu_cc},
                                                                 {"nu_sc_p", p.nu_sc_p},
                                                                 {"nu_sc_h", p.nu_sc_h},
                                                                 {"nu_noise_p", p.nu_noise_p},
                                                                 {"nu_dc_p", p.nu_dc_p},
                                                                 {"nu_dc_h", p.nu_dc_h},
                                                                 {"eta_p", p.eta_p},
                                                                 {"eta_h", p.eta_h}}};
    for (const auto& [name, v] : fields)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));

    std::vector<std::string> warnings;
    const auto d = detection_probabilities(p);
    if (d.sc_on_on > 0.1)
        warnings.push_back("probe single-count probability " + std::to_string(d.sc_on_on)
                           + " exceeds 0.1; first-order expressions are unreliable");
    if (herald_side(p) > 0.1)
        warnings.push_back("herald single-count probability " + std::to_string(herald_side(p))
                           + " exceeds 0.1; first-order expressions are unreliable");
    return warnings;
}

DetectionProbabilities detection_probabilities(const RateParams& p)
{
    const double probe_noise = p.nu_noise_p + p.nu_dc_p;
    const double probe_on = (p.nu_cc + p.nu_sc_p) * p.eta_p + probe_noise;
    const double herald = herald_side(p);
    DetectionProbabilities d;
    d.sc_on_on = probe_on;
    d.sc_off_on = probe_noise;
    d.cc_on_on = p.nu_cc * p.eta_p * p.eta_h + probe_on * herald;
    d.cc_off_on = probe_noise * herald;
    return d;
}

SnrPair snr_closed_form(const RateParams& p)
{
    const auto d = detection_probabilities(p);
    return {ratio(d.sc_on_on - d.sc_off_on, d.sc_off_on), ratio(d.cc_on_on - d.cc_off_on, d.cc_off_on)};
}

std::optional<double> esnr_closed_form(const RateParams& p)
{
    auto r = ratio(p.nu_cc * p.eta_h, (p.nu_cc + p.nu_sc_p) * herald_side(p));
    if (r)
        *r += 1.0;
    return r;
}

std::optional<double> car_closed_form(const RateParams& p)
{
    if (p.eta_p == 0.0)
        return std::nullopt;
    auto r = ratio(p.nu_cc * p.eta_h, ((p.nu_cc + p.nu_sc_p) + p.nu_dc_p / p.eta_p) * herald_side(p));
    if (r)
        *r += 1.0;
    return r;
}

RateParams FisherParams::to_rate_params() const
{
    RateParams p;
    p.nu_cc = nu * t_pump_s;
    p.nu_noise_p = nu_b * t_pump_s;
    p.eta_p = eta_p;
    p.eta_h = eta_h;
    return p;
}

FisherRates fisher_rates(const FisherParams& fp)
{
    if (!(fp.t_pump_s > 0.0) || !(fp.t_cc_s >= 0.0) || fp.t_cc_s > fp.t_pump_s)
        throw RegimeError("require 0 <= T_CC <= T_pump and T_pump > 0");
    FisherRates r;
    r.p_cc = fp.nu * fp.eta_h * fp.eta_p + fp.nu * fp.eta_h * fp.nu_b * fp.t_cc_s;
    r.p_p = fp.nu * fp.eta_p + fp.nu_b - r.p_cc;
    r.p_h = fp.nu * fp.eta_h - r.p_cc;
    if (r.p_cc < 0.0 || r.p_p < 0.0 || r.p_h < 0.0)
        throw RegimeError("negative channel rate (P_CC=" + std::to_string(r.p_cc) + ", P_P=" + std::to_string(r.p_p)
                          + ", P_H=" + std::to_string(r.p_h) + "); first-order model breaks down");
    return r;
}

std::optional<FisherEnhancement> fisher_enhancement(const FisherParams& fp)
{
    const auto r = fisher_rates(fp);
    if (!(r.p_p > 0.0))
        return std::nullopt;
    // At eta_h = 0 the first two terms are 0/0; their limit is zero.
    double cc_term = 0.0;
    double h_term = 0.0;
    if (fp.eta_h > 0.0) {
        if (!(r.p_cc > 0.0) || !(r.p_h > 0.0))
            return std::nullopt;
        cc_term = fp.eta_h * fp.eta_h / r.p_cc;
        h_term = fp.eta_h * fp.eta_h / r.p_h;
    }
    const double p_term = (1.0 - fp.eta_h) * (1.0 - fp.eta_h) / r.p_p;
    const double classical_rate = fp.nu * fp.eta_p + fp.nu_b;
    FisherEnhancement e;
    e.coincidence_term = cc_term * classical_rate;
    e.herald_term = h_term * classical_rate;
    e.probe_term = p_term * classical_rate;
    e.e_fisher = e.coincidence_term + e.herald_term + e.probe_term;
    return e;
}

std::optional<double> fisher_information_quantum(const FisherParams& fp)
{
    const auto e = fisher_enhancement(fp);
    if (!e)
        return std::nullopt;
    const double classical_rate = fp.nu * fp.eta_p + fp.nu_b;
    return fp.nu * fp.nu * (e->e_fisher / classical_rate) * fp.t_pump_s;
}

std::optional<double> fisher_information_classical(const FisherParams& fp)
{
    return ratio(fp.nu * fp.nu * fp.t_pump_s, fp.nu * fp.eta_p + fp.nu_b);
}

namespace {

constexpr double kMassTolerance = 1e-10;

// Smallest n with P(N <= n) >= 1 - tol/8, starting no lower than the default.
int auto_truncation(double mean)
{
    int n = static_cast<int>(std::ceil(mean + 12.0 * std::sqrt(mean)));
    double term = std::exp(-mean);
    double cdf = term;
    for (int k = 1; k <= n; ++k) {
        term *= mean / k;
        cdf += term;
    }
    while (1.0 - cdf > kMassTolerance / 8.0 && n < 100000) {
        ++n;
        term *= mean / n;
        cdf += term;
    }
    return n;
}

std::vector<double> log_pmf_table(double mean, int n_max)
{
    std::vector<double> out(static_cast<std::size_t>(n_max) + 1);
    for (int n = 0; n <= n_max; ++n) {
        if (mean == 0.0)
            out[n] = n == 0 ? 0.0 : -INFINITY;
        else
            out[n] = n * std::log(mean) - mean - std::lgamma(n + 1.0);
    }
    return out;
}

struct ChannelMeans {
    std::array<double, 3> mu;
};

ChannelMeans means_at(FisherParams fp, double eta_p)
{
    fp.eta_p = eta_p;
    const auto r = fisher_rates(fp);
    return {{r.p_cc * fp.t_pump_s, r.p_h * fp.t_pump_s, r.p_p * fp.t_pump_s}};
}

double oracle_impl(const FisherParams& fp, const OracleOptions& opt, std::size_t n_channels)
{
    if (!(opt.step > 0.0))
        throw OracleError("finite-difference step must be positive");
    if (fp.eta_p - opt.step < 0.0)
        throw OracleError("eta_p - step is negative");

    // Channel order: CC, H, P. The classical oracle keeps only P.
    auto pick = [&](const ChannelMeans& m) {
        std::vector<double> v;
        if (n_channels == 3)
            v.assign(m.mu.begin(), m.mu.end());
        else
            v.push_back(m.mu[2]);
        return v;
    };
    const auto mid = pick(means_at(fp, fp.eta_p));
    const auto plus = pick(means_at(fp, fp.eta_p + opt.step));
    const auto minus = pick(means_at(fp, fp.eta_p - opt.step));

    std::vector<int> trunc(n_channels);
    for (std::size_t c = 0; c < n_channels; ++c)
        trunc[c] = opt.truncation > 0 ? opt.truncation : auto_truncation(mid[c]);

    std::vector<std::vector<double>> lp(n_channels), lp_plus(n_channels), lp_minus(n_channels);
    double mass = 1.0;
    for (std::size_t c = 0; c < n_channels; ++c) {
        lp[c] = log_pmf_table(mid[c], trunc[c]);
        lp_plus[c] = log_pmf_table(plus[c], trunc[c]);
        lp_minus[c] = log_pmf_table(minus[c], trunc[c]);
        double m = 0.0;
        for (double v : lp[c])
            m += std::exp(v);
        mass *= m;
    }
    if (mass < 1.0 - kMassTolerance)
        throw OracleError("truncation retains probability mass " + std::to_string(mass) + " < 1 - 1e-10");

    // Direct sum over the whole cube, no factorization shortcuts.
    double info = 0.0;
    std::vector<int> idx(n_channels, 0);
    while (true) {
        double log_p = 0.0;
        double score = 0.0;
        for (std::size_t c = 0; c < n_channels; ++c) {
            log_p += lp[c][idx[c]];
            score += (lp_plus[c][idx[c]] - lp_minus[c][idx[c]]) / (2.0 * opt.step);
        }
        if (std::isfinite(log_p))
            info += std::exp(log_p) * score * score;
        std::size_t c = 0;
        while (c < n_channels && ++idx[c] > trunc[c])
            idx[c++] = 0;
        if (c == n_channels)
            break;
    }
    return info;
}

}  // namespace

double fisher_numeric_oracle(const FisherParams& fp, const OracleOptions& opt)
{
    return oracle_impl(fp, opt, 3);
}

double fisher_numeric_oracle_classical(const FisherParams& fp, const OracleOptions& opt)
{
    FisherParams collapsed = fp;
    collapsed.eta_h = 0.0;
    return oracle_impl(collapsed, opt, 1);
}

}  // namespace qep::theory

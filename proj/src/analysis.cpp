#include "qep/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

namespace qep {

// ------------------------------------------------------------------ folding

std::optional<std::uint64_t> FoldedEvents::shifted_pulse(std::uint64_t pulse, int k) const
{
    const double target = static_cast<double>(ref_times[pulse]) + k * period_ps;
    auto it = std::lower_bound(ref_times.begin(), ref_times.end(), target,
                               [](Picoseconds r, double t) { return static_cast<double>(r) < t; });
    std::optional<std::uint64_t> best;
    double best_d = 0.5 * period_ps;
    for (auto c : {it - 1, it}) {
        if (c < ref_times.begin() || c >= ref_times.end())
            continue;
        const double d = std::fabs(static_cast<double>(*c) - target);
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint64_t>(c - ref_times.begin());
        }
    }
    return best;
}

FoldedEvents fold_to_pulse_frame(const TagStream& stream, double period_ps)
{
    if (!(period_ps > 0.0))
        throw AnalysisError("fold: period must be positive");
    FoldedEvents f;
    f.period_ps = period_ps;
    for (const auto& t : stream.tags)
        if (t.channel == Channel::Ref)
            f.ref_times.push_back(t.timestamp);
    if (f.ref_times.empty())
        throw AnalysisError("fold: stream has no REF tags");

    const double half = 0.5 * period_ps;
    const auto& refs = f.ref_times;
    std::size_t j = 0;
    for (const auto& t : stream.tags) {
        if (t.channel == Channel::Ref)
            continue;
        while (j + 1 < refs.size() && refs[j + 1] <= t.timestamp)
            ++j;
        std::size_t c = j;
        if (t.timestamp >= refs[j] && j + 1 < refs.size() && refs[j + 1] - t.timestamp <= t.timestamp - refs[j])
            c = j + 1;
        const Picoseconds rel = t.timestamp - refs[c];
        if (static_cast<double>(rel) < -half || static_cast<double>(rel) >= half) {
            ++f.unassigned;
            continue;
        }
        FoldedEvent e{t.channel, c, rel};
        (t.channel == Channel::Herald ? f.heralds : f.probes).push_back(e);
    }
    return f;
}

namespace {

using PairFn = std::function<void(const FoldedEvent&, const FoldedEvent&)>;

// probe_begin[p] .. probe_begin[p + 1] indexes the probes of pulse p.
std::vector<std::size_t> probe_index(const FoldedEvents& f)
{
    std::vector<std::size_t> begin(f.ref_times.size() + 1, 0);
    for (const auto& p : f.probes)
        ++begin[p.pulse + 1];
    std::partial_sum(begin.begin(), begin.end(), begin.begin());
    return begin;
}

}  // namespace

void for_each_coincidence(const FoldedEvents& f, const PairFn& fn)
{
    std::size_t hp = 0;
    std::size_t pp = 0;
    const auto& H = f.heralds;
    const auto& P = f.probes;
    while (hp < H.size() && pp < P.size()) {
        if (H[hp].pulse < P[pp].pulse) {
            ++hp;
            continue;
        }
        if (P[pp].pulse < H[hp].pulse) {
            ++pp;
            continue;
        }
        const auto pulse = H[hp].pulse;
        std::size_t he = hp;
        while (he < H.size() && H[he].pulse == pulse)
            ++he;
        std::size_t pe = pp;
        while (pe < P.size() && P[pe].pulse == pulse)
            ++pe;
        for (std::size_t a = hp; a < he; ++a)
            for (std::size_t b = pp; b < pe; ++b)
                fn(H[a], P[b]);
        hp = he;
        pp = pe;
    }
}

void for_each_shifted_coincidence(const FoldedEvents& f, int k, const PairFn& fn)
{
    const auto index = probe_index(f);
    std::uint64_t last_pulse = ~0ull;
    std::optional<std::uint64_t> partner;
    for (const auto& h : f.heralds) {
        if (h.pulse != last_pulse) {
            last_pulse = h.pulse;
            partner = f.shifted_pulse(h.pulse, k);
        }
        if (!partner)
            continue;
        for (std::size_t b = index[*partner]; b < index[*partner + 1]; ++b)
            fn(h, f.probes[b]);
    }
}

// --------------------------------------------------------------- histograms

Histogram2D::Histogram2D(double origin, double bin_width, std::size_t n)
    : origin_ps(origin), bin_width_ps(bin_width), nx(n), ny(n), counts(n * n, 0)
{
    if (!(bin_width > 0.0))
        throw std::invalid_argument("histogram bin width must be positive");
}

std::optional<std::size_t> Histogram2D::bin_of(double t) const
{
    const double idx = std::floor((t - origin_ps) / bin_width_ps);
    if (idx < 0.0 || idx >= static_cast<double>(nx))
        return std::nullopt;
    return static_cast<std::size_t>(idx);
}

void Histogram2D::add(double x, double y)
{
    const auto ix = bin_of(x);
    const auto iy = bin_of(y);
    if (ix && iy)
        ++at(*ix, *iy);
}

std::uint64_t Histogram2D::total() const
{
    return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

namespace {

std::size_t bins_per_period(double period_ps, double bin_width_ps)
{
    return static_cast<std::size_t>(std::ceil(period_ps / bin_width_ps - 1e-9));
}

}  // namespace

Histogram2D build_jti(const FoldedEvents& folded, double bin_width_ps)
{
    Histogram2D h(-0.5 * folded.period_ps, bin_width_ps, bins_per_period(folded.period_ps, bin_width_ps));
    for_each_coincidence(folded, [&](const FoldedEvent& he, const FoldedEvent& pe) {
        h.add(static_cast<double>(pe.relative), static_cast<double>(he.relative));
    });
    return h;
}

void write_jti_csv(const Histogram2D& h, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::trunc);
    if (!os)
        throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    os << "x_bin,y_bin,count\n";
    for (std::size_t iy = 0; iy < h.ny; ++iy)
        for (std::size_t ix = 0; ix < h.nx; ++ix)
            if (const auto c = h.at(ix, iy))
                os << h.bin_center(ix) << ',' << h.bin_center(iy) << ',' << c << '\n';
}

std::vector<std::uint64_t> probe_time_histogram(const FoldedEvents& folded, double bin_width_ps)
{
    const std::size_t n = bins_per_period(folded.period_ps, bin_width_ps);
    std::vector<std::uint64_t> h(n, 0);
    const double origin = -0.5 * folded.period_ps;
    for (const auto& p : folded.probes) {
        auto idx = static_cast<std::ptrdiff_t>(std::floor((static_cast<double>(p.relative) - origin) / bin_width_ps));
        idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(n) - 1);
        ++h[static_cast<std::size_t>(idx)];
    }
    return h;
}

// ----------------------------------------------------------------- peak fit

GaussianFitResult fit_gaussian_peak(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size())
        throw std::invalid_argument("fit_gaussian_peak: size mismatch");
    const auto nonzero = std::count_if(y.begin(), y.end(), [](double v) { return v != 0.0; });
    if (nonzero < 5)
        throw NoPeakError("fewer than 5 nonzero bins");

    const std::size_t n = x.size();
    std::vector<double> sorted(y.begin(), y.end());
    std::nth_element(sorted.begin(), sorted.begin() + n / 4, sorted.end());
    const double base0 = sorted[n / 4];
    const auto imax = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
    const double amp0 = y[imax] - base0;
    if (!(amp0 > 0.0))
        throw NoPeakError("flat histogram");

    const double dx = n > 1 ? std::fabs(x[1] - x[0]) : 1.0;
    const double span = std::fabs(x[n - 1] - x[0]) + dx;
    double w = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = std::max(y[i] - base0, 0.0);
        w += v;
        m2 += v * (x[i] - x[imax]) * (x[i] - x[imax]);
    }
    const double s0 = std::clamp(std::sqrt(m2 / w), 0.5 * dx, 0.5 * span);

    Eigen::Vector4d p(amp0, x[imax], s0, base0);
    auto residuals = [&](const Eigen::Vector4d& q, Eigen::VectorXd& r) {
        for (std::size_t i = 0; i < n; ++i) {
            const double z = (x[i] - q[1]) / q[2];
            r[static_cast<Eigen::Index>(i)] = y[i] - (q[0] * std::exp(-0.5 * z * z) + q[3]);
        }
        return r.squaredNorm();
    };

    Eigen::VectorXd r(static_cast<Eigen::Index>(n));
    Eigen::VectorXd r_try(static_cast<Eigen::Index>(n));
    Eigen::MatrixXd J(static_cast<Eigen::Index>(n), 4);
    double sse = residuals(p, r);
    double lambda = 1e-3;
    bool converged = false;
    int it = 0;
    for (; it < 200 && !converged; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            const double z = (x[i] - p[1]) / p[2];
            const double g = std::exp(-0.5 * z * z);
            const auto row = static_cast<Eigen::Index>(i);
            J(row, 0) = g;
            J(row, 1) = p[0] * g * z / p[2];
            J(row, 2) = p[0] * g * z * z / p[2];
            J(row, 3) = 1.0;
        }
        const Eigen::Matrix4d JtJ = J.transpose() * J;
        const Eigen::Vector4d g = J.transpose() * r;
        while (true) {
            Eigen::Matrix4d A = JtJ;
            A.diagonal() += lambda * JtJ.diagonal().cwiseMax(1e-12);
            const Eigen::Vector4d step = A.ldlt().solve(g);
            const Eigen::Vector4d scale(std::max(std::fabs(p[0]), 1e-12), std::fabs(p[2]), std::fabs(p[2]),
                                        std::max(std::fabs(p[3]), std::fabs(p[0])));
            const double rel = step.cwiseAbs().cwiseQuotient(scale).maxCoeff();
            const Eigen::Vector4d trial = p + step;
            const double sse_try = trial[2] > 0.0 ? residuals(trial, r_try) : INFINITY;
            if (sse_try <= sse) {
                p = trial;
                sse = sse_try;
                r.swap(r_try);
                lambda = std::max(lambda * 0.1, 1e-12);
                converged = rel < 1e-8;
                break;
            }
            lambda *= 10.0;
            if (rel < 1e-8 || lambda > 1e16) {
                converged = true;
                break;
            }
        }
    }

    const double rms = std::sqrt(sse / static_cast<double>(n));
    if (!converged)
        throw FitError("Gaussian fit did not converge in 200 iterations", rms);
    if (!(p[0] > 0.0) || !std::isfinite(rms))
        throw NoPeakError("fitted amplitude is not positive");
    GaussianFitResult res;
    res.amplitude = p[0];
    res.mean = p[1];
    res.fwhm = kFwhmPerSigma * std::fabs(p[2]);
    res.baseline = p[3];
    res.rms_residual = rms;
    res.iterations = it;
    return res;
}

// -------------------------------------------------------------- CAR and SNR

std::vector<RowPeak> find_row_peaks(const Histogram2D& jti, const FoldedEvents& folded, const RowOptions& opt)
{
    const double half_w = 0.5 * opt.window_ps;
    std::vector<std::optional<double>> guess(jti.ny);
    for (std::size_t iy = 0; iy < jti.ny; ++iy) {
        std::uint64_t total = 0, best = 0;
        std::size_t bx = 0;
        for (std::size_t ix = 0; ix < jti.nx; ++ix) {
            const auto c = jti.at(ix, iy);
            total += c;
            if (c > best) {
                best = c;
                bx = ix;
            }
        }
        if (total >= opt.min_counts)
            guess[iy] = jti.bin_center(bx);
    }

    struct Pair {
        double h;
        double p;
    };
    std::vector<std::vector<Pair>> near(jti.ny);
    for_each_coincidence(folded, [&](const FoldedEvent& he, const FoldedEvent& pe) {
        const auto iy = jti.bin_of(static_cast<double>(he.relative));
        if (!iy || !guess[*iy])
            return;
        const double p = static_cast<double>(pe.relative);
        if (std::fabs(p - *guess[*iy]) <= opt.fit_halfspan_ps)
            near[*iy].push_back({static_cast<double>(he.relative), p});
    });

    std::vector<RowPeak> rows;
    std::vector<std::optional<std::size_t>> row_of(jti.ny);
    const auto nfine = static_cast<std::size_t>(std::ceil(2.0 * opt.fit_halfspan_ps / opt.fit_bin_ps));
    for (std::size_t iy = 0; iy < jti.ny; ++iy) {
        if (!guess[iy] || near[iy].size() < opt.min_counts)
            continue;
        const double lo = *guess[iy] - opt.fit_halfspan_ps;
        std::vector<double> centers(nfine), counts(nfine, 0.0);
        for (std::size_t i = 0; i < nfine; ++i)
            centers[i] = lo + (static_cast<double>(i) + 0.5) * opt.fit_bin_ps;
        for (const auto& pr : near[iy]) {
            const auto i = static_cast<std::size_t>(std::clamp((pr.p - lo) / opt.fit_bin_ps, 0.0,
                                                                static_cast<double>(nfine) - 1.0));
            counts[i] += 1.0;
        }

        RowPeak row;
        row.herald_bin = iy;
        row.herald_center_ps = jti.bin_center(iy);
        try {
            const auto fit = fit_gaussian_peak(centers, counts);
            if (std::fabs(fit.mean - *guess[iy]) < opt.fit_halfspan_ps && fit.fwhm < opt.fit_halfspan_ps) {
                row.probe_peak_ps = fit.mean;
                row.fwhm_ps = fit.fwhm;
                row.fitted = true;
            }
        } catch (const FitError&) {
        }
        if (!row.fitted) {
            double sum = 0.0;
            std::size_t cnt = 0;
            for (const auto& pr : near[iy])
                if (std::fabs(pr.p - *guess[iy]) <= opt.window_ps) {
                    sum += pr.p;
                    ++cnt;
                }
            row.probe_peak_ps = cnt ? sum / static_cast<double>(cnt) : *guess[iy];
        }
        double hsum = 0.0;
        for (const auto& pr : near[iy])
            if (pr.p >= row.probe_peak_ps - half_w && pr.p < row.probe_peak_ps + half_w) {
                ++row.n_cc;
                hsum += pr.h;
            }
        row.mean_herald_ps = row.n_cc ? hsum / static_cast<double>(row.n_cc) : row.herald_center_ps;
        row_of[iy] = rows.size();
        rows.push_back(row);
    }

    std::vector<std::uint64_t> acc(rows.size(), 0);
    for (int k = -opt.accidental_shifts; k <= opt.accidental_shifts; ++k) {
        if (k == 0)
            continue;
        for_each_shifted_coincidence(folded, k, [&](const FoldedEvent& he, const FoldedEvent& pe) {
            const auto iy = jti.bin_of(static_cast<double>(he.relative));
            if (!iy || !row_of[*iy])
                return;
            const double peak = rows[*row_of[*iy]].probe_peak_ps;
            const double p = static_cast<double>(pe.relative);
            if (p >= peak - half_w && p < peak + half_w)
                ++acc[*row_of[*iy]];
        });
    }
    for (std::size_t i = 0; i < rows.size(); ++i)
        rows[i].n_acc = static_cast<double>(acc[i]) / (2.0 * opt.accidental_shifts);
    return rows;
}

CarBin car_from_counts(std::uint64_t n_cc, double n_acc, int accidental_shifts)
{
    CarBin b;
    b.n_cc = n_cc;
    b.n_acc = n_acc;
    if (n_acc > 0.0) {
        b.car = static_cast<double>(n_cc) / n_acc;
    } else {
        const double eps = 1.0 / (2.0 * accidental_shifts);
        b.car = static_cast<double>(n_cc) / eps;
        b.lower_bound = true;
    }
    return b;
}

std::vector<CarBin> car_per_herald_bin(const Histogram2D& jti, const FoldedEvents& folded, const RowOptions& opt)
{
    std::vector<CarBin> out;
    for (const auto& r : find_row_peaks(jti, folded, opt)) {
        auto b = car_from_counts(r.n_cc, r.n_acc, opt.accidental_shifts);
        b.herald_bin = r.herald_bin;
        b.herald_center_ps = r.herald_center_ps;
        b.probe_peak_ps = r.probe_peak_ps;
        out.push_back(b);
    }
    return out;
}

namespace {

std::vector<std::pair<double, double>> merged_probe_intervals(const WindowSet& w)
{
    std::vector<std::pair<double, double>> iv;
    for (const auto& r : w.rows)
        iv.emplace_back(r.probe_lo, r.probe_hi);
    std::sort(iv.begin(), iv.end());
    std::vector<std::pair<double, double>> out;
    for (const auto& i : iv) {
        if (!out.empty() && i.first <= out.back().second)
            out.back().second = std::max(out.back().second, i.second);
        else
            out.push_back(i);
    }
    return out;
}

bool in_rows(const WindowSet& w, double h, double p)
{
    for (const auto& r : w.rows)
        if (h >= r.herald_lo && h < r.herald_hi && p >= r.probe_lo && p < r.probe_hi)
            return true;
    return false;
}

}  // namespace

std::vector<WindowCounts> count_windows(const FoldedEvents& folded, std::span<const WindowSet> windows,
                                        int accidental_shifts)
{
    std::vector<WindowCounts> out(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto iv = merged_probe_intervals(windows[i]);
        for (const auto& p : folded.probes) {
            const double t = static_cast<double>(p.relative);
            auto it = std::upper_bound(iv.begin(), iv.end(), t,
                                       [](double v, const std::pair<double, double>& a) { return v < a.first; });
            if (it != iv.begin() && t < std::prev(it)->second)
                ++out[i].n_sc;
        }
    }
    auto visit = [&](auto&& bump) {
        return [&, bump](const FoldedEvent& he, const FoldedEvent& pe) {
            const double h = static_cast<double>(he.relative);
            const double p = static_cast<double>(pe.relative);
            for (std::size_t i = 0; i < windows.size(); ++i)
                if (in_rows(windows[i], h, p))
                    bump(i);
        };
    };
    for_each_coincidence(folded, visit([&](std::size_t i) { ++out[i].n_cc; }));
    std::vector<std::uint64_t> acc(windows.size(), 0);
    for (int k = -accidental_shifts; k <= accidental_shifts; ++k)
        if (k != 0)
            for_each_shifted_coincidence(folded, k, visit([&](std::size_t i) { ++acc[i]; }));
    for (std::size_t i = 0; i < windows.size(); ++i)
        out[i].n_acc = accidental_shifts > 0 ? static_cast<double>(acc[i]) / (2.0 * accidental_shifts) : 0.0;
    return out;
}

WindowCounts count_window(const FoldedEvents& folded, const WindowSet& w, int accidental_shifts)
{
    return count_windows(folded, std::span<const WindowSet>(&w, 1), accidental_shifts).front();
}

std::optional<Estimate> snr_from_counts(double n_on, double n_off, bool paired)
{
    if (!(n_off > 0.0))
        return std::nullopt;
    const double s = n_on - n_off;
    Estimate e;
    e.value = s / n_off;
    const double var = paired ? std::fabs(s) / (n_off * n_off) + s * s / (n_off * n_off * n_off)
                              : n_on / (n_off * n_off) + n_on * n_on / (n_off * n_off * n_off);
    e.sigma = std::sqrt(var);
    return e;
}

namespace {

std::vector<std::optional<Estimate>> snr_generic(const FoldedEvents& on, const FoldedEvents& off,
                                                 std::span<const WindowSet> windows, bool paired, bool quantum)
{
    const auto a = count_windows(on, windows, quantum ? 5 : 0);
    const auto b = count_windows(off, windows, quantum ? 5 : 0);
    std::vector<std::optional<Estimate>> out;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const double n_on = static_cast<double>(quantum ? a[i].n_cc : a[i].n_sc);
        const double n_off = static_cast<double>(quantum ? b[i].n_cc : b[i].n_sc);
        out.push_back(snr_from_counts(n_on, n_off, paired));
    }
    return out;
}

}  // namespace

std::vector<std::optional<Estimate>> snr_classical(const FoldedEvents& on, const FoldedEvents& off,
                                                   std::span<const WindowSet> windows, bool paired)
{
    return snr_generic(on, off, windows, paired, false);
}

std::vector<std::optional<Estimate>> snr_quantum(const FoldedEvents& on, const FoldedEvents& off,
                                                 std::span<const WindowSet> windows, bool paired)
{
    return snr_generic(on, off, windows, paired, true);
}

std::optional<Estimate> snr_enhancement(const Estimate& q, const Estimate& c)
{
    if (!(c.value > 0.0))
        return std::nullopt;
    Estimate e;
    e.value = q.value / c.value;
    const double rq = q.value != 0.0 ? q.sigma / q.value : 0.0;
    const double rc = c.sigma / c.value;
    e.sigma = std::fabs(e.value) * std::sqrt(rq * rq + rc * rc);
    if (q.value == 0.0)
        e.sigma = q.sigma / c.value;
    return e;
}

std::optional<double> noise_intensity_db(double n_true, double n_false)
{
    if (!(n_true > 0.0) || !(n_false > 0.0))
        return std::nullopt;
    return 10.0 * std::log10(n_false / n_true);
}

std::vector<ClassicalPeak> classical_peaks(const FoldedEvents& folded, double bin_width_ps, double k_sigma)
{
    const auto h = probe_time_histogram(folded, bin_width_ps);
    std::vector<std::uint64_t> sorted = h;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double base = static_cast<double>(sorted[sorted.size() / 2]);
    const double threshold = base + k_sigma * std::sqrt(std::max(base, 1.0));
    std::vector<ClassicalPeak> out;
    for (std::size_t i = 0; i < h.size(); ++i)
        if (static_cast<double>(h[i]) > threshold)
            out.push_back({i, -0.5 * folded.period_ps + (static_cast<double>(i) + 0.5) * bin_width_ps, h[i], base});
    return out;
}

// -------------------------------------------------------------- calibration

CalibrationMap CalibrationMap::from_dispersion(const DispersionModel& d)
{
    CalibrationMap m;
    m.fallback_ = d;
    m.time_lo_ps = d.shift_ps(d.valid_min_nm);
    m.time_hi_ps = d.shift_ps(d.valid_max_nm);
    return m;
}

CalibrationMap CalibrationMap::from_polynomial(std::vector<double> coeffs, double t_center, double t_scale,
                                               double t_lo, double t_hi)
{
    CalibrationMap m;
    m.coefficients = std::move(coeffs);
    m.t_center = t_center;
    m.t_scale = t_scale;
    m.time_lo_ps = t_lo;
    m.time_hi_ps = t_hi;
    return m;
}

double CalibrationMap::wavelength_at(double time_ps) const
{
    if (fallback_)
        return fallback_->wavelength_at_shift(time_ps);
    const double u = (time_ps - t_center) / t_scale;
    double acc = 0.0;
    for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it)
        acc = acc * u + *it;
    return acc;
}

namespace {

std::vector<double> smooth(std::span<const double> y, int passes)
{
    std::vector<double> s(y.begin(), y.end());
    std::vector<double> t(s.size());
    for (int p = 0; p < passes && s.size() >= 3; ++p) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double l = s[i == 0 ? 0 : i - 1];
            const double r = s[i + 1 == s.size() ? i : i + 1];
            t[i] = 0.25 * l + 0.5 * s[i] + 0.25 * r;
        }
        s.swap(t);
    }
    return s;
}

// Topographic prominence of a local maximum at i.
double prominence_of_max(const std::vector<double>& s, std::size_t i)
{
    double left_min = s[i];
    std::size_t l = i;
    while (l > 0 && s[l - 1] <= s[i]) {
        --l;
        left_min = std::min(left_min, s[l]);
    }
    double right_min = s[i];
    std::size_t r = i;
    while (r + 1 < s.size() && s[r + 1] <= s[i]) {
        ++r;
        right_min = std::min(right_min, s[r]);
    }
    return s[i] - std::max(left_min, right_min);
}

std::vector<std::size_t> lcs_match(const std::vector<Feature>& a, const std::vector<Feature>& b,
                                   std::vector<std::size_t>& b_idx)
{
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<int>> L(n + 1, std::vector<int>(m + 1, 0));
    for (std::size_t i = n; i-- > 0;)
        for (std::size_t j = m; j-- > 0;)
            L[i][j] = a[i].kind == b[j].kind ? L[i + 1][j + 1] + 1 : std::max(L[i + 1][j], L[i][j + 1]);
    std::vector<std::size_t> a_idx;
    std::size_t i = 0, j = 0;
    while (i < n && j < m) {
        if (a[i].kind == b[j].kind && L[i][j] == L[i + 1][j + 1] + 1) {
            a_idx.push_back(i++);
            b_idx.push_back(j++);
        } else if (L[i + 1][j] >= L[i][j + 1]) {
            ++i;
        } else {
            ++j;
        }
    }
    return a_idx;
}

}  // namespace

std::vector<Feature> detect_features(std::span<const double> x, std::span<const double> y, double min_prominence,
                                     int smoothing_passes)
{
    if (x.size() != y.size())
        throw std::invalid_argument("detect_features: size mismatch");
    std::vector<Feature> out;
    if (y.size() < 3)
        return out;
    const auto s = smooth(y, smoothing_passes);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const double range = *hi - *lo;
    if (!(range > 0.0))
        return out;
    std::vector<double> neg(s.size());
    std::transform(s.begin(), s.end(), neg.begin(), [](double v) { return -v; });

    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        for (auto kind : {Feature::Kind::Maximum, Feature::Kind::Minimum}) {
            const auto& v = kind == Feature::Kind::Maximum ? s : neg;
            if (!(v[i] > v[i - 1] && v[i] >= v[i + 1]))
                continue;
            const double prom = prominence_of_max(v, i);
            if (prom < min_prominence * range)
                continue;
            const double denom = v[i - 1] - 2.0 * v[i] + v[i + 1];
            double offset = denom != 0.0 ? 0.5 * (v[i - 1] - v[i + 1]) / denom : 0.0;
            offset = std::clamp(offset, -0.5, 0.5);
            const double dx = 0.5 * (x[i + 1] - x[i - 1]);
            out.push_back({kind, x[i] + offset * dx, prom});
        }
    }
    std::sort(out.begin(), out.end(), [](const Feature& a, const Feature& b) { return a.position < b.position; });
    return out;
}

CalibrationMap calibrate_time_to_wavelength(std::span<const double> time_centers_ps, std::span<const double> counts,
                                            std::span<const double> reference_wavelength_nm,
                                            std::span<const double> reference_transmission,
                                            const CalibrationOptions& opt)
{
    if (!std::is_sorted(time_centers_ps.begin(), time_centers_ps.end())
        || !std::is_sorted(reference_wavelength_nm.begin(), reference_wavelength_nm.end()))
        throw CalibrationError("calibration inputs must be sorted by time and wavelength");
    const auto ft = detect_features(time_centers_ps, counts, opt.min_prominence, opt.smoothing_passes);
    const auto fl =
        detect_features(reference_wavelength_nm, reference_transmission, opt.min_prominence, opt.smoothing_passes);
    std::vector<std::size_t> l_idx;
    const auto t_idx = lcs_match(ft, fl, l_idx);
    if (t_idx.size() < 2)
        throw CalibrationError("calibration needs at least 2 matched features, found "
                               + std::to_string(t_idx.size()) + " (histogram " + std::to_string(ft.size())
                               + ", reference " + std::to_string(fl.size()) + ")");

    const std::size_t n = t_idx.size();
    std::vector<std::pair<double, double>> anchors;
    for (std::size_t i = 0; i < n; ++i)
        anchors.emplace_back(ft[t_idx[i]].position, fl[l_idx[i]].position);

    double t_center = 0.0;
    for (const auto& a : anchors)
        t_center += a.first;
    t_center /= static_cast<double>(n);
    double t_scale = 0.5 * (anchors.back().first - anchors.front().first);
    if (!(t_scale > 0.0))
        throw CalibrationError("matched features share one arrival time");

    const int degree = static_cast<int>(std::min<std::size_t>(3, n - 1));
    Eigen::MatrixXd V(static_cast<Eigen::Index>(n), degree + 1);
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const double u = (anchors[i].first - t_center) / t_scale;
        double pw = 1.0;
        for (int k = 0; k <= degree; ++k, pw *= u)
            V(static_cast<Eigen::Index>(i), k) = pw;
        rhs[static_cast<Eigen::Index>(i)] = anchors[i].second;
    }
    const Eigen::VectorXd c = V.colPivHouseholderQr().solve(rhs);
    std::vector<double> coeffs(c.data(), c.data() + c.size());
    auto map = CalibrationMap::from_polynomial(coeffs, t_center, t_scale, time_centers_ps.front(),
                                               time_centers_ps.back());
    map.anchors = anchors;
    map.residual_nm = std::sqrt((V * c - rhs).squaredNorm() / static_cast<double>(n));

    // Strict monotonicity over the histogram span.
    constexpr int kSteps = 2000;
    int sign = 0;
    for (int i = 0; i < kSteps; ++i) {
        const double t0 = map.time_lo_ps + (map.time_hi_ps - map.time_lo_ps) * i / kSteps;
        const double t1 = map.time_lo_ps + (map.time_hi_ps - map.time_lo_ps) * (i + 1) / kSteps;
        const double d = map.wavelength_at(t1) - map.wavelength_at(t0);
        const int sg = d > 0.0 ? 1 : (d < 0.0 ? -1 : 0);
        if (sg == 0 || (sign != 0 && sg != sign))
            throw CalibrationError("calibration fit is not monotone near t = " + std::to_string(t0)
                                   + " ps; residual " + std::to_string(map.residual_nm) + " nm");
        sign = sg;
    }
    return map;
}

// ----------------------------------------------------------- reconstruction

bool row_is_significant(const RowPeak& r, double k_sigma)
{
    const double b = std::max(r.n_acc, 1.0);
    return static_cast<double>(r.n_cc) > b + k_sigma * std::sqrt(b);
}

std::vector<ReconstructedTarget> reconstruct_targets(const Histogram2D& jti, const FoldedEvents& folded,
                                                     const CalibrationMap& herald_map, const GratingSpec& grating,
                                                     const DispersionModel& dispersion, const PumpSpec& pump,
                                                     const ReconstructOptions& opt)
{
    struct Scored {
        RowPeak row;
        double direction = 0.0;
        double distance = 0.0;
        double probe_nm = 0.0;
        double weight = 0.0;
    };
    std::vector<Scored> sig;
    for (const auto& r : find_row_peaks(jti, folded, opt.rows)) {
        if (!row_is_significant(r, opt.threshold_sigma))
            continue;
        try {
            const double herald_nm = herald_map.wavelength_at(r.mean_herald_ps);
            const double probe_thz = 2.0 * pump.center_frequency_thz - wavelength_to_frequency(herald_nm);
            const double probe_nm = frequency_to_wavelength(probe_thz);
            const double expected = dispersion.shift_ps(probe_nm);
            Scored s;
            s.row = r;
            s.probe_nm = probe_nm;
            s.direction = opt.loopback ? 0.0 : diffraction_angle(probe_nm, grating);
            s.distance = 0.5 * kSpeedOfLightMPerPs * (r.probe_peak_ps - expected);
            s.weight = std::max(static_cast<double>(r.n_cc) - r.n_acc, 1.0);
            sig.push_back(s);
        } catch (const DomainError&) {
        }
    }

    std::vector<ReconstructedTarget> out;
    const double half_w = 0.5 * opt.rows.window_ps;
    for (std::size_t i = 0; i < sig.size();) {
        // Rows join while they are adjacent (up to max_gap_rows missing) and
        // their ranges agree, so neighbouring targets at different
        // distances stay apart.
        std::size_t j = i + 1;
        while (j < sig.size() && sig[j].row.herald_bin <= sig[j - 1].row.herald_bin + 1 + opt.max_gap_rows) {
            const double slope = dispersion.slope_ps_per_nm(sig[j].probe_nm) * 1e-3;
            const double dd = distance_resolution(opt.coincidence_fwhm_ps, slope, opt.pump_bandwidth_nm) * 1e-2;
            if (std::abs(sig[j].distance - sig[j - 1].distance) > opt.max_range_step * dd)
                break;
            ++j;
        }
        if (j - i < opt.min_rows) {
            i = j;
            continue;
        }
        ReconstructedTarget t;
        double wsum = 0.0, dir = 0.0, dist = 0.0, lam = 0.0;
        for (std::size_t k = i; k < j; ++k) {
            const auto& s = sig[k];
            wsum += s.weight;
            dir += s.weight * s.direction;
            dist += s.weight * s.distance;
            lam += s.weight * s.probe_nm;
            if (s.row.n_cc > t.peak_count) {
                t.peak_count = s.row.n_cc;
                t.herald_bin = s.row.herald_bin;
            }
            const double h_lo = jti.origin_ps + static_cast<double>(s.row.herald_bin) * jti.bin_width_ps;
            t.window.rows.push_back(
                {h_lo, h_lo + jti.bin_width_ps, s.row.probe_peak_ps - half_w, s.row.probe_peak_ps + half_w});
        }
        t.direction_deg = dir / wsum;
        t.distance_m = dist / wsum;
        t.n_rows = j - i;
        const double slope = dispersion.slope_ps_per_nm(lam / wsum) * 1e-3;
        t.delta_distance_m = distance_resolution(opt.coincidence_fwhm_ps, slope, opt.pump_bandwidth_nm) * 1e-2;
        t.delta_direction_deg =
            opt.loopback ? 0.0 : direction_resolution(opt.herald_jitter_fwhm_ps, slope, lam / wsum, grating);
        t.window.label = "target" + std::to_string(out.size());
        out.push_back(std::move(t));
        i = j;
    }
    return out;
}

// --------------------------------------------------------------- resolution

double distance_resolution(double coincidence_fwhm_ps, double slope_ns_per_nm, double pump_bandwidth_nm)
{
    const double spread = slope_ns_per_nm * 1e3 * pump_bandwidth_nm;
    return 0.5 * kSpeedOfLightMPerPs * std::hypot(coincidence_fwhm_ps, spread) * 100.0;
}

double direction_resolution(double herald_jitter_fwhm_ps, double slope_ns_per_nm, double wavelength_nm,
                            const GratingSpec& grating)
{
    const double dl_timing = herald_jitter_fwhm_ps / (slope_ns_per_nm * 1e3);
    const double dl_grating = wavelength_nm / resolving_power(grating);
    return std::hypot(dl_timing, dl_grating) * angular_dispersion(wavelength_nm, grating);
}

// --------------------------------------------------------------- randomness

RandomnessReport randomness_report(std::span<const double> times, double origin_ps, double bin_width_ps,
                                   std::span<const double> model)
{
    if (times.size() < 1000)
        throw AnalysisError("randomness report needs at least 1000 events, got " + std::to_string(times.size()));
    if (model.empty())
        throw std::invalid_argument("randomness model is empty");
    const double mass = std::accumulate(model.begin(), model.end(), 0.0);
    if (!(mass > 0.0))
        throw std::invalid_argument("randomness model has no mass");

    const std::size_t nb = model.size();
    std::vector<double> obs(nb, 0.0);
    for (double t : times) {
        auto i = static_cast<std::ptrdiff_t>(std::floor((t - origin_ps) / bin_width_ps));
        i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(nb) - 1);
        obs[static_cast<std::size_t>(i)] += 1.0;
    }
    const double n = static_cast<double>(times.size());

    RandomnessReport rep;
    rep.n = times.size();
    std::vector<std::pair<double, double>> groups;  // (observed, expected)
    double o = 0.0, e = 0.0;
    for (std::size_t i = 0; i < nb; ++i) {
        o += obs[i];
        e += n * model[i] / mass;
        if (e >= 5.0) {
            groups.emplace_back(o, e);
            o = e = 0.0;
        }
    }
    if (o > 0.0 || e > 0.0) {
        if (groups.empty())
            groups.emplace_back(o, e);
        else {
            groups.back().first += o;
            groups.back().second += e;
        }
    }
    for (const auto& [go, ge] : groups)
        rep.chi2 += ge > 0.0 ? (go - ge) * (go - ge) / ge : (go > 0.0 ? INFINITY : 0.0);
    rep.dof = static_cast<int>(groups.size()) - 1;
    rep.p_value = rep.dof > 0 && std::isfinite(rep.chi2) ? boost::math::gamma_q(0.5 * rep.dof, 0.5 * rep.chi2)
                                                         : (std::isfinite(rep.chi2) ? 1.0 : 0.0);

    const double mean = std::accumulate(times.begin(), times.end(), 0.0) / n;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < times.size(); ++i) {
        const double d = times[i] - mean;
        den += d * d;
        if (i + 1 < times.size())
            num += d * (times[i + 1] - mean);
    }
    rep.lag1_correlation = den > 0.0 ? num / den : 1.0;
    rep.lag1_standard_error = 1.0 / std::sqrt(n);
    rep.min_entropy_bits = std::max(0.0, -std::log2(*std::max_element(obs.begin(), obs.end()) / n));
    return rep;
}

std::vector<double> herald_time_model(const EmissionModel& model, const DispersionModel& dispersion,
                                      double jitter_sigma_ps, double origin_ps, double bin_width_ps,
                                      std::size_t n_bins, double pair_weight, double single_weight,
                                      double dark_weight)
{
    constexpr int kHeraldGrid = 4000;
    constexpr int kProbeGrid = 600;
    const auto& hb = model.herald_band();
    const auto& pb = model.probe_band();
    std::vector<double> pair_mass(kHeraldGrid), times(kHeraldGrid);
    const double dfh = (hb.max_thz() - hb.min_thz()) / kHeraldGrid;
    const double dfp = (pb.max_thz() - pb.min_thz()) / kProbeGrid;
    double pair_total = 0.0;
    for (int i = 0; i < kHeraldGrid; ++i) {
        const double fh = hb.min_thz() + (i + 0.5) * dfh;
        double m = 0.0;
        for (int j = 0; j < kProbeGrid; ++j)
            m += jsi_weight(fh, pb.min_thz() + (j + 0.5) * dfp, model.pump(), model.phase_match());
        pair_mass[i] = m;
        pair_total += m;
        times[i] = dispersion.shift_ps(frequency_to_wavelength(fh));
    }

    std::vector<double> out(n_bins, 0.0);
    const double sigma = std::max(jitter_sigma_ps, 1e-6);
    auto deposit = [&](double t, double mass) {
        const auto lo = static_cast<std::ptrdiff_t>(std::floor((t - 8.0 * sigma - origin_ps) / bin_width_ps));
        const auto hi = static_cast<std::ptrdiff_t>(std::floor((t + 8.0 * sigma - origin_ps) / bin_width_ps));
        for (auto b = std::max<std::ptrdiff_t>(lo, 0); b <= std::min<std::ptrdiff_t>(hi, n_bins - 1); ++b) {
            const double a = origin_ps + static_cast<double>(b) * bin_width_ps;
            const double p = 0.5 * (std::erfc((a - t) / (sigma * std::sqrt(2.0)))
                                    - std::erfc((a + bin_width_ps - t) / (sigma * std::sqrt(2.0))));
            out[static_cast<std::size_t>(b)] += mass * p;
        }
    };
    for (int i = 0; i < kHeraldGrid; ++i) {
        if (pair_total > 0.0)
            deposit(times[i], pair_weight * pair_mass[i] / pair_total);
        deposit(times[i], single_weight / kHeraldGrid);
    }
    const double period = static_cast<double>(n_bins) * bin_width_ps;
    for (std::size_t b = 0; b < n_bins; ++b)
        out[b] += dark_weight * bin_width_ps / period;
    return out;
}

}  // namespace qep

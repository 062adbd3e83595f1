#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "qep/analysis.hpp"
#include "qep/random.hpp"

using namespace qep;
using doctest::Approx;

namespace {

constexpr double kPeriod = 51894.0;

TagStream make_stream(std::vector<TimeTag> tags)
{
    std::stable_sort(tags.begin(), tags.end(), [](const TimeTag& a, const TimeTag& b) {
        return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.channel < b.channel;
    });
    TagStream s;
    s.tags = std::move(tags);
    s.period_ps = static_cast<std::uint64_t>(kPeriod);
    s.duration = s.tags.empty() ? 0 : s.tags.back().timestamp + 1;
    return s;
}

Picoseconds ref_time(std::uint64_t k)
{
    return 100000 + static_cast<Picoseconds>(std::llround(k * kPeriod));
}

// Pulsed source with perfect detectors: every pulse has a REF tag, pairs
// give a herald at h and a probe at -h + offset (anti-diagonal ridge).
TagStream pair_stream(std::uint64_t pulses, double nu_cc, std::uint64_t seed, double noise_per_pulse = 0.0,
                      double spread_ps = 6000.0)
{
    std::vector<TimeTag> tags;
    CounterRng rng(seed, 0, Substream::Standalone);
    for (std::uint64_t k = 0; k < pulses; ++k) {
        const auto r = ref_time(k);
        tags.push_back({Channel::Ref, r});
        for (auto n = rng.poisson(nu_cc); n > 0; --n) {
            const double h = spread_ps * (rng.uniform() - 0.5);
            tags.push_back({Channel::Herald, r + std::llround(h)});
            tags.push_back({Channel::Probe, r + std::llround(-h + 2000.0)});
        }
        for (auto n = rng.poisson(noise_per_pulse); n > 0; --n)
            tags.push_back({Channel::Probe, r + std::llround((rng.uniform() - 0.5) * kPeriod * 0.999)});
    }
    return make_stream(std::move(tags));
}

}  // namespace

TEST_SUITE("analysis")
{
    TEST_CASE("folding")
    {
        const auto s = make_stream({{Channel::Ref, 1000},
                                    {Channel::Herald, 1000},
                                    {Channel::Probe, 1400},
                                    {Channel::Ref, 1000 + 51894},
                                    {Channel::Probe, 1000 + 51894 - 300}});
        const auto f = fold_to_pulse_frame(s, kPeriod);
        REQUIRE(f.heralds.size() == 1);
        REQUIRE(f.probes.size() == 2);
        CHECK(f.heralds[0].relative == 0);
        CHECK(f.probes[0].relative == 400);
        CHECK(f.probes[1].pulse == 1);
        CHECK(f.probes[1].relative == -300);
        CHECK_THROWS_AS(fold_to_pulse_frame(make_stream({{Channel::Probe, 5}}), kPeriod), AnalysisError);
    }

    TEST_CASE("folded uniform noise is uniform over the period")
    {
        std::vector<TimeTag> tags;
        const std::uint64_t pulses = 20000;
        for (std::uint64_t k = 0; k < pulses; ++k)
            tags.push_back({Channel::Ref, ref_time(k)});
        CounterRng rng(4, 0, Substream::Standalone);
        const double span = static_cast<double>(ref_time(pulses - 1) - ref_time(0));
        for (int i = 0; i < 20000; ++i)
            tags.push_back({Channel::Probe, ref_time(0) + static_cast<Picoseconds>(rng.uniform() * span)});
        const auto f = fold_to_pulse_frame(make_stream(tags), kPeriod);
        std::vector<double> u;
        for (const auto& e : f.probes) {
            REQUIRE(e.relative >= -kPeriod / 2);
            REQUIRE(e.relative < kPeriod / 2);
            u.push_back((e.relative + kPeriod / 2) / kPeriod);
        }
        std::sort(u.begin(), u.end());
        const double n = static_cast<double>(u.size());
        double d = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i)
            d = std::max({d, std::abs(u[i] - i / n), std::abs(u[i] - (i + 1) / n)});
        CHECK(d < 1.63 / std::sqrt(n));
    }

    TEST_CASE("joint temporal histogram")
    {
        const auto one = make_stream({{Channel::Ref, 1000}, {Channel::Herald, 1200}, {Channel::Probe, 3000}});
        const auto h1 = build_jti(fold_to_pulse_frame(one, kPeriod));
        CHECK(h1.total() == 1);
        CHECK(std::count_if(h1.counts.begin(), h1.counts.end(), [](auto c) { return c > 0; }) == 1);

        // Single-pair pulses only, so no cross combinations leave the ridge.
        std::vector<TimeTag> tags;
        CounterRng rng(1, 0, Substream::Standalone);
        for (std::uint64_t k = 0; k < 20000; ++k) {
            const auto r = ref_time(k);
            tags.push_back({Channel::Ref, r});
            if (rng.bernoulli(0.05)) {
                const double hh = 6000.0 * (rng.uniform() - 0.5);
                tags.push_back({Channel::Herald, r + std::llround(hh)});
                tags.push_back({Channel::Probe, r + std::llround(-hh + 2000.0)});
            }
        }
        const auto f = fold_to_pulse_frame(make_stream(tags), kPeriod);
        const auto h = build_jti(f, 100.0);
        // Occupied cells lie on x + y = const (slope -1).
        std::uint64_t on_ridge = 0;
        for (std::size_t iy = 0; iy < h.ny; ++iy)
            for (std::size_t ix = 0; ix < h.nx; ++ix)
                if (h.at(ix, iy) > 0 && std::abs(h.bin_center(ix) + h.bin_center(iy) - 2000.0) <= 200.0)
                    on_ridge += h.at(ix, iy);
        CHECK(on_ridge == h.total());
    }

    TEST_CASE("accidental floor matches the product of rates")
    {
        const std::uint64_t pulses = 100000;
        const double nu = 0.05, noise = 0.2;
        const auto f = fold_to_pulse_frame(pair_stream(pulses, nu, 2, noise), kPeriod);
        // Coincidences between a herald and a noise probe inside a window
        // away from the ridge: pulses * nu * noise * (w / T).
        WindowSet w{"floor", {{-3000.0, 3000.0, -20000.0, -19000.0}}};
        const auto c = count_window(f, w, 5);
        const double expected = pulses * nu * noise * (1000.0 / (kPeriod * 0.999));
        CHECK(std::abs(c.n_cc - expected) < 3.0 * std::sqrt(expected));
        CHECK(std::abs(c.n_acc - expected) < 3.0 * std::sqrt(expected / 10.0) + 3.0 * std::sqrt(expected));
    }

    TEST_CASE("gaussian fit")
    {
        CounterRng rng(9, 0, Substream::Standalone);
        std::vector<double> x, y(100, 0.0);
        for (int i = 0; i < 100; ++i)
            x.push_back(-1000.0 + 20.0 * i + 10.0);
        const double sigma = 110.0 / kFwhmPerSigma;
        for (int i = 0; i < 100000; ++i) {
            const double v = 37.0 + sigma * rng.normal();
            const int b = static_cast<int>(std::floor((v + 1000.0) / 20.0));
            if (b >= 0 && b < 100)
                y[b] += 1.0;
        }
        for (auto& v : y)
            v += 3.0;
        const auto r = fit_gaussian_peak(x, y);
        CHECK(r.fwhm == Approx(110.0).epsilon(0.03));
        CHECK(r.mean == Approx(37.0).epsilon(0.05));
        CHECK(r.baseline == Approx(3.0).epsilon(0.5));

        std::vector<double> zeros(100, 0.0), flat(100, 4.0);
        CHECK_THROWS_AS(fit_gaussian_peak(x, zeros), NoPeakError);
        CHECK_THROWS_AS(fit_gaussian_peak(x, flat), NoPeakError);
    }

    TEST_CASE("CAR of ideal pairs")
    {
        const double nu = 0.01;
        // All pairs in one 100 ps cell, as for a single spectral mode.
        const auto f = fold_to_pulse_frame(pair_stream(400000, nu, 3, 0.0, 0.0), kPeriod);
        WindowSet w{"all", {{-50.0, 50.0, 1950.0, 2050.0}}};
        const auto c = count_window(f, w, 5);
        const auto car = car_from_counts(c.n_cc, c.n_acc, 5);
        const double sigma = car.car * std::sqrt(1.0 / c.n_cc + 1.0 / (10.0 * c.n_acc));
        CHECK(std::abs(car.car - (1.0 / nu + 1.0)) < 3.0 * sigma);
    }

    TEST_CASE("pure accidentals give CAR near one")
    {
        std::vector<TimeTag> tags;
        CounterRng rng(5, 0, Substream::Standalone);
        for (std::uint64_t k = 0; k < 100000; ++k) {
            const auto r = ref_time(k);
            tags.push_back({Channel::Ref, r});
            if (rng.bernoulli(0.3))
                tags.push_back({Channel::Herald, r + std::llround(rng.normal() * 200.0)});
            if (rng.bernoulli(0.3))
                tags.push_back({Channel::Probe, r + std::llround(rng.normal() * 200.0)});
        }
        const auto f = fold_to_pulse_frame(make_stream(tags), kPeriod);
        WindowSet w{"c", {{-200.0, 200.0, -200.0, 200.0}}};
        const auto c = count_window(f, w, 5);
        const auto car = car_from_counts(c.n_cc, c.n_acc, 5);
        CHECK(std::abs(car.car - 1.0) < 3.0 * std::sqrt(1.0 / c.n_cc + 1.0 / (10.0 * c.n_acc)));
    }

    TEST_CASE("CAR sentinel")
    {
        const auto c = car_from_counts(12, 0.0, 5);
        CHECK(c.lower_bound);
        CHECK(c.car == Approx(12 * 10.0));
        CHECK_FALSE(car_from_counts(12, 2.0, 5).lower_bound);
    }

    TEST_CASE("window bookkeeping conserves probe counts")
    {
        const auto f = fold_to_pulse_frame(pair_stream(20000, 0.05, 6, 0.1), kPeriod);
        std::vector<WindowSet> windows;
        for (double x = -kPeriod / 2; x < kPeriod / 2; x += 100.0)
            windows.push_back({"w", {{-kPeriod, kPeriod, x, std::min(x + 100.0, kPeriod / 2)}}});
        const auto counts = count_windows(f, windows, 5);
        std::uint64_t total = 0;
        for (const auto& c : counts)
            total += c.n_sc;
        CHECK(total == f.probes.size());
    }

    TEST_CASE("snr and noise intensity")
    {
        CHECK(snr_from_counts(200.0, 100.0)->value == Approx(1.0));
        CHECK(snr_from_counts(100.0, 100.0)->value == 0.0);
        CHECK_FALSE(snr_from_counts(100.0, 0.0).has_value());
        CHECK(snr_enhancement({5.0, 0.1}, {5.0, 0.1})->value == Approx(1.0));
        CHECK_FALSE(snr_enhancement({5.0, 0.1}, {0.0, 0.1}).has_value());
        CHECK(*noise_intensity_db(50.0, 50.0) == Approx(0.0));
        CHECK(*noise_intensity_db(1.0, 1000.0) == Approx(30.0));
        CHECK_FALSE(noise_intensity_db(0.0, 5.0).has_value());
    }

    TEST_CASE("resolution formulas")
    {
        CHECK(distance_resolution(110.1, 0.4, 0.25) == Approx(2.2).epsilon(0.1 / 2.2));
        CHECK(distance_resolution(110.1, 0.4, 0.25) ==
              Approx(0.5 * kSpeedOfLightMPerPs * std::hypot(110.1, 100.0) * 100.0).epsilon(1e-12));
        CHECK(distance_resolution(110.1, 0.4, 0.0) == Approx(0.5 * kSpeedOfLightMPerPs * 110.1 * 100.0));

        GratingSpec g;
        CHECK(direction_resolution(89.90, 0.4, 1551.0, g) == Approx(0.144).epsilon(0.005 / 0.144));
        GratingSpec wide = g;
        wide.beam_waist_mm = 1e9;
        CHECK(direction_resolution(89.90, 0.4, 1551.0, wide) == Approx(0.0432).epsilon(0.01));
        CHECK(direction_resolution(0.0, 0.4, 1551.0, g) == Approx(0.138).epsilon(0.01));
    }

    TEST_CASE("calibration recovers a linear map")
    {
        DispersionModel d;  // 0.4 ns/nm about 1540.56
        auto transmission = [](double nm) {
            return 1.0 - 0.6 * std::exp(-0.5 * std::pow((nm - 1526.3) / 0.6, 2)) -
                   0.4 * std::exp(-0.5 * std::pow((nm - 1533.1) / 0.8, 2));
        };
        std::vector<double> lam, tr, t, counts;
        for (double nm = 1522.0; nm <= 1538.0; nm += 0.02) {
            lam.push_back(nm);
            tr.push_back(transmission(nm));
        }
        for (double ps = d.shift_ps(1522.5); ps <= d.shift_ps(1537.5); ps += 20.0) {
            t.push_back(ps);
            counts.push_back(1000.0 * transmission(d.wavelength_at_shift(ps)));
        }
        const auto map = calibrate_time_to_wavelength(t, counts, lam, tr);
        CHECK_FALSE(map.is_fallback());
        double worst = 0.0;
        for (double ps = d.shift_ps(1524.0); ps <= d.shift_ps(1536.0); ps += 50.0)
            worst = std::max(worst, std::abs(map.wavelength_at(ps) - d.wavelength_at_shift(ps)));
        CHECK(worst < 0.01);
        const double slope_ps_per_nm = 1000.0 / (map.wavelength_at(-2000.0) - map.wavelength_at(-3000.0));
        CHECK(slope_ps_per_nm == Approx(400.0).epsilon(0.005));

        std::vector<double> flat(counts.size(), 100.0), flat_tr(tr.size(), 1.0);
        CHECK_THROWS_AS(calibrate_time_to_wavelength(t, flat, lam, flat_tr), CalibrationError);

        const auto fallback = CalibrationMap::from_dispersion(d);
        CHECK(fallback.is_fallback());
        CHECK(fallback.wavelength_at(400.0) == Approx(1541.56));
    }

    TEST_CASE("randomness report")
    {
        CounterRng rng(8, 0, Substream::Standalone);
        std::vector<double> times;
        for (int i = 0; i < 20000; ++i)
            times.push_back(-5000.0 + 10000.0 * rng.uniform());
        std::vector<double> model(100, 1.0);
        const auto r = randomness_report(times, -5000.0, 100.0, model);
        CHECK(r.p_value > 0.01);
        CHECK(std::abs(r.lag1_correlation) < 3.0 * r.lag1_standard_error);
        CHECK(r.min_entropy_bits > 6.0);

        std::vector<double> same(5000, 120.0);
        const auto d = randomness_report(same, -5000.0, 100.0, model);
        CHECK(d.min_entropy_bits == Approx(0.0));
        CHECK(d.p_value < 1e-6);

        std::vector<double> few(10, 0.0);
        CHECK_THROWS_AS(randomness_report(few, -5000.0, 100.0, model), AnalysisError);
    }
}

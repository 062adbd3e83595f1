#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "qep/channel.hpp"
#include "qep/detect.hpp"
#include "qep/model.hpp"
#include "qep/random.hpp"
#include "qep/source.hpp"

using namespace qep;
using doctest::Approx;

namespace {

// c / lambda computed from first principles, independent of the library.
double oracle_thz(double nm)
{
    return 299792458.0 / (nm * 1e-9) * 1e-12;
}

PumpSpec baseline_pump()
{
    PumpSpec p;
    p.center_frequency_thz = oracle_thz(1540.56);
    return p;
}

std::filesystem::path temp_file(const std::string& name)
{
    return std::filesystem::temp_directory_path() / ("qep_test_" + name);
}

}  // namespace

TEST_SUITE("model")
{
    TEST_CASE("wavelength and frequency conversions")
    {
        CHECK(wavelength_to_frequency(1540.56) == Approx(194.60).epsilon(0.01 / 194.6));
        CHECK(wavelength_to_frequency(1551.0) == Approx(oracle_thz(1551.0)).epsilon(1e-12));
        CHECK(wavelength_to_frequency(1551.0) == Approx(193.290).epsilon(5e-4 / 193.29));
        for (double nm : {400.0, 1530.0, 1551.0, 2000.0}) {
            const double back = frequency_to_wavelength(wavelength_to_frequency(nm));
            CHECK(std::abs(back - nm) / nm < 1e-9);
        }
        const auto s = SpectralPoint::from_wavelength(1530.0);
        CHECK(s.frequency_thz() == Approx(oracle_thz(1530.0)));
    }

    TEST_CASE("bandwidth conversions")
    {
        CHECK(bandwidth_wavelength_to_frequency(0.25, 1540.56) == Approx(31.6).epsilon(0.1 / 31.6));
        CHECK(bandwidth_wavelength_to_frequency(0.0, 1551.0) == 0.0);
        CHECK(bandwidth_wavelength_to_frequency(13.0, 1551.0) == Approx(1620.0).epsilon(5.0 / 1620.0));
        CHECK(bandwidth_frequency_to_wavelength(bandwidth_wavelength_to_frequency(0.7, 1551.0), 1551.0) ==
              Approx(0.7).epsilon(1e-12));
    }

    TEST_CASE("invalid inputs")
    {
        CHECK_THROWS_AS(wavelength_to_frequency(0.0), DomainError);
        CHECK_THROWS_AS(frequency_to_wavelength(-1.0), DomainError);
    }
}

TEST_SUITE("random")
{
    TEST_CASE("philox known-answer vectors")
    {
        auto a = philox4x32_10({0, 0, 0, 0}, {0, 0});
        CHECK(a == PhiloxCounter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
        auto b = philox4x32_10({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff});
        CHECK(b == PhiloxCounter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
        auto c = philox4x32_10({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0});
        CHECK(c == PhiloxCounter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
    }

    TEST_CASE("streams are pure functions of (seed, index, substream)")
    {
        CounterRng a(42, 7, Substream::Emission), b(42, 7, Substream::Emission), c(42, 7, Substream::Noise),
            d(42, 8, Substream::Emission);
        bool differs_c = false, differs_d = false;
        for (int i = 0; i < 100; ++i) {
            const auto x = a.next_u64();
            CHECK(x == b.next_u64());
            differs_c |= x != c.next_u64();
            differs_d |= x != d.next_u64();
        }
        CHECK(differs_c);
        CHECK(differs_d);
    }

    TEST_CASE("distribution moments")
    {
        CounterRng r(1, 0, Substream::Standalone);
        const int n = 200000;
        double su = 0, sn = 0, sn2 = 0, se = 0;
        for (int i = 0; i < n; ++i) {
            const double u = r.uniform();
            REQUIRE(u > 0.0);
            REQUIRE(u < 1.0);
            su += u;
            const double z = r.normal();
            sn += z;
            sn2 += z * z;
            se += r.exponential();
        }
        CHECK(su / n == Approx(0.5).epsilon(0.01));
        CHECK(std::abs(sn / n) < 5.0 / std::sqrt(n));
        CHECK(sn2 / n == Approx(1.0).epsilon(0.02));
        CHECK(se / n == Approx(1.0).epsilon(0.02));

        for (double mean : {0.01, 3.0, 50.0}) {
            double s = 0, s2 = 0;
            const int m = 50000;
            for (int i = 0; i < m; ++i) {
                const double k = static_cast<double>(r.poisson(mean));
                s += k;
                s2 += k * k;
            }
            const double mu = s / m;
            CHECK(std::abs(mu - mean) < 5.0 * std::sqrt(mean / m));
            CHECK((s2 / m - mu * mu) == Approx(mean).epsilon(0.1));
        }
        CHECK(r.poisson(0.0) == 0);
    }
}

TEST_SUITE("source")
{
    TEST_CASE("pulse clock")
    {
        PumpSpec p;
        CHECK(pulse_time(0, p) == 0);
        // Exact rational: 1e6 * 1e12 / 19.27e6 rounded half up.
        const __int128 num = static_cast<__int128>(1'000'000) * 1'000'000'000'000LL;
        const auto expected = static_cast<Picoseconds>((num + p.repetition_rate_hz / 2) / p.repetition_rate_hz);
        CHECK(pulse_time(1'000'000, p) == expected);
        CHECK(pulse_time(1'000'000, p) == 51'894'135'963);
        const auto lo = static_cast<Picoseconds>(std::floor(p.period_ps()));
        for (std::uint64_t i = 0; i < 5000; ++i) {
            const auto d = pulse_time(i + 1, p) - pulse_time(i, p);
            CHECK((d == lo || d == lo + 1));
        }
        CHECK(nearest_pulse(pulse_time(12345, p) + 100, p) == 12345);
        CHECK(nearest_pulse(pulse_time(12345, p) - 100, p) == 12345);
    }

    TEST_CASE("jsi weight")
    {
        const auto pump = baseline_pump();
        PhaseMatchModel flat;
        const double fp = pump.center_frequency_thz;
        CHECK(jsi_weight(fp - 1.0, fp + 1.0, pump, flat) == Approx(1.0));
        const double x = pump.spectral_fwhm_ghz * 1e-3 / (2.0 * std::sqrt(2.0));
        CHECK(jsi_weight(fp - 1.0, fp + 1.0 - x, pump, flat) == Approx(0.5).epsilon(1e-9));

        PhaseMatchModel pm;
        pm.length_m = 0.01;
        // kappa(1 THz) * l = 2 pi
        pm.kappa_coefficients = {0.0, 0.0, 2.0 * M_PI / pm.length_m};
        CHECK(jsi_weight(fp - 1.0, fp + 1.0, pump, pm) == Approx(0.0).epsilon(1e-20));
        CHECK(pm.efficiency(0.0) == Approx(1.0));
    }

    TEST_CASE("zero rates give empty pulses")
    {
        EmissionModel m(baseline_pump(), {}, {}, {1530.0, 13.0}, {1551.0, 13.0});
        for (std::uint64_t i = 0; i < 1000; ++i)
            CHECK(sample_pulse_emissions(i, 9, m).empty());
    }

    TEST_CASE("pair count is Poisson and pairs stay in band")
    {
        const SpectralBand hb{1530.0, 13.0}, pb{1551.0, 13.0};
        EmissionModel m(baseline_pump(), {}, {0.01, 0.0, 0.0}, hb, pb);
        PulseEmissions e;
        std::uint64_t pairs = 0;
        const std::uint64_t n = 1'000'000;
        for (std::uint64_t i = 0; i < n; ++i) {
            sample_pulse_emissions(i, 3, m, e);
            pairs += e.pairs.size();
            for (const auto& p : e.pairs) {
                REQUIRE(hb.contains_frequency(p.herald_frequency_thz));
                REQUIRE(pb.contains_frequency(p.probe_frequency_thz));
            }
        }
        CHECK(std::abs(static_cast<double>(pairs) - 1e4) <= 3.0 * std::sqrt(1e4));
    }

    TEST_CASE("same pulse, same seed reproduces")
    {
        EmissionModel m(baseline_pump(), {}, {0.5, 0.2, 0.2}, {1530.0, 13.0}, {1551.0, 13.0});
        const auto a = sample_pulse_emissions(77, 5, m);
        const auto b = sample_pulse_emissions(77, 5, m);
        REQUIRE(a.pairs.size() == b.pairs.size());
        for (std::size_t i = 0; i < a.pairs.size(); ++i)
            CHECK(a.pairs[i].probe_frequency_thz == b.pairs[i].probe_frequency_thz);
    }
}

TEST_SUITE("channel")
{
    TEST_CASE("dispersion mapping")
    {
        DispersionModel d;
        const double fp = oracle_thz(1540.56);
        CHECK(dispersed_arrival(fp, 1000.0, d) == Approx(1000.0).epsilon(1e-12));
        CHECK(dispersed_arrival(oracle_thz(1541.56), 0.0, d) == Approx(400.0).epsilon(1e-9));
        CHECK(std::abs(dispersed_arrival(oracle_thz(1530.0), 0.0, d) - (-4224.0)) <= 1.0);
        CHECK(d.wavelength_at_shift(d.shift_ps(1555.5)) == Approx(1555.5));

        DispersionModel poly;
        poly.mode = DispersionModel::Mode::Polynomial;
        poly.polynomial_ps = {0.0, 400.0, 1.0};
        CHECK(poly.shift_ps(1541.56) == Approx(401.0));
        CHECK(poly.wavelength_at_shift(poly.shift_ps(1520.0)) == Approx(1520.0).epsilon(1e-9));
        poly.polynomial_ps = {0.0, 10.0, -5.0};
        CHECK_THROWS_AS(poly.check_monotone(1520.0, 1560.0), DomainError);
    }

    TEST_CASE("grating")
    {
        GratingSpec g;
        CHECK(std::abs(diffraction_angle(1551.0, g) - 79.68) <= 0.05);
        CHECK(angular_dispersion(1551.0, g) == Approx(0.192).epsilon(0.001 / 0.192));
        {
            // 1 / (alpha cos theta_m), evaluated here from the grating equation.
            const double alpha = 1e6 / 600.0;
            const double s = -1530.0 / alpha - std::sin(3.05 * M_PI / 180.0);
            const double expected = 180.0 / M_PI / (alpha * std::sqrt(1.0 - s * s));
            CHECK(angular_dispersion(1530.0, g) == Approx(expected).epsilon(1e-9));
            CHECK(std::abs(angular_dispersion(1530.0, g) - 0.1443) <= 0.001);
        }

        const double h = 0.01;
        const double fd = (diffraction_angle(1551.0 + h, g) - diffraction_angle(1551.0 - h, g)) / (2 * h);
        CHECK(std::abs(fd) == Approx(angular_dispersion(1551.0, g)).epsilon(1e-4));

        // m lambda / alpha = sin(theta_i) puts the diffracted beam on the normal.
        const double lambda0 = -g.period_nm() * std::sin(g.incidence_angle_deg * M_PI / 180.0);
        GratingSpec pos = g;
        pos.diffraction_order = 1;
        CHECK(diffraction_angle(-lambda0, pos) == Approx(0.0).epsilon(1e-9));

        CHECK_THROWS_AS(diffraction_angle(1800.0, g), DomainError);
        CHECK(resolving_power(g) == Approx(1.0 * 3.6e6 / g.period_nm()));
    }

    TEST_CASE("probe propagation")
    {
        GratingSpec g;
        DispersionModel d;
        ChannelSpec ch;
        Scene scene;
        const double angle = diffraction_angle(1551.0, g);
        scene.targets.push_back({"t", 1551.0, 0.1, 1.0, 1.0});
        ProbePath path{scene, g, d, ch};
        CounterRng rng(1, 0, Substream::ProbePath);

        const double f = oracle_thz(1551.0);
        const auto hit = propagate_probe(f, 0.0, path, rng);
        REQUIRE(hit);
        CHECK(std::abs(*hit - (dispersed_arrival(f, 0.0, d) + 2.0 / kSpeedOfLightMPerPs)) <= 1.0);
        CHECK(std::abs(2.0 / kSpeedOfLightMPerPs - 6671.0) <= 1.0);
        CHECK(find_target(angle, scene, g).has_value());

        CHECK_FALSE(propagate_probe(oracle_thz(1545.0), 0.0, path, rng));

        scene.targets[0].distance_m = 0.0;
        const auto zero = propagate_probe(f, 0.0, path, rng);
        REQUIRE(zero);
        CHECK(*zero == Approx(dispersed_arrival(f, 0.0, d)));
    }

    TEST_CASE("herald propagation survival")
    {
        DispersionModel d;
        ChannelSpec ch;
        const double f = oracle_thz(1530.0);
        CounterRng rng(2, 0, Substream::HeraldPath);
        ch.herald_efficiency = 1.0;
        for (int i = 0; i < 100; ++i)
            CHECK(propagate_herald(f, 0.0, d, ch, rng));
        ch.herald_efficiency = 0.0;
        for (int i = 0; i < 100; ++i)
            CHECK_FALSE(propagate_herald(f, 0.0, d, ch, rng));
        ch.herald_efficiency = 0.3;
        int n = 0;
        for (int i = 0; i < 100000; ++i)
            n += propagate_herald(f, 0.0, d, ch, rng).has_value();
        CHECK(std::abs(n - 30000) <= 3.0 * std::sqrt(2.1e4));
    }

    TEST_CASE("noise arrivals")
    {
        ChannelSpec ch;
        const SpectralBand pb{1551.0, 13.0};
        CHECK(sample_noise_arrivals(1.0, ch, pb, 1).empty());
        ch.noise_rate_hz = 1e6;
        const auto t = sample_noise_arrivals(1.0, ch, pb, 1);
        CHECK(std::abs(static_cast<double>(t.size()) - 1e6) <= 3000.0);
        CHECK(std::is_sorted(t.begin(), t.end()));

        // KS against the exponential inter-arrival law.
        std::vector<double> gaps;
        for (std::size_t i = 1; i < t.size(); ++i)
            gaps.push_back(t[i] - t[i - 1]);
        std::sort(gaps.begin(), gaps.end());
        const double mean = 1e12 / ch.noise_rate_hz;
        double dmax = 0.0;
        const double n = static_cast<double>(gaps.size());
        for (std::size_t i = 0; i < gaps.size(); ++i) {
            const double cdf = 1.0 - std::exp(-gaps[i] / mean);
            dmax = std::max({dmax, std::abs(cdf - i / n), std::abs(cdf - (i + 1) / n)});
        }
        CHECK(dmax < 1.63 / std::sqrt(n));
    }
}

TEST_SUITE("detect")
{
    TEST_CASE("ideal detector is the identity")
    {
        DetectorSpec ideal;
        const std::vector<double> in{10.2, 400.0, 999.7, 5000.49};
        const auto out = detect_channel(in, Channel::Probe, ideal, 10000, 1);
        REQUIRE(out.size() == in.size());
        for (std::size_t i = 0; i < in.size(); ++i) {
            CHECK(out[i].timestamp == static_cast<Picoseconds>(std::llround(in[i])));
            CHECK(out[i].channel == Channel::Probe);
        }
    }

    TEST_CASE("dark counts")
    {
        DetectorSpec d;
        d.dark_rate_hz = 1000.0;
        const auto out = detect_channel({}, Channel::Herald, d, 10'000'000'000'000LL, 5);
        CHECK(std::abs(static_cast<double>(out.size()) - 1e4) <= 300.0);
    }

    TEST_CASE("dead time")
    {
        std::vector<Picoseconds> t{0, 5, 10, 30, 31, 100};
        DetectDiagnostics diag;
        apply_dead_time(t, 20, diag);
        CHECK(t == std::vector<Picoseconds>{0, 30, 100});
        CHECK(diag.dropped_dead_time == 3);
    }

    TEST_CASE("negative jitter is clipped and counted")
    {
        DetectorSpec d;
        d.jitter_fwhm_ps = 1000.0;
        DetectDiagnostics diag;
        CounterRng rng(1, 0, Substream::Standalone);
        for (int i = 0; i < 1000; ++i) {
            const auto t = detect_arrival(0.0, d, rng, diag);
            REQUIRE(t);
            CHECK(*t >= 0);
        }
        CHECK(diag.clipped_negative > 300);
    }

    TEST_CASE("merge")
    {
        std::vector<std::vector<TimeTag>> one{{{Channel::Herald, 1}, {Channel::Herald, 5}}};
        CHECK(merge_streams(one, 10).tags == one[0]);

        std::vector<std::vector<TimeTag>> two{{{Channel::Herald, 1}, {Channel::Herald, 5}},
                                              {{Channel::Probe, 0}, {Channel::Probe, 5}, {Channel::Probe, 9}}};
        const auto m = merge_streams(two, 10);
        REQUIRE(m.tags.size() == 5);
        CHECK(std::is_sorted(m.tags.begin(), m.tags.end(),
                             [](const TimeTag& a, const TimeTag& b) { return a.timestamp < b.timestamp; }));
        CHECK(m.tags[2].channel == Channel::Herald);  // tie at 5: HERALD before PROBE

        std::vector<std::vector<TimeTag>> bad{{{Channel::Probe, 5}, {Channel::Probe, 1}}};
        CHECK_THROWS_AS(merge_streams(bad, 10), std::invalid_argument);
    }

    TEST_CASE("file round trip")
    {
        TagStream empty;
        empty.period_ps = 51894;
        const auto p0 = temp_file("empty.qtt");
        write_tags(empty, p0);
        CHECK(std::filesystem::file_size(p0) == kTagHeaderSize);
        const auto e2 = read_tags(p0);
        CHECK(e2.tags.empty());
        CHECK(e2.period_ps == 51894);

        TagStream s;
        s.period_ps = 51894;
        s.fingerprint[0] = 0xab;
        s.fingerprint[31] = 0x01;
        CounterRng rng(3, 0, Substream::Standalone);
        Picoseconds t = 0;
        for (int i = 0; i < 1'000'000; ++i) {
            t += static_cast<Picoseconds>(rng.exponential() * 1000.0);
            s.tags.push_back({static_cast<Channel>(rng.next_u64() % 3), t});
        }
        const auto p1 = temp_file("big.qtt");
        write_tags(s, p1);
        CHECK(std::filesystem::file_size(p1) == kTagHeaderSize + kTagRecordSize * s.tags.size());
        const auto r = read_tags(p1);
        CHECK(r.tags == s.tags);
        CHECK(r.fingerprint == s.fingerprint);
        CHECK(encode_tags(r) == encode_tags(s));
        CHECK(fingerprint_from_hex(to_hex(s.fingerprint)) == s.fingerprint);

        auto bytes = encode_tags(s);
        bytes[0] ^= 0xff;
        CHECK_THROWS_AS(decode_tags(bytes), FormatError);
        auto truncated = encode_tags(s);
        truncated.resize(truncated.size() - 3);
        CHECK_THROWS_AS(decode_tags(truncated), FormatError);
        CHECK_THROWS_AS(read_tags(temp_file("does_not_exist.qtt")), std::ios_base::failure);
        std::filesystem::remove(p0);
        std::filesystem::remove(p1);
    }
}

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "qep/pipeline.hpp"
#include "qep/scenario.hpp"

using namespace qep;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json baseline_doc()
{
    std::ifstream is(fs::path(QEP_SCENARIO_DIR) / "baseline.json");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_json_text(ss.str());
}

json small_doc(std::uint64_t pulses = 200000)
{
    auto d = baseline_doc();
    d["run"] = {{"pulses", pulses}};
    d["rates"]["pair_rate"] = 0.05;
    d["channels"]["noise_rate_hz"] = 2e5;
    return d;
}

std::vector<std::string> violations_of(const json& doc)
{
    try {
        parse_scenario(doc);
    } catch (const ValidationError& e) {
        return e.violations();
    }
    return {};
}

bool mentions(const std::vector<std::string>& v, const std::string& needle)
{
    return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

fs::path temp_dir(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("qep_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_SUITE("scenario")
{
    TEST_CASE("bundled scenarios load cleanly")
    {
        CHECK(violations_of(baseline_doc()).empty());
        const auto cfg = load_scenario(fs::path(QEP_SCENARIO_DIR) / "baseline.json");
        CHECK(cfg.scene.targets.size() == 5);
        CHECK(cfg.pump.repetition_rate_hz == 19'270'000);
        CHECK(cfg.configurations.size() == 4);
        CHECK_NOTHROW(load_scenario(fs::path(QEP_SCENARIO_DIR) / "loopback.json"));
    }

    TEST_CASE("violations are collected and name the field")
    {
        auto d = baseline_doc();
        d["channels"]["probe_efficiency"] = -0.2;
        d["detectors"]["herald"]["quantum_efficiency"] = 1.5;
        const auto v = violations_of(d);
        CHECK(v.size() >= 2);
        CHECK(mentions(v, "probe_efficiency"));
        CHECK(mentions(v, "quantum_efficiency"));
    }

    TEST_CASE("overlapping targets are rejected")
    {
        auto d = baseline_doc();
        d["scene"]["targets"][1]["center_wavelength_nm"] = 1546.3;
        CHECK(mentions(violations_of(d), "overlap"));
    }

    TEST_CASE("unknown keys are errors")
    {
        auto d = baseline_doc();
        d["channels"]["noise_rate"] = 5.0;
        CHECK(mentions(violations_of(d), "noise_rate"));
    }

    TEST_CASE("parse errors carry line and column")
    {
        try {
            parse_json_text("{\n  \"seed\": 1,\n  \"run\": {,}\n}");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 3);
            CHECK(e.column() > 0);
        }
    }

    TEST_CASE("canonical form round-trips and fingerprints are stable")
    {
        const auto a = parse_scenario(baseline_doc());
        const auto b = parse_scenario(a.to_json());
        CHECK(a.to_json() == b.to_json());
        CHECK(a.fingerprint() == b.fingerprint());
        auto d = baseline_doc();
        d["seed"] = 99;
        CHECK(parse_scenario(d).fingerprint() != a.fingerprint());
    }

    TEST_CASE("configuration labels")
    {
        const Configuration c{false, true};
        CHECK(c.label() == "probe:off|noise:on");
        CHECK(c.stem() == "probe-off_noise-on");
        CHECK(Configuration::parse(c.label()) == c);
        CHECK(Configuration::parse(c.stem()) == c);
    }

    TEST_CASE("json paths")
    {
        auto d = baseline_doc();
        set_json_path(d, "channels.noise_rate_hz", 123.0);
        CHECK(d["channels"]["noise_rate_hz"] == 123.0);
        CHECK_THROWS_AS(set_json_path(d, "channels.no_such_field", 1.0), ValidationError);
    }
}

TEST_SUITE("pipeline")
{
    TEST_CASE("zero duration gives empty streams with valid headers")
    {
        auto d = baseline_doc();
        d["run"] = {{"pulses", 0}};
        const auto cfg = parse_scenario(d);
        const auto r = simulate(cfg, 1);
        REQUIRE(r.streams.size() == 4);
        const auto dir = temp_dir("empty");
        const auto paths = write_streams(r, dir);
        for (const auto& p : paths) {
            CHECK(fs::file_size(p) == kTagHeaderSize);
            const auto s = read_tags(p);
            CHECK(s.tags.empty());
            CHECK(s.fingerprint == cfg.fingerprint());
        }
        fs::remove_all(dir);
    }

    TEST_CASE("output does not depend on thread count")
    {
        const auto cfg = parse_scenario(small_doc(150000));
        const auto a = simulate(cfg, 1);
        const auto b = simulate(cfg, 3);
        REQUIRE(a.streams.size() == b.streams.size());
        for (std::size_t i = 0; i < a.streams.size(); ++i)
            CHECK(encode_tags(a.streams[i].second) == encode_tags(b.streams[i].second));
    }

    TEST_CASE("paired configurations share noise and dark realizations")
    {
        auto d = small_doc();
        d["detectors"]["probe"]["dead_time_ps"] = 0;
        d["detectors"]["herald"]["dead_time_ps"] = 0;
        d["output"]["reference_tags"] = "all";
        const auto cfg = parse_scenario(d);
        const auto r = simulate(cfg, 1);
        auto probes = [&](const std::string& label) {
            std::vector<Picoseconds> v;
            for (const auto& [c, s] : r.streams)
                if (c.label() == label)
                    for (const auto& t : s.tags)
                        if (t.channel == Channel::Probe)
                            v.push_back(t.timestamp);
            return v;
        };
        const auto on = probes("probe:on|noise:on");
        const auto off = probes("probe:off|noise:on");
        CHECK(off.size() < on.size());
        CHECK(std::includes(on.begin(), on.end(), off.begin(), off.end()));
        const auto quiet = probes("probe:off|noise:off");
        CHECK(std::includes(off.begin(), off.end(), quiet.begin(), quiet.end()));
    }

    TEST_CASE("file analysis equals in-memory analysis")
    {
        const auto cfg = parse_scenario(small_doc(400000));
        const auto r = simulate(cfg, 2);
        const auto dir = temp_dir("roundtrip");
        write_streams(r, dir);
        const auto again = simulate(cfg, 2);
        const auto dir2 = temp_dir("roundtrip2");
        write_streams(again, dir2);
        for (const auto& [c, s] : r.streams) {
            std::ifstream a(dir / (c.stem() + ".qtt"), std::ios::binary), b(dir2 / (c.stem() + ".qtt"), std::ios::binary);
            std::stringstream sa, sb;
            sa << a.rdbuf();
            sb << b.rdbuf();
            CHECK(sa.str() == sb.str());
        }
        const auto from_file = analyze(cfg, read_streams(cfg, dir));
        const auto in_memory = analyze(cfg, r.streams);
        CHECK(from_file.to_json().dump() == in_memory.to_json().dump());
        fs::remove_all(dir);
        fs::remove_all(dir2);
    }

    TEST_CASE("fingerprint mismatch is refused")
    {
        const auto cfg = parse_scenario(small_doc(50000));
        const auto r = simulate(cfg, 1);
        auto d = small_doc(50000);
        d["seed"] = 12345;
        CHECK_THROWS_AS(analyze(parse_scenario(d), r.streams), ValidationError);
    }

    TEST_CASE("loopback places every target at zero range")
    {
        const auto cfg = load_scenario(fs::path(QEP_SCENARIO_DIR) / "loopback.json");
        const auto rep = analyze(cfg, simulate(cfg, 1).streams);
        REQUIRE_FALSE(rep.targets.empty());
        for (const auto& t : rep.targets)
            CHECK(std::abs(t.target.distance_m) * 100.0 <= rep.delta_distance_cm);
    }

    TEST_CASE("sweep presets parse and per-value patches must match the values")
    {
        for (const char* name : {"noise_sweep.json", "pump_power_sweep.json"}) {
            std::ifstream is(fs::path(QEP_SCENARIO_DIR) / name);
            std::stringstream ss;
            ss << is.rdbuf();
            const auto spec = SweepSpec::from_json(parse_json_text(ss.str()));
            CHECK_FALSE(spec.values.empty());
            CHECK((spec.per_value.empty() || spec.per_value.size() == spec.values.size()));
        }
        const json bad = {{"path", "rates.pair_rate"}, {"values", {0.01, 0.02}}, {"per_value", {json::object()}}};
        CHECK_THROWS_AS(SweepSpec::from_json(bad), ValidationError);
    }

    TEST_CASE("report carries modeled and measured coincidence widths")
    {
        const auto cfg = parse_scenario(small_doc(400000));
        const auto rep = analyze(cfg, simulate(cfg, 1).streams);
        CHECK(rep.coincidence_fwhm_model_ps == doctest::Approx(std::hypot(89.90, 66.43)));
        REQUIRE(rep.coincidence_fwhm_measured_ps);
        CHECK(*rep.coincidence_fwhm_measured_ps > rep.coincidence_fwhm_model_ps * 0.9);
    }

    TEST_CASE("empty sweep writes only the header")
    {
        SweepSpec spec;
        spec.path = "channels.noise_rate_hz";
        CHECK(sweep(small_doc(1000), spec, 1).empty());
        CHECK(sweep_csv_header().find("snr_c") != std::string::npos);
        spec.path = "channels.bogus";
        spec.values = {1.0};
        CHECK_THROWS_AS(sweep(small_doc(1000), spec, 1), ValidationError);
    }
}

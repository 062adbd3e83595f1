#include "qep/scenario.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <openssl/evp.h>

namespace qep {

using nlohmann::json;

namespace {

std::string join_violations(const std::vector<std::string>& v)
{
    std::string s = "scenario validation failed:";
    for (const auto& e : v)
        s += "\n  " + e;
    return s;
}

// Collects every type, range and unknown-key problem while reading.
class Reader {
  public:
    std::vector<std::string> errors;

    void fail(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }

    const json* object(const json& parent, const char* key, const std::string& path)
    {
        auto it = parent.find(key);
        if (it == parent.end())
            return nullptr;
        if (!it->is_object()) {
            fail(path, "must be an object");
            return nullptr;
        }
        return &*it;
    }

    void keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed)
    {
        for (auto it = obj.begin(); it != obj.end(); ++it)
            if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; }))
                fail(join(path, it.key()), "unknown key");
    }

    static std::string join(const std::string& path, const std::string& key)
    {
        return path.empty() ? key : path + "." + key;
    }

    bool number(const json& obj, const char* key, const std::string& path, double& out)
    {
        auto it = obj.find(key);
        if (it == obj.end())
            return false;
        if (!it->is_number()) {
            fail(join(path, key), "must be a number");
            return false;
        }
        out = it->get<double>();
        if (!std::isfinite(out)) {
            fail(join(path, key), "must be finite");
            return false;
        }
        return true;
    }

    bool integer(const json& obj, const char* key, const std::string& path, std::int64_t& out)
    {
        auto it = obj.find(key);
        if (it == obj.end())
            return false;
        if (!it->is_number_integer()) {
            fail(join(path, key), "must be an integer");
            return false;
        }
        out = it->get<std::int64_t>();
        return true;
    }

    bool boolean(const json& obj, const char* key, const std::string& path, bool& out)
    {
        auto it = obj.find(key);
        if (it == obj.end())
            return false;
        if (!it->is_boolean()) {
            fail(join(path, key), "must be true or false");
            return false;
        }
        out = it->get<bool>();
        return true;
    }

    bool string(const json& obj, const char* key, const std::string& path, std::string& out)
    {
        auto it = obj.find(key);
        if (it == obj.end())
            return false;
        if (!it->is_string()) {
            fail(join(path, key), "must be a string");
            return false;
        }
        out = it->get<std::string>();
        return true;
    }

    bool numbers(const json& obj, const char* key, const std::string& path, std::vector<double>& out)
    {
        auto it = obj.find(key);
        if (it == obj.end())
            return false;
        if (!it->is_array()) {
            fail(join(path, key), "must be an array of numbers");
            return false;
        }
        out.clear();
        for (const auto& v : *it) {
            if (!v.is_number()) {
                fail(join(path, key), "must be an array of numbers");
                return false;
            }
            out.push_back(v.get<double>());
        }
        return true;
    }

    void range(double v, double lo, double hi, const std::string& path)
    {
        if (!(v >= lo && v <= hi))
            fail(path, "must lie in [" + fmt(lo) + ", " + fmt(hi) + "], got " + fmt(v));
    }
    void positive(double v, const std::string& path)
    {
        if (!(v > 0.0))
            fail(path, "must be positive, got " + fmt(v));
    }
    void non_negative(double v, const std::string& path)
    {
        if (!(v >= 0.0))
            fail(path, "must be non-negative, got " + fmt(v));
    }

    static std::string fmt(double v)
    {
        std::ostringstream os;
        os << v;
        return os.str();
    }
};

void read_detector(Reader& r, const json& root, const char* key, DetectorSpec& d)
{
    const std::string path = std::string("detectors.") + key;
    const json* o = r.object(root, key, path);
    if (!o)
        return;
    r.keys(*o, path, {"quantum_efficiency", "jitter_fwhm_ps", "dark_rate_hz", "dead_time_ps"});
    r.number(*o, "quantum_efficiency", path, d.quantum_efficiency);
    r.number(*o, "jitter_fwhm_ps", path, d.jitter_fwhm_ps);
    r.number(*o, "dark_rate_hz", path, d.dark_rate_hz);
    std::int64_t dead = d.dead_time_ps;
    if (r.integer(*o, "dead_time_ps", path, dead))
        d.dead_time_ps = dead;
    r.range(d.quantum_efficiency, 0.0, 1.0, path + ".quantum_efficiency");
    r.non_negative(d.jitter_fwhm_ps, path + ".jitter_fwhm_ps");
    r.non_negative(d.dark_rate_hz, path + ".dark_rate_hz");
    r.non_negative(static_cast<double>(d.dead_time_ps), path + ".dead_time_ps");
}

void read_band(Reader& r, const json& bands, const char* key, SpectralBand& b)
{
    const std::string path = std::string("bands.") + key;
    const json* o = r.object(bands, key, path);
    if (!o)
        return;
    r.keys(*o, path, {"center_nm", "width_nm"});
    r.number(*o, "center_nm", path, b.center_nm);
    r.number(*o, "width_nm", path, b.width_nm);
    r.positive(b.center_nm, path + ".center_nm");
    r.positive(b.width_nm, path + ".width_nm");
}

json detector_json(const DetectorSpec& d)
{
    return {{"quantum_efficiency", d.quantum_efficiency},
            {"jitter_fwhm_ps", d.jitter_fwhm_ps},
            {"dark_rate_hz", d.dark_rate_hz},
            {"dead_time_ps", d.dead_time_ps}};
}

// Physics-level checks once every field has been read.
void cross_validate(Reader& r, const ScenarioConfig& c)
{
    if (c.pump.repetition_rate_hz <= 0)
        r.fail("pump.repetition_rate_mhz", "must be positive");
    r.positive(c.pump.center_frequency_thz, "pump.center_frequency_thz");
    r.positive(c.pump.spectral_fwhm_ghz, "pump.spectral_fwhm_ghz");
    r.non_negative(c.pump.pulse_duration_ps, "pump.pulse_duration_ps");
    r.positive(c.phase_match.length_m, "phase_match.length_m");
    r.non_negative(c.rates.pair_rate, "rates.pair_rate");
    r.non_negative(c.rates.single_probe_rate, "rates.single_probe_rate");
    r.non_negative(c.rates.single_herald_rate, "rates.single_herald_rate");
    r.range(c.channels.probe_efficiency, 0.0, 1.0, "channels.probe_efficiency");
    r.range(c.channels.herald_efficiency, 0.0, 1.0, "channels.herald_efficiency");
    r.non_negative(c.channels.noise_rate_hz, "channels.noise_rate_hz");
    r.positive(c.grating.groove_density_per_mm, "grating.groove_density_per_mm");
    r.positive(c.grating.beam_waist_mm, "grating.beam_waist_mm");
    if (c.grating.diffraction_order == 0)
        r.fail("grating.diffraction_order", "must be nonzero");
    r.positive(c.analysis.bin_width_ps, "analysis.bin_width_ps");
    r.positive(c.analysis.window_ps, "analysis.window_ps");
    r.positive(c.analysis.fit_bin_ps, "analysis.fit_bin_ps");
    r.positive(c.analysis.peak_threshold_sigma, "analysis.peak_threshold_sigma");
    if (c.analysis.accidental_shifts < 1)
        r.fail("analysis.accidental_shifts", "must be at least 1");
    if (c.configurations.empty())
        r.fail("configurations", "must list at least one configuration");
    for (std::size_t i = 0; i < c.configurations.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (c.configurations[i] == c.configurations[j])
                r.fail("configurations", "duplicate entry " + c.configurations[i].label());

    const auto& d = c.dispersion;
    if (d.mode == DispersionModel::Mode::Polynomial && d.polynomial_ps.size() < 2)
        r.fail("dispersion.polynomial_ps", "needs at least a constant and a linear coefficient");
    if (!(d.valid_min_nm < d.valid_max_nm))
        r.fail("dispersion.valid_min_nm", "must be below valid_max_nm");

    if (!r.errors.empty())
        return;  // the remaining checks evaluate physics on these values

    const auto& hb = c.herald_band;
    const auto& pb = c.probe_band;
    if (hb.overlaps(pb))
        r.fail("bands", "herald and probe bands overlap");
    for (const auto& [name, b] : {std::pair{"bands.herald", hb}, std::pair{"bands.probe", pb}})
        if (b.min_nm() < d.valid_min_nm || b.max_nm() > d.valid_max_nm)
            r.fail(name, "extends outside the dispersion validity interval");
    if (!r.errors.empty())
        return;

    // The herald band must hold the energy-conjugates of some probe frequency.
    const double two_fp = 2.0 * c.pump.center_frequency_thz;
    const double slack = 3.0 * c.pump.spectral_fwhm_ghz * 1e-3;
    if (two_fp - pb.max_thz() > hb.max_thz() + slack || two_fp - pb.min_thz() < hb.min_thz() - slack)
        r.fail("bands", "herald band contains no energy-conjugate of the probe band");

    try {
        d.check_monotone(std::min(hb.min_nm(), pb.min_nm()), std::max(hb.max_nm(), pb.max_nm()));
    } catch (const DomainError& e) {
        r.fail("dispersion", e.what());
    }

    const double half = 0.5 * 1e12 / static_cast<double>(c.pump.repetition_rate_hz);
    double max_range = 0.0;
    for (const auto& t : c.scene.targets)
        max_range = std::max(max_range, 2.0 * t.distance_m / kSpeedOfLightMPerPs);
    try {
        const double lo = std::min(d.shift_ps(hb.min_nm()), d.shift_ps(pb.min_nm()));
        const double hi = std::max(d.shift_ps(hb.max_nm()), d.shift_ps(pb.max_nm())) + max_range;
        if (lo <= -half || hi >= half)
            r.fail("dispersion", "arrival times span [" + Reader::fmt(lo) + ", " + Reader::fmt(hi)
                                     + "] ps, beyond half the pump period; folding would alias");
    } catch (const DomainError& e) {
        r.fail("dispersion", e.what());
    }

    if (c.scene.loopback)
        return;
    std::set<std::string> ids;
    struct Interval {
        double lo, hi;
        std::string id;
    };
    std::vector<Interval> iv;
    for (std::size_t i = 0; i < c.scene.targets.size(); ++i) {
        const auto& t = c.scene.targets[i];
        const std::string path = "scene.targets[" + std::to_string(i) + "]";
        if (!ids.insert(t.id).second)
            r.fail(path + ".id", "duplicate target id '" + t.id + "'");
        r.non_negative(t.distance_m, path + ".distance_m");
        r.range(t.roundtrip_efficiency, 0.0, 1.0, path + ".roundtrip_efficiency");
        r.positive(t.angular_halfwidth_deg, path + ".angular_halfwidth_deg");
        if (t.center_wavelength_nm < pb.min_nm() || t.center_wavelength_nm > pb.max_nm())
            r.fail(path + ".center_wavelength_nm", "outside the probe band");
        try {
            const double th = diffraction_angle(t.center_wavelength_nm, c.grating);
            iv.push_back({th - t.angular_halfwidth_deg, th + t.angular_halfwidth_deg, t.id});
        } catch (const DomainError& e) {
            r.fail(path + ".center_wavelength_nm", e.what());
        }
    }
    std::sort(iv.begin(), iv.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
    for (std::size_t i = 1; i < iv.size(); ++i)
        if (iv[i].lo < iv[i - 1].hi)
            r.fail("scene.targets", "angular intervals of '" + iv[i - 1].id + "' and '" + iv[i].id + "' overlap");
    for (const auto& edge : {pb.min_nm(), pb.max_nm()})
        try {
            diffraction_angle(edge, c.grating);
        } catch (const DomainError& e) {
            r.fail("grating", e.what());
        }
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> violations)
    : std::runtime_error(join_violations(violations)), violations_(std::move(violations))
{
}

std::string Configuration::label() const
{
    return std::string("probe:") + (probe_on ? "on" : "off") + "|noise:" + (noise_on ? "on" : "off");
}

std::string Configuration::stem() const
{
    return std::string("probe-") + (probe_on ? "on" : "off") + "_noise-" + (noise_on ? "on" : "off");
}

Configuration Configuration::parse(const std::string& label)
{
    for (bool p : {true, false})
        for (bool n : {true, false}) {
            Configuration c{p, n};
            if (c.label() == label || c.stem() == label)
                return c;
        }
    throw std::invalid_argument("unknown configuration '" + label + "'");
}

bool ScenarioConfig::has(const Configuration& c) const
{
    return std::find(configurations.begin(), configurations.end(), c) != configurations.end();
}

ScenarioConfig parse_scenario(const json& j)
{
    Reader r;
    ScenarioConfig c;
    c.configurations = {{true, true}, {false, true}, {true, false}, {false, false}};
    if (!j.is_object())
        throw ValidationError({"scenario: top level must be an object"});
    r.keys(j, "", {"schema_version", "seed", "run", "pump", "phase_match", "rates", "bands", "dispersion", "grating",
                   "scene", "channels", "detectors", "configurations", "analysis", "output"});

    std::int64_t version = kScenarioSchemaVersion;
    if (r.integer(j, "schema_version", "", version) && version != kScenarioSchemaVersion)
        r.fail("schema_version", "unsupported version " + std::to_string(version));

    if (auto it = j.find("seed"); it != j.end()) {
        if (it->is_number_unsigned())
            c.seed = it->get<std::uint64_t>();
        else if (it->is_number_integer() && it->get<std::int64_t>() >= 0)
            c.seed = static_cast<std::uint64_t>(it->get<std::int64_t>());
        else
            r.fail("seed", "must be a non-negative 64-bit integer");
    }

    if (const json* o = r.object(j, "pump", "pump")) {
        r.keys(*o, "pump", {"repetition_rate_mhz", "center_wavelength_nm", "center_frequency_thz",
                            "spectral_fwhm_ghz", "pulse_duration_ps"});
        double mhz = 0.0;
        if (r.number(*o, "repetition_rate_mhz", "pump", mhz)) {
            const double hz = mhz * 1e6;
            if (std::fabs(hz - std::round(hz)) > 1e-6 * std::max(1.0, hz) || !(hz >= 1.0))
                r.fail("pump.repetition_rate_mhz", "must be a positive whole number of Hz");
            else
                c.pump.repetition_rate_hz = std::llround(hz);
        }
        double wl = 0.0, f = 0.0;
        const bool has_wl = r.number(*o, "center_wavelength_nm", "pump", wl);
        const bool has_f = r.number(*o, "center_frequency_thz", "pump", f);
        if (has_wl && has_f)
            r.fail("pump", "give center_wavelength_nm or center_frequency_thz, not both");
        else if (has_wl && wl > 0.0)
            c.pump.center_frequency_thz = wavelength_to_frequency(wl);
        else if (has_wl)
            r.fail("pump.center_wavelength_nm", "must be positive");
        else if (has_f)
            c.pump.center_frequency_thz = f;
        r.number(*o, "spectral_fwhm_ghz", "pump", c.pump.spectral_fwhm_ghz);
        r.number(*o, "pulse_duration_ps", "pump", c.pump.pulse_duration_ps);
    }

    if (const json* o = r.object(j, "run", "run")) {
        r.keys(*o, "run", {"duration_s", "pulses"});
        double dur = 0.0;
        std::int64_t pulses = 0;
        const bool has_d = r.number(*o, "duration_s", "run", dur);
        const bool has_p = r.integer(*o, "pulses", "run", pulses);
        if (has_d && has_p)
            r.fail("run", "give duration_s or pulses, not both");
        else if (has_d) {
            r.non_negative(dur, "run.duration_s");
            if (dur >= 0.0)
                c.pulses = static_cast<std::uint64_t>(std::llround(dur * static_cast<double>(c.pump.repetition_rate_hz)));
        } else if (has_p) {
            r.non_negative(static_cast<double>(pulses), "run.pulses");
            if (pulses >= 0)
                c.pulses = static_cast<std::uint64_t>(pulses);
        }
    }

    if (const json* o = r.object(j, "phase_match", "phase_match")) {
        r.keys(*o, "phase_match", {"kappa_coefficients", "length_m"});
        r.numbers(*o, "kappa_coefficients", "phase_match", c.phase_match.kappa_coefficients);
        r.number(*o, "length_m", "phase_match", c.phase_match.length_m);
    }

    if (const json* o = r.object(j, "rates", "rates")) {
        r.keys(*o, "rates", {"pair_rate", "single_probe_rate", "single_herald_rate"});
        r.number(*o, "pair_rate", "rates", c.rates.pair_rate);
        r.number(*o, "single_probe_rate", "rates", c.rates.single_probe_rate);
        r.number(*o, "single_herald_rate", "rates", c.rates.single_herald_rate);
    }

    if (const json* o = r.object(j, "bands", "bands")) {
        r.keys(*o, "bands", {"herald", "probe"});
        read_band(r, *o, "herald", c.herald_band);
        read_band(r, *o, "probe", c.probe_band);
    }

    if (const json* o = r.object(j, "dispersion", "dispersion")) {
        r.keys(*o, "dispersion", {"mode", "slope_ns_per_nm", "anchor_wavelength_nm", "polynomial_ps",
                                  "fiber_length_km", "valid_min_nm", "valid_max_nm"});
        std::string mode = "linear";
        r.string(*o, "mode", "dispersion", mode);
        if (mode == "linear")
            c.dispersion.mode = DispersionModel::Mode::Linear;
        else if (mode == "polynomial")
            c.dispersion.mode = DispersionModel::Mode::Polynomial;
        else
            r.fail("dispersion.mode", "must be 'linear' or 'polynomial'");
        r.number(*o, "slope_ns_per_nm", "dispersion", c.dispersion.slope_ns_per_nm);
        r.number(*o, "anchor_wavelength_nm", "dispersion", c.dispersion.anchor_wavelength_nm);
        r.numbers(*o, "polynomial_ps", "dispersion", c.dispersion.polynomial_ps);
        r.number(*o, "fiber_length_km", "dispersion", c.dispersion.fiber_length_km);
        r.number(*o, "valid_min_nm", "dispersion", c.dispersion.valid_min_nm);
        r.number(*o, "valid_max_nm", "dispersion", c.dispersion.valid_max_nm);
        r.non_negative(c.dispersion.fiber_length_km, "dispersion.fiber_length_km");
    }

    if (const json* o = r.object(j, "grating", "grating")) {
        r.keys(*o, "grating", {"groove_density_per_mm", "incidence_angle_deg", "diffraction_order", "beam_waist_mm"});
        r.number(*o, "groove_density_per_mm", "grating", c.grating.groove_density_per_mm);
        r.number(*o, "incidence_angle_deg", "grating", c.grating.incidence_angle_deg);
        std::int64_t order = c.grating.diffraction_order;
        if (r.integer(*o, "diffraction_order", "grating", order))
            c.grating.diffraction_order = static_cast<int>(order);
        r.number(*o, "beam_waist_mm", "grating", c.grating.beam_waist_mm);
    }

    if (const json* o = r.object(j, "scene", "scene")) {
        r.keys(*o, "scene", {"loopback", "targets"});
        r.boolean(*o, "loopback", "scene", c.scene.loopback);
        if (auto it = o->find("targets"); it != o->end()) {
            if (!it->is_array())
                r.fail("scene.targets", "must be an array");
            else
                for (std::size_t i = 0; i < it->size(); ++i) {
                    const std::string path = "scene.targets[" + std::to_string(i) + "]";
                    const auto& tj = (*it)[i];
                    if (!tj.is_object()) {
                        r.fail(path, "must be an object");
                        continue;
                    }
                    r.keys(tj, path, {"id", "center_wavelength_nm", "angular_halfwidth_deg", "distance_m",
                                      "roundtrip_efficiency"});
                    Target t;
                    t.id = "t" + std::to_string(i);
                    r.string(tj, "id", path, t.id);
                    if (!r.number(tj, "center_wavelength_nm", path, t.center_wavelength_nm))
                        r.fail(path + ".center_wavelength_nm", "is required");
                    if (!r.number(tj, "angular_halfwidth_deg", path, t.angular_halfwidth_deg))
                        r.fail(path + ".angular_halfwidth_deg", "is required");
                    if (!r.number(tj, "distance_m", path, t.distance_m))
                        r.fail(path + ".distance_m", "is required");
                    r.number(tj, "roundtrip_efficiency", path, t.roundtrip_efficiency);
                    c.scene.targets.push_back(t);
                }
        }
    }

    if (const json* o = r.object(j, "channels", "channels")) {
        r.keys(*o, "channels", {"probe_efficiency", "herald_efficiency", "noise_rate_hz"});
        r.number(*o, "probe_efficiency", "channels", c.channels.probe_efficiency);
        r.number(*o, "herald_efficiency", "channels", c.channels.herald_efficiency);
        r.number(*o, "noise_rate_hz", "channels", c.channels.noise_rate_hz);
    }

    if (const json* o = r.object(j, "detectors", "detectors")) {
        r.keys(*o, "detectors", {"ref", "herald", "probe"});
        read_detector(r, *o, "ref", c.ref_detector);
        read_detector(r, *o, "herald", c.herald_detector);
        read_detector(r, *o, "probe", c.probe_detector);
    }

    if (auto it = j.find("configurations"); it != j.end()) {
        if (!it->is_array()) {
            r.fail("configurations", "must be an array of labels");
        } else {
            c.configurations.clear();
            for (const auto& v : *it) {
                try {
                    c.configurations.push_back(Configuration::parse(v.is_string() ? v.get<std::string>() : ""));
                } catch (const std::invalid_argument&) {
                    r.fail("configurations", "unknown configuration " + v.dump());
                }
            }
        }
    }

    if (const json* o = r.object(j, "analysis", "analysis")) {
        r.keys(*o, "analysis", {"bin_width_ps", "window_ps", "accidental_shifts", "fit_bin_ps", "peak_threshold_sigma"});
        r.number(*o, "bin_width_ps", "analysis", c.analysis.bin_width_ps);
        r.number(*o, "window_ps", "analysis", c.analysis.window_ps);
        std::int64_t shifts = c.analysis.accidental_shifts;
        if (r.integer(*o, "accidental_shifts", "analysis", shifts))
            c.analysis.accidental_shifts = static_cast<int>(shifts);
        r.number(*o, "fit_bin_ps", "analysis", c.analysis.fit_bin_ps);
        r.number(*o, "peak_threshold_sigma", "analysis", c.analysis.peak_threshold_sigma);
    }

    if (const json* o = r.object(j, "output", "output")) {
        r.keys(*o, "output", {"reference_tags", "common_random_numbers"});
        std::string mode = "conditional";
        r.string(*o, "reference_tags", "output", mode);
        if (mode == "conditional")
            c.output.reference = ReferenceMode::Conditional;
        else if (mode == "all")
            c.output.reference = ReferenceMode::All;
        else
            r.fail("output.reference_tags", "must be 'conditional' or 'all'");
        r.boolean(*o, "common_random_numbers", "output", c.output.common_random_numbers);
    }

    cross_validate(r, c);
    if (!r.errors.empty())
        throw ValidationError(r.errors);
    return c;
}

json ScenarioConfig::to_json() const
{
    json targets = json::array();
    for (const auto& t : scene.targets)
        targets.push_back({{"id", t.id},
                           {"center_wavelength_nm", t.center_wavelength_nm},
                           {"angular_halfwidth_deg", t.angular_halfwidth_deg},
                           {"distance_m", t.distance_m},
                           {"roundtrip_efficiency", t.roundtrip_efficiency}});
    json configs = json::array();
    for (const auto& c : configurations)
        configs.push_back(c.label());
    return {
        {"schema_version", kScenarioSchemaVersion},
        {"seed", seed},
        {"run", {{"pulses", pulses}}},
        {"pump",
         {{"repetition_rate_mhz", static_cast<double>(pump.repetition_rate_hz) * 1e-6},
          {"center_frequency_thz", pump.center_frequency_thz},
          {"spectral_fwhm_ghz", pump.spectral_fwhm_ghz},
          {"pulse_duration_ps", pump.pulse_duration_ps}}},
        {"phase_match", {{"kappa_coefficients", phase_match.kappa_coefficients}, {"length_m", phase_match.length_m}}},
        {"rates",
         {{"pair_rate", rates.pair_rate},
          {"single_probe_rate", rates.single_probe_rate},
          {"single_herald_rate", rates.single_herald_rate}}},
        {"bands",
         {{"herald", {{"center_nm", herald_band.center_nm}, {"width_nm", herald_band.width_nm}}},
          {"probe", {{"center_nm", probe_band.center_nm}, {"width_nm", probe_band.width_nm}}}}},
        {"dispersion",
         {{"mode", dispersion.mode == DispersionModel::Mode::Linear ? "linear" : "polynomial"},
          {"slope_ns_per_nm", dispersion.slope_ns_per_nm},
          {"anchor_wavelength_nm", dispersion.anchor_wavelength_nm},
          {"polynomial_ps", dispersion.polynomial_ps},
          {"fiber_length_km", dispersion.fiber_length_km},
          {"valid_min_nm", dispersion.valid_min_nm},
          {"valid_max_nm", dispersion.valid_max_nm}}},
        {"grating",
         {{"groove_density_per_mm", grating.groove_density_per_mm},
          {"incidence_angle_deg", grating.incidence_angle_deg},
          {"diffraction_order", grating.diffraction_order},
          {"beam_waist_mm", grating.beam_waist_mm}}},
        {"scene", {{"loopback", scene.loopback}, {"targets", targets}}},
        {"channels",
         {{"probe_efficiency", channels.probe_efficiency},
          {"herald_efficiency", channels.herald_efficiency},
          {"noise_rate_hz", channels.noise_rate_hz}}},
        {"detectors",
         {{"ref", detector_json(ref_detector)},
          {"herald", detector_json(herald_detector)},
          {"probe", detector_json(probe_detector)}}},
        {"configurations", configs},
        {"analysis",
         {{"bin_width_ps", analysis.bin_width_ps},
          {"window_ps", analysis.window_ps},
          {"accidental_shifts", analysis.accidental_shifts},
          {"fit_bin_ps", analysis.fit_bin_ps},
          {"peak_threshold_sigma", analysis.peak_threshold_sigma}}},
        {"output",
         {{"reference_tags", output.reference == ReferenceMode::All ? "all" : "conditional"},
          {"common_random_numbers", output.common_random_numbers}}},
    };
}

Fingerprint ScenarioConfig::fingerprint() const
{
    const std::string text = to_json().dump();
    Fingerprint f{};
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), f.data(), &len, EVP_sha256(), nullptr) != 1 || len != f.size())
        throw std::runtime_error("SHA-256 digest failed");
    return f;
}

theory::RateParams ScenarioConfig::rate_params() const
{
    const double period_s = 1.0 / static_cast<double>(pump.repetition_rate_hz);
    theory::RateParams p = theory::RateParams::from_rates_hz(
        rates.pair_rate, rates.single_probe_rate, rates.single_herald_rate,
        channels.noise_rate_hz * probe_detector.quantum_efficiency, probe_detector.dark_rate_hz,
        herald_detector.dark_rate_hz, channels.probe_efficiency * probe_detector.quantum_efficiency,
        channels.herald_efficiency * herald_detector.quantum_efficiency, period_s);
    return p;
}

std::vector<std::string> scenario_warnings(const ScenarioConfig& cfg)
{
    try {
        return theory::validate(cfg.rate_params());
    } catch (const std::invalid_argument& e) {
        return {e.what()};
    }
}

json parse_json_text(const std::string& text)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        const std::size_t end = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
        for (std::size_t i = 0; i < end; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ParseError("JSON parse error at line " + std::to_string(line) + ", column " + std::to_string(col) + ": "
                             + e.what(),
                         line, col);
    }
}

ScenarioConfig load_scenario(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw std::ios_base::failure("cannot open scenario " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_scenario(parse_json_text(ss.str()));
}

namespace {

bool is_index(const std::string& key)
{
    return !key.empty() && std::all_of(key.begin(), key.end(), [](unsigned char c) { return std::isdigit(c); });
}

const json* find_path(const json& doc, const std::vector<std::string>& keys)
{
    const json* node = &doc;
    for (const auto& k : keys) {
        if (node->is_object() && node->contains(k))
            node = &(*node)[k];
        else if (node->is_array() && is_index(k) && std::stoul(k) < node->size())
            node = &(*node)[std::stoul(k)];
        else
            return nullptr;
    }
    return node;
}

}  // namespace

void set_json_path(json& doc, const std::string& path, const json& value)
{
    std::vector<std::string> keys;
    for (std::size_t start = 0;;) {
        const auto dot = path.find('.', start);
        keys.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
        if (dot == std::string::npos)
            break;
        start = dot + 1;
    }
    if (std::any_of(keys.begin(), keys.end(), [](const std::string& k) { return k.empty(); }))
        throw ValidationError({"'" + path + "' is not a valid path"});

    // Either-or fields: setting one removes its alternative.
    static const std::vector<std::pair<std::string, std::string>> alternatives{
        {"run.duration_s", "run.pulses"}, {"pump.center_wavelength_nm", "pump.center_frequency_thz"}};
    std::string sibling;
    for (const auto& [a, b] : alternatives) {
        if (path == a)
            sibling = b;
        else if (path == b)
            sibling = a;
    }

    // Paths may name fields the document leaves at their defaults, so check
    // against the canonical form as well.
    bool known = find_path(doc, keys) != nullptr || !sibling.empty();
    if (!known) {
        try {
            known = find_path(parse_scenario(doc).to_json(), keys) != nullptr;
        } catch (const ValidationError&) {
        }
    }
    if (!known)
        throw ValidationError({"'" + path + "' does not name a scenario field"});

    if (!sibling.empty()) {
        const auto dot = sibling.find('.');
        auto it = doc.find(sibling.substr(0, dot));
        if (it != doc.end() && it->is_object())
            it->erase(sibling.substr(dot + 1));
    }

    json* node = &doc;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const auto& k = keys[i];
        const bool last = i + 1 == keys.size();
        if (node->is_array()) {
            if (!is_index(k) || std::stoul(k) >= node->size())
                throw ValidationError({path + ": index '" + k + "' out of range"});
            node = &(*node)[std::stoul(k)];
        } else {
            if (!node->is_object())
                throw ValidationError({path + ": '" + k + "' is not inside an object"});
            if (!last && !node->contains(k))
                (*node)[k] = json::object();
            node = &(*node)[k];
        }
        if (last)
            *node = value;
    }
}

}  // namespace qep

// qeplidar: simulate, analyze and sweep quantum-enhanced LiDAR experiments.
//
// Exit codes: 0 success, 1 validation/usage, 2 runtime, 3 I/O.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qep/analysis.hpp"
#include "qep/pipeline.hpp"
#include "qep/scenario.hpp"
#include "qep/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qep;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kIo = 3 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    int threads = 0;
    std::string format = "json";
};

json read_json_file(const fs::path& p)
{
    std::ifstream is(p);
    if (!is)
        throw std::ios_base::failure("cannot open " + p.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_json_text(ss.str());
}

json scenario_document(const Common& c)
{
    if (c.config.empty())
        throw ValidationError({"--config is required"});
    json doc = read_json_file(c.config);
    if (c.seed)
        doc["seed"] = *c.seed;
    return doc;
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::trunc);
    if (!os)
        throw std::ios_base::failure("cannot open " + p.string() + " for writing");
    os << text;
    if (!os)
        throw std::ios_base::failure("write failed: " + p.string());
}

std::string provenance_line(const std::string& fingerprint)
{
    return std::string("# qeplidar ") + kToolVersion + " fingerprint " + fingerprint + "\n";
}

std::vector<std::pair<double, double>> read_csv_pairs(const fs::path& p)
{
    std::ifstream is(p);
    if (!is)
        throw std::ios_base::failure("cannot open " + p.string());
    std::vector<std::pair<double, double>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#')
            continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        double a = 0.0, b = 0.0;
        if (!(ls >> a >> b)) {
            if (out.empty() && lineno == 1)
                continue;  // header
            throw ValidationError({p.string() + ":" + std::to_string(lineno) + ": expected two numbers"});
        }
        out.emplace_back(a, b);
    }
    return out;
}

json calibration_json(const CalibrationMap& m)
{
    json anchors = json::array();
    for (const auto& [t, l] : m.anchors)
        anchors.push_back({t, l});
    return {{"coefficients", m.coefficients}, {"t_center", m.t_center},       {"t_scale", m.t_scale},
            {"time_lo_ps", m.time_lo_ps},     {"time_hi_ps", m.time_hi_ps},   {"anchors", anchors},
            {"residual_nm", m.residual_nm}};
}

CalibrationMap calibration_from_json(const json& j)
{
    try {
        auto m = CalibrationMap::from_polynomial(j.at("coefficients").get<std::vector<double>>(),
                                                 j.at("t_center").get<double>(), j.at("t_scale").get<double>(),
                                                 j.at("time_lo_ps").get<double>(), j.at("time_hi_ps").get<double>());
        m.residual_nm = j.value("residual_nm", 0.0);
        for (const auto& a : j.value("anchors", json::array()))
            m.anchors.emplace_back(a.at(0).get<double>(), a.at(1).get<double>());
        return m;
    } catch (const json::exception& e) {
        throw ValidationError({std::string("calibration file: ") + e.what()});
    }
}

std::string targets_csv(const json& report)
{
    std::ostringstream os;
    os << "label,direction_deg,distance_m,peak_count,car,snr_c,snr_q,esnr\n";
    auto val = [](const json& e) { return e.is_null() ? std::string() : std::to_string(e.at("value").get<double>()); };
    const auto& targets = report.at("targets");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& t = targets[i];
        os << t.at("label").get<std::string>() << ',' << t.at("direction_deg").get<double>() << ','
           << t.at("distance_m").get<double>() << ',' << t.at("peak_count").get<std::uint64_t>() << ','
           << t.at("car").get<double>() << ',' << val(report.at("snr")[i].at("snr_c")) << ','
           << val(report.at("snr")[i].at("snr_q")) << ',' << val(report.at("esnr")[i].at("esnr")) << '\n';
    }
    return os.str();
}

int cmd_simulate(const Common& c)
{
    const auto cfg = parse_scenario(scenario_document(c));
    const auto result = simulate(cfg, c.threads);
    for (const auto& w : result.warnings)
        std::cerr << "warning: " << w << '\n';
    const auto paths = write_streams(result, c.out_dir);
    json files = json::array();
    for (const auto& p : paths)
        files.push_back(p.filename().string());
    const json summary = {{"tool_version", kToolVersion},
                          {"fingerprint", to_hex(cfg.fingerprint())},
                          {"pulses", cfg.pulses},
                          {"pairs_generated", result.pairs_generated},
                          {"probe_signal_tags", result.probe_signal_tags},
                          {"dropped_past_end", result.diagnostics.dropped_past_end},
                          {"clipped_negative", result.diagnostics.clipped_negative},
                          {"warnings", result.warnings},
                          {"files", files}};
    write_text(fs::path(c.out_dir) / "simulation.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << '\n';
    return kOk;
}

int cmd_analyze(const Common& c, const std::string& in_dir, const std::string& calibration)
{
    const auto cfg = parse_scenario(scenario_document(c));
    const auto streams = read_streams(cfg, in_dir.empty() ? c.out_dir : in_dir);
    std::optional<CalibrationMap> map;
    if (!calibration.empty())
        map = calibration_from_json(read_json_file(calibration));
    const auto report = analyze(cfg, streams, map);
    const json j = report.to_json();
    fs::create_directories(c.out_dir);
    write_text(fs::path(c.out_dir) / "report.json", j.dump(2) + "\n");

    for (const auto& [conf, s] : streams) {
        if (conf.label() != report.reference_configuration)
            continue;
        const auto folded = fold_to_pulse_frame(s, cfg.pump.period_ps());
        const auto jti = build_jti(folded, cfg.analysis.bin_width_ps);
        const auto path = fs::path(c.out_dir) / "jti.csv";
        write_jti_csv(jti, path);
        // Prepend provenance so every artifact names its scenario.
        std::ifstream is(path);
        std::stringstream body;
        body << is.rdbuf();
        write_text(path, provenance_line(report.fingerprint) + body.str());
    }
    std::cout << (c.format == "csv" ? targets_csv(j) : j.dump(2) + "\n");
    return kOk;
}

theory::RateParams rate_params_from_json(const json& j)
{
    theory::RateParams p;
    p.nu_cc = j.value("nu_cc", 0.0);
    p.nu_sc_p = j.value("nu_sc_p", 0.0);
    p.nu_sc_h = j.value("nu_sc_h", 0.0);
    p.nu_noise_p = j.value("nu_noise_p", 0.0);
    p.nu_dc_p = j.value("nu_dc_p", 0.0);
    p.nu_dc_h = j.value("nu_dc_h", 0.0);
    p.eta_p = j.value("eta_p", 1.0);
    p.eta_h = j.value("eta_h", 1.0);
    return p;
}

theory::FisherParams fisher_params_from_json(const json& j)
{
    theory::FisherParams f;
    f.nu = j.value("nu", f.nu);
    f.nu_b = j.value("nu_b", f.nu_b);
    f.eta_p = j.value("eta_p", f.eta_p);
    f.eta_h = j.value("eta_h", f.eta_h);
    f.t_pump_s = j.value("t_pump_s", f.t_pump_s);
    f.t_cc_s = j.value("t_cc_s", f.t_cc_s);
    return f;
}

json opt_json(const std::optional<double>& v)
{
    return v ? json(*v) : json(nullptr);
}

int cmd_theory(const Common& c, const std::string& params, const std::string& nu_b_sweep)
{
    const json in = params.empty() ? json::object() : read_json_file(params);
    json out = json::object();
    if (in.contains("rate")) {
        const auto p = rate_params_from_json(in.at("rate"));
        const auto warnings = theory::validate(p);
        const auto d = theory::detection_probabilities(p);
        const auto snr = theory::snr_closed_form(p);
        out["rate"] = {{"p_sc_on_on", d.sc_on_on},
                       {"p_sc_off_on", d.sc_off_on},
                       {"p_cc_on_on", d.cc_on_on},
                       {"p_cc_off_on", d.cc_off_on},
                       {"snr_c", opt_json(snr.classical)},
                       {"snr_q", opt_json(snr.quantum)},
                       {"esnr", opt_json(theory::esnr_closed_form(p))},
                       {"car", opt_json(theory::car_closed_form(p))},
                       {"warnings", warnings}};
    }
    theory::FisherParams f;
    if (in.contains("fisher")) {
        f = fisher_params_from_json(in.at("fisher"));
        const auto r = theory::fisher_rates(f);
        const auto e = theory::fisher_enhancement(f);
        out["fisher"] = {{"p_cc", r.p_cc},
                         {"p_p", r.p_p},
                         {"p_h", r.p_h},
                         {"i_q", opt_json(theory::fisher_information_quantum(f))},
                         {"i_c", opt_json(theory::fisher_information_classical(f))},
                         {"e_fisher", e ? json(e->e_fisher) : json(nullptr)},
                         {"coincidence_term", e ? json(e->coincidence_term) : json(nullptr)},
                         {"herald_term", e ? json(e->herald_term) : json(nullptr)},
                         {"probe_term", e ? json(e->probe_term) : json(nullptr)}};
    }
    if (!nu_b_sweep.empty()) {
        double lo = 0.0, hi = 0.0;
        int n = 0;
        if (std::sscanf(nu_b_sweep.c_str(), "%lf,%lf,%d", &lo, &hi, &n) != 3 || !(lo > 0.0) || !(hi > lo) || n < 2)
            throw ValidationError({"--nu-b-sweep expects lo,hi,n with 0 < lo < hi and n >= 2"});
        std::ostringstream csv;
        csv << "nu_b,e_fisher,coincidence_term,herald_term,probe_term,coincidence_share\n";
        for (int i = 0; i < n; ++i) {
            auto g = f;
            g.nu_b = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
            const auto e = theory::fisher_enhancement(g);
            csv << g.nu_b << ',';
            if (e)
                csv << e->e_fisher << ',' << e->coincidence_term << ',' << e->herald_term << ',' << e->probe_term << ','
                    << e->coincidence_share();
            else
                csv << ",,,,";
            csv << '\n';
        }
        fs::create_directories(c.out_dir);
        write_text(fs::path(c.out_dir) / "fisher_sweep.csv", csv.str());
        if (c.format == "csv") {
            std::cout << csv.str();
            return kOk;
        }
    }
    std::cout << out.dump(2) << '\n';
    return kOk;
}

int cmd_calibrate(const Common& c, const std::string& histogram, const std::string& reference)
{
    if (histogram.empty() || reference.empty())
        throw ValidationError({"calibrate needs --histogram and --reference"});
    const auto h = read_csv_pairs(histogram);
    const auto r = read_csv_pairs(reference);
    std::vector<double> t, n, l, tr;
    for (const auto& [a, b] : h) {
        t.push_back(a);
        n.push_back(b);
    }
    for (const auto& [a, b] : r) {
        l.push_back(a);
        tr.push_back(b);
    }
    const auto map = calibrate_time_to_wavelength(t, n, l, tr);
    const json j = calibration_json(map);
    fs::create_directories(c.out_dir);
    write_text(fs::path(c.out_dir) / "calibration.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << '\n';
    return kOk;
}

int cmd_sweep(const Common& c, const std::string& sweep_path)
{
    if (sweep_path.empty())
        throw ValidationError({"sweep needs --sweep"});
    const json doc = scenario_document(c);
    const auto spec = SweepSpec::from_json(read_json_file(sweep_path));
    const auto fp = to_hex(parse_scenario(doc).fingerprint());
    const auto rows = sweep(doc, spec, c.threads);
    std::ostringstream os;
    os << provenance_line(fp) << sweep_csv_header() << '\n';
    for (const auto& r : rows)
        os << sweep_csv_row(r) << '\n';
    fs::create_directories(c.out_dir);
    write_text(fs::path(c.out_dir) / "sweep.csv", os.str());
    std::cout << os.str();
    return kOk;
}

int cmd_report(const Common& c, const std::string& input)
{
    const json j = read_json_file(input.empty() ? (fs::path(c.out_dir) / "report.json").string() : input);
    if (c.format == "csv") {
        std::cout << provenance_line(j.value("fingerprint", std::string())) << targets_csv(j);
        return kOk;
    }
    json summary = {{"fingerprint", j.value("fingerprint", std::string())},
                    {"resolution", j.at("resolution")},
                    {"noise_intensity_db", j.at("noise_intensity_db")},
                    {"targets", json::array()}};
    for (std::size_t i = 0; i < j.at("targets").size(); ++i) {
        const auto& t = j.at("targets")[i];
        summary["targets"].push_back({{"label", t.at("label")},
                                      {"direction_deg", t.at("direction_deg")},
                                      {"distance_m", t.at("distance_m")},
                                      {"car", t.at("car")},
                                      {"snr_c", j.at("snr")[i].at("snr_c")},
                                      {"snr_q", j.at("snr")[i].at("snr_q")},
                                      {"esnr", j.at("esnr")[i].at("esnr")}});
    }
    std::cout << summary.dump(2) << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Quantum-enhanced LiDAR simulator and analysis toolkit"};
    app.require_subcommand(1);
    Common c;
    c.threads = default_thread_count();

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* o = sub->add_option("--config", c.config, "Scenario JSON");
        if (needs_config)
            o->required();
        sub->add_option("--seed", c.seed, "Override the scenario seed");
        sub->add_option("--out-dir", c.out_dir, "Output directory");
        sub->add_option("--threads", c.threads, "Worker threads (default: QEPLIDAR_THREADS or all cores)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--format", c.format, "Stdout format")->check(CLI::IsMember({"json", "csv"}));
    };

    auto* sim = app.add_subcommand("simulate", "Generate tag streams for each configuration");
    add_common(sim, true);

    std::string in_dir, calibration;
    auto* ana = app.add_subcommand("analyze", "Analyze tag streams and write report.json");
    add_common(ana, true);
    ana->add_option("--in-dir", in_dir, "Directory holding the .qtt streams (default: --out-dir)");
    ana->add_option("--calibration", calibration, "Calibration map JSON from `calibrate`");

    std::string params, nu_b_sweep;
    auto* th = app.add_subcommand("theory", "Evaluate the closed-form rate and Fisher models");
    add_common(th, false);
    th->add_option("--params", params, "JSON with optional 'rate' and 'fisher' objects");
    th->add_option("--nu-b-sweep", nu_b_sweep, "lo,hi,n log-spaced noise sweep of E_Fisher (CSV)");

    std::string histogram, reference;
    auto* cal = app.add_subcommand("calibrate", "Fit an arrival-time to wavelength map");
    add_common(cal, false);
    cal->add_option("--histogram", histogram, "CSV time_ps,counts")->required();
    cal->add_option("--reference", reference, "CSV wavelength_nm,transmission")->required();

    std::string sweep_path;
    auto* sw = app.add_subcommand("sweep", "Run a parameter sweep and write sweep.csv");
    add_common(sw, true);
    sw->add_option("--sweep", sweep_path, "Sweep JSON {path, values, overrides, per_value}")->required();

    std::string input;
    auto* rep = app.add_subcommand("report", "Summarize a report.json");
    add_common(rep, false);
    rep->add_option("--input", input, "report.json (default: <out-dir>/report.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kValidation;
    }

    try {
        if (*sim)
            return cmd_simulate(c);
        if (*ana)
            return cmd_analyze(c, in_dir, calibration);
        if (*th)
            return cmd_theory(c, params, nu_b_sweep);
        if (*cal)
            return cmd_calibrate(c, histogram, reference);
        if (*sw)
            return cmd_sweep(c, sweep_path);
        if (*rep)
            return cmd_report(c, input);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const CalibrationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    } catch (const std::ios_base::failure& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kRuntime;
}

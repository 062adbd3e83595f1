#include "qep/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace qep {

using nlohmann::json;

namespace {

constexpr std::uint64_t kBlockPulses = 1u << 15;
constexpr std::uint64_t kLeadInIndex = ~0ull;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

struct BlockOut {
    std::vector<Picoseconds> herald, probe_signal, probe_noise, probe_dark;
    std::uint64_t pairs = 0;
    DetectDiagnostics diag;
};

DetectorSpec dark_spec()
{
    DetectorSpec d;
    d.quantum_efficiency = 1.0;
    return d;
}

// Background (noise or darks) over one time segment with its own substreams.
void background(double begin, double end, double rate_hz, const DetectorSpec& det, std::uint64_t seed,
                std::uint64_t index, Substream arrivals, Substream detection, std::vector<double>& scratch,
                std::vector<Picoseconds>& out, DetectDiagnostics& diag)
{
    if (!(rate_hz > 0.0))
        return;
    scratch.clear();
    CounterRng ar(seed, index, arrivals);
    sample_uniform_arrivals(begin, end, rate_hz, ar, scratch);
    if (scratch.empty())
        return;
    CounterRng dr(seed, index, detection);
    for (double a : scratch)
        if (auto t = detect_arrival(a, det, dr, diag))
            out.push_back(*t);
}

void simulate_block(const ScenarioConfig& cfg, const EmissionModel& model, std::uint64_t seed, Picoseconds lead_in,
                    std::uint64_t first, std::uint64_t last, BlockOut& out)
{
    const ProbePath path{cfg.scene, cfg.grating, cfg.dispersion, cfg.channels};
    const double noise_hz = cfg.channels.noise_rate_hz;
    const auto darks = dark_spec();
    PulseEmissions em;
    std::vector<double> scratch;
    const double offset = static_cast<double>(lead_in);

    for (std::uint64_t i = first; i < last; ++i) {
        sample_pulse_emissions(i, seed, model, em);
        if (!em.empty()) {
            out.pairs += em.pairs.size();
            CounterRng hp(seed, i, Substream::HeraldPath);
            CounterRng pp(seed, i, Substream::ProbePath);
            CounterRng hd(seed, i, Substream::HeraldDetector);
            CounterRng pd(seed, i, Substream::ProbeDetector);
            for (const auto& p : em.pairs) {
                const double g = static_cast<double>(p.generation_time) + offset;
                if (auto a = propagate_herald(p.herald_frequency_thz, g, cfg.dispersion, cfg.channels, hp))
                    if (auto t = detect_arrival(*a, cfg.herald_detector, hd, out.diag))
                        out.herald.push_back(*t);
                if (auto a = propagate_probe(p.probe_frequency_thz, g, path, pp))
                    if (auto t = detect_arrival(*a, cfg.probe_detector, pd, out.diag))
                        out.probe_signal.push_back(*t);
            }
            for (const auto& s : em.herald_singles) {
                const double g = static_cast<double>(s.generation_time) + offset;
                if (auto a = propagate_herald(s.frequency_thz, g, cfg.dispersion, cfg.channels, hp))
                    if (auto t = detect_arrival(*a, cfg.herald_detector, hd, out.diag))
                        out.herald.push_back(*t);
            }
            for (const auto& s : em.probe_singles) {
                const double g = static_cast<double>(s.generation_time) + offset;
                if (auto a = propagate_probe(s.frequency_thz, g, path, pp))
                    if (auto t = detect_arrival(*a, cfg.probe_detector, pd, out.diag))
                        out.probe_signal.push_back(*t);
            }
        }
        const double begin = offset + static_cast<double>(pulse_time(i, cfg.pump));
        const double end = offset + static_cast<double>(pulse_time(i + 1, cfg.pump));
        background(begin, end, noise_hz, cfg.probe_detector, seed, i, Substream::Noise, Substream::NoiseDetector,
                   scratch, out.probe_noise, out.diag);
        background(begin, end, cfg.probe_detector.dark_rate_hz, darks, seed, i, Substream::ProbeDark,
                   Substream::ProbeDark, scratch, out.probe_dark, out.diag);
        background(begin, end, cfg.herald_detector.dark_rate_hz, darks, seed, i, Substream::HeraldDark,
                   Substream::HeraldDark, scratch, out.herald, out.diag);
    }
}

void sort_and_trim(std::vector<Picoseconds>& v, Picoseconds duration, DetectDiagnostics& diag)
{
    std::sort(v.begin(), v.end());
    const auto cut = std::lower_bound(v.begin(), v.end(), duration);
    diag.dropped_past_end += static_cast<std::uint64_t>(v.end() - cut);
    v.erase(cut, v.end());
}

}  // namespace

int default_thread_count()
{
    if (const char* env = std::getenv("QEPLIDAR_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0)
            return static_cast<int>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

Picoseconds lead_in_ps(const ScenarioConfig& cfg)
{
    double min_shift = 0.0;
    for (const auto& b : {cfg.herald_band, cfg.probe_band})
        for (double w : {b.min_nm(), b.max_nm()})
            min_shift = std::min(min_shift, cfg.dispersion.shift_ps(w));
    double sigma = 0.0;
    for (const auto* d : {&cfg.ref_detector, &cfg.herald_detector, &cfg.probe_detector})
        sigma = std::max(sigma, d->jitter_fwhm_ps / kFwhmPerSigma);
    const double need = -min_shift + 10.0 * sigma + 1000.0;
    return static_cast<Picoseconds>(std::ceil(need / 1000.0) * 1000.0);
}

SimulationComponents simulate_components(const ScenarioConfig& cfg, std::uint64_t seed, int threads)
{
    SimulationComponents c;
    c.pulses = cfg.pulses;
    c.lead_in = lead_in_ps(cfg);
    c.duration = c.lead_in + pulse_time(cfg.pulses, cfg.pump);

    const EmissionModel model(cfg.pump, cfg.phase_match, cfg.rates, cfg.herald_band, cfg.probe_band);
    const std::uint64_t nblocks = (cfg.pulses + kBlockPulses - 1) / kBlockPulses;
    std::vector<BlockOut> blocks(nblocks);
    std::atomic<std::uint64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        try {
            for (std::uint64_t b; (b = next.fetch_add(1)) < nblocks;)
                simulate_block(cfg, model, seed, c.lead_in, b * kBlockPulses,
                               std::min(cfg.pulses, (b + 1) * kBlockPulses), blocks[b]);
        } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error)
                error = std::current_exception();
            next = nblocks;
        }
    };
    const int n_threads = std::max(1, std::min<int>(threads > 0 ? threads : default_thread_count(),
                                                    static_cast<int>(std::max<std::uint64_t>(nblocks, 1))));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
    }
    if (error)
        std::rethrow_exception(error);

    // Background before the first pulse frame.
    BlockOut lead;
    std::vector<double> scratch;
    background(0.0, static_cast<double>(c.lead_in), cfg.channels.noise_rate_hz, cfg.probe_detector, seed,
               kLeadInIndex, Substream::Noise, Substream::NoiseDetector, scratch, lead.probe_noise, lead.diag);
    background(0.0, static_cast<double>(c.lead_in), cfg.probe_detector.dark_rate_hz, dark_spec(), seed, kLeadInIndex,
               Substream::ProbeDark, Substream::ProbeDark, scratch, lead.probe_dark, lead.diag);
    background(0.0, static_cast<double>(c.lead_in), cfg.herald_detector.dark_rate_hz, dark_spec(), seed,
               kLeadInIndex, Substream::HeraldDark, Substream::HeraldDark, scratch, lead.herald, lead.diag);
    blocks.insert(blocks.begin(), std::move(lead));

    auto gather = [&](std::vector<Picoseconds> BlockOut::*member, std::vector<Picoseconds>& dst) {
        std::size_t total = 0;
        for (const auto& b : blocks)
            total += (b.*member).size();
        dst.reserve(total);
        for (auto& b : blocks) {
            dst.insert(dst.end(), (b.*member).begin(), (b.*member).end());
            std::vector<Picoseconds>().swap(b.*member);
        }
        sort_and_trim(dst, c.duration, c.diagnostics);
    };
    for (const auto& b : blocks) {
        c.pairs_generated += b.pairs;
        c.diagnostics += b.diag;
    }
    gather(&BlockOut::herald, c.herald);
    gather(&BlockOut::probe_signal, c.probe_signal);
    gather(&BlockOut::probe_noise, c.probe_noise);
    gather(&BlockOut::probe_dark, c.probe_dark);
    return c;
}

namespace {

std::vector<TimeTag> to_tags(const std::vector<Picoseconds>& v, Channel ch)
{
    std::vector<TimeTag> out;
    out.reserve(v.size());
    for (auto t : v)
        out.push_back({ch, t});
    return out;
}

std::vector<Picoseconds> merge_sorted(std::vector<const std::vector<Picoseconds>*> parts)
{
    std::vector<Picoseconds> out;
    for (const auto* p : parts) {
        const auto mid = out.size();
        out.insert(out.end(), p->begin(), p->end());
        std::inplace_merge(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(mid), out.end());
    }
    return out;
}

}  // namespace

TagStream assemble_stream(const ScenarioConfig& cfg, const SimulationComponents& comp, const Configuration& which,
                          std::uint64_t seed)
{
    DetectDiagnostics diag;
    std::vector<const std::vector<Picoseconds>*> parts{&comp.probe_dark};
    if (which.probe_on)
        parts.push_back(&comp.probe_signal);
    if (which.noise_on)
        parts.push_back(&comp.probe_noise);
    auto probe = merge_sorted(parts);
    apply_dead_time(probe, cfg.probe_detector.dead_time_ps, diag);
    auto herald = comp.herald;
    apply_dead_time(herald, cfg.herald_detector.dead_time_ps, diag);

    std::vector<std::uint64_t> pulses;
    if (cfg.output.reference == ReferenceMode::All) {
        pulses.resize(comp.pulses);
        std::iota(pulses.begin(), pulses.end(), std::uint64_t{0});
    } else {
        for (const auto* v : {&herald, &probe})
            for (auto t : *v) {
                const auto p = nearest_pulse(t - comp.lead_in, cfg.pump);
                if (p < comp.pulses)
                    pulses.push_back(p);
            }
        std::sort(pulses.begin(), pulses.end());
        pulses.erase(std::unique(pulses.begin(), pulses.end()), pulses.end());
    }
    std::vector<Picoseconds> refs;
    refs.reserve(pulses.size());
    const DetectorSpec& rd = cfg.ref_detector;
    for (auto p : pulses) {
        CounterRng rng(seed, p, Substream::ReferenceDetector);
        DetectorSpec spec = rd;
        spec.quantum_efficiency = 1.0;
        if (auto t = detect_arrival(static_cast<double>(comp.lead_in + pulse_time(p, cfg.pump)), spec, rng, diag))
            refs.push_back(*t);
    }
    sort_and_trim(refs, comp.duration, diag);

    const std::vector<std::vector<TimeTag>> lists{to_tags(refs, Channel::Ref), to_tags(herald, Channel::Herald),
                                                  to_tags(probe, Channel::Probe)};
    TagStream s = merge_streams(lists, comp.duration);
    s.period_ps = static_cast<std::uint64_t>(std::llround(cfg.pump.period_ps()));
    s.fingerprint = cfg.fingerprint();
    return s;
}

TagStream assemble_stream(const ScenarioConfig& cfg, const SimulationComponents& comp, const Configuration& which)
{
    return assemble_stream(cfg, comp, which, cfg.seed);
}

SimulationResult simulate(const ScenarioConfig& cfg, int threads)
{
    SimulationResult r;
    r.warnings = scenario_warnings(cfg);
    if (cfg.output.common_random_numbers) {
        const auto comp = simulate_components(cfg, cfg.seed, threads);
        r.pairs_generated = comp.pairs_generated;
        r.probe_signal_tags = comp.probe_signal.size();
        r.diagnostics = comp.diagnostics;
        for (const auto& c : cfg.configurations)
            r.streams.emplace_back(c, assemble_stream(cfg, comp, c, cfg.seed));
        return r;
    }
    for (std::size_t k = 0; k < cfg.configurations.size(); ++k) {
        const auto& c = cfg.configurations[k];
        const std::uint64_t seed = splitmix64(cfg.seed ^ (0x5bd1e995ull * (k + 1)));
        const auto comp = simulate_components(cfg, seed, threads);
        r.pairs_generated += comp.pairs_generated;
        if (c.probe_on)
            r.probe_signal_tags += comp.probe_signal.size();
        r.diagnostics += comp.diagnostics;
        r.streams.emplace_back(c, assemble_stream(cfg, comp, c, seed));
    }
    return r;
}

std::vector<std::filesystem::path> write_streams(const SimulationResult& r, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> out;
    for (const auto& [c, s] : r.streams) {
        const auto path = dir / (c.stem() + ".qtt");
        write_tags(s, path);
        out.push_back(path);
    }
    return out;
}

StreamSet read_streams(const ScenarioConfig& cfg, const std::filesystem::path& dir)
{
    StreamSet out;
    for (const auto& c : cfg.configurations)
        out.emplace_back(c, read_tags(dir / (c.stem() + ".qtt")));
    return out;
}

// ----------------------------------------------------------------- analysis

namespace {

const TagStream* find_stream(const StreamSet& s, const Configuration& c);
std::uint64_t count_channel(const TagStream& s, Channel ch);

}  // namespace

double probe_window_width(const WindowSet& w)
{
    std::vector<std::pair<double, double>> iv;
    for (const auto& r : w.rows)
        iv.emplace_back(r.probe_lo, r.probe_hi);
    std::sort(iv.begin(), iv.end());
    double total = 0.0, lo = 0.0, hi = 0.0;
    bool open = false;
    for (const auto& [a, b] : iv) {
        if (open && a <= hi) {
            hi = std::max(hi, b);
            continue;
        }
        if (open)
            total += hi - lo;
        lo = a;
        hi = b;
        open = true;
    }
    if (open)
        total += hi - lo;
    return total;
}

namespace {

const TagStream* find_stream(const StreamSet& s, const Configuration& c)
{
    for (const auto& [k, v] : s)
        if (k == c)
            return &v;
    return nullptr;
}

std::uint64_t count_channel(const TagStream& s, Channel ch)
{
    return static_cast<std::uint64_t>(
        std::count_if(s.tags.begin(), s.tags.end(), [ch](const TimeTag& t) { return t.channel == ch; }));
}

json estimate_json(const std::optional<Estimate>& e)
{
    if (!e)
        return nullptr;
    return {{"value", e->value}, {"sigma", e->sigma}};
}

}  // namespace

AnalysisReport analyze(const ScenarioConfig& cfg, const StreamSet& streams,
                       const std::optional<CalibrationMap>& herald_map)
{
    const auto fp = cfg.fingerprint();
    std::vector<std::string> mismatches;
    for (const auto& [c, s] : streams)
        if (s.fingerprint != fp)
            mismatches.push_back("stream " + c.label() + ": fingerprint " + to_hex(s.fingerprint)
                                 + " does not match scenario " + to_hex(fp));
    if (streams.empty())
        mismatches.push_back("no streams to analyze");
    if (!mismatches.empty())
        throw ValidationError(mismatches);

    AnalysisReport rep;
    rep.fingerprint = to_hex(fp);
    const double period = cfg.pump.period_ps();
    const Configuration on_off{true, false}, on_on{true, true}, off_on{false, true}, off_off{false, false};

    // Targets come from the full measurement (noise included); CAR from the
    // noise-free run when there is one.
    const TagStream* ref = find_stream(streams, on_on);
    if (!ref)
        ref = find_stream(streams, on_off);
    if (!ref) {
        for (const auto& [c, s] : streams)
            if (c.probe_on) {
                ref = &s;
                break;
            }
    }
    if (!ref)
        ref = &streams.front().second;
    const TagStream* car_stream = find_stream(streams, on_off);
    if (!car_stream)
        car_stream = ref;
    for (const auto& [c, s] : streams) {
        if (&s == ref)
            rep.reference_configuration = c.label();
        if (&s == car_stream)
            rep.car_configuration = c.label();
    }

    RowOptions rows;
    rows.window_ps = cfg.analysis.window_ps;
    rows.accidental_shifts = cfg.analysis.accidental_shifts;
    rows.fit_bin_ps = cfg.analysis.fit_bin_ps;

    const double jh = cfg.herald_detector.jitter_fwhm_ps;
    const double jp = cfg.probe_detector.jitter_fwhm_ps;
    const double pump_bw_nm =
        bandwidth_frequency_to_wavelength(cfg.pump.spectral_fwhm_ghz, cfg.pump.center_wavelength_nm());
    const double slope_ns = cfg.dispersion.slope_ps_per_nm(cfg.probe_band.center_nm) * 1e-3;
    rep.delta_distance_cm = distance_resolution(std::hypot(jh, jp), slope_ns, pump_bw_nm);
    rep.delta_direction_deg =
        cfg.scene.loopback ? 0.0 : direction_resolution(jh, slope_ns, cfg.probe_band.center_nm, cfg.grating);

    const CalibrationMap map = herald_map ? *herald_map : CalibrationMap::from_dispersion(cfg.dispersion);
    rep.calibrated = !map.is_fallback();
    rep.calibration_residual_nm = map.residual_nm;

    std::vector<WindowSet> windows;
    {
        const auto folded = fold_to_pulse_frame(*ref, period);
        const auto jti = build_jti(folded, cfg.analysis.bin_width_ps);
        if (car_stream == ref) {
            rep.car_bins = car_per_herald_bin(jti, folded, rows);
        } else {
            const auto cf = fold_to_pulse_frame(*car_stream, period);
            rep.car_bins = car_per_herald_bin(build_jti(cf, cfg.analysis.bin_width_ps), cf, rows);
        }

        rep.coincidence_fwhm_model_ps = std::hypot(jh, jp);
        std::vector<double> widths;
        for (const auto& r : find_row_peaks(jti, folded, rows))
            if (r.fitted && row_is_significant(r, cfg.analysis.peak_threshold_sigma))
                widths.push_back(r.fwhm_ps);
        if (!widths.empty()) {
            const auto mid = widths.begin() + static_cast<std::ptrdiff_t>(widths.size() / 2);
            std::nth_element(widths.begin(), mid, widths.end());
            rep.coincidence_fwhm_measured_ps = *mid;
        }

        ReconstructOptions ro;
        ro.rows = rows;
        ro.threshold_sigma = cfg.analysis.peak_threshold_sigma;
        ro.loopback = cfg.scene.loopback;
        ro.coincidence_fwhm_ps = std::hypot(jh, jp);
        ro.herald_jitter_fwhm_ps = jh;
        ro.pump_bandwidth_nm = pump_bw_nm;
        for (auto& t : reconstruct_targets(jti, folded, map, cfg.grating, cfg.dispersion, cfg.pump, ro)) {
            TargetReport tr;
            tr.target = std::move(t);
            windows.push_back(tr.target.window);
            rep.targets.push_back(std::move(tr));
        }

        std::vector<double> times;
        times.reserve(folded.heralds.size());
        for (const auto& h : folded.heralds)
            times.push_back(static_cast<double>(h.relative));
        try {
            const EmissionModel model(cfg.pump, cfg.phase_match, cfg.rates, cfg.herald_band, cfg.probe_band);
            const double eta_h = cfg.channels.herald_efficiency * cfg.herald_detector.quantum_efficiency;
            const double n = static_cast<double>(cfg.pulses);
            const double sigma = std::hypot(jh, cfg.ref_detector.jitter_fwhm_ps) / kFwhmPerSigma;
            const auto nb = static_cast<std::size_t>(std::ceil(period / cfg.analysis.bin_width_ps - 1e-9));
            const auto expected = herald_time_model(
                model, cfg.dispersion, sigma, -0.5 * period, cfg.analysis.bin_width_ps, nb,
                cfg.rates.pair_rate * eta_h * n, cfg.rates.single_herald_rate * eta_h * n,
                cfg.herald_detector.dark_rate_hz * cfg.duration_s());
            rep.randomness = randomness_report(times, -0.5 * period, cfg.analysis.bin_width_ps, expected);
        } catch (const std::exception& e) {
            rep.randomness_note = e.what();
        }
    }

    for (const auto& [c, s] : streams) {
        rep.tag_counts.emplace_back(c.label(), s.tags.size());
        const auto folded = fold_to_pulse_frame(s, period);
        const auto counts = count_windows(folded, windows, cfg.analysis.accidental_shifts);
        for (std::size_t i = 0; i < rep.targets.size(); ++i)
            rep.targets[i].counts.emplace_back(c.label(), counts[i]);
        if (c == on_on)
            rep.classical_peaks = classical_peaks(folded, cfg.analysis.bin_width_ps, cfg.analysis.peak_threshold_sigma);
    }

    auto counts_for = [](const TargetReport& t, const Configuration& c) -> const WindowCounts* {
        for (const auto& [label, wc] : t.counts)
            if (label == c.label())
                return &wc;
        return nullptr;
    };
    const bool paired = cfg.output.common_random_numbers;
    for (auto& t : rep.targets) {
        const auto* a = counts_for(t, on_on);
        const auto* b = counts_for(t, off_on);
        if (a && b) {
            t.snr_c = snr_from_counts(static_cast<double>(a->n_sc), static_cast<double>(b->n_sc), paired);
            t.snr_q = snr_from_counts(static_cast<double>(a->n_cc), static_cast<double>(b->n_cc), paired);
            if (t.snr_c && t.snr_q)
                t.esnr = snr_enhancement(*t.snr_q, *t.snr_c);
        }
        for (const auto& [label, wc] : t.counts)
            if (label == rep.car_configuration)
                t.car = car_from_counts(wc.n_cc, wc.n_acc, cfg.analysis.accidental_shifts);
    }

    // Noise intensity: signal from on|off, noise from off|on, both net of
    // off|off (darks and residual singles).
    const auto* s_on_off = find_stream(streams, on_off);
    const auto* s_off_on = find_stream(streams, off_on);
    if (s_on_off && s_off_on) {
        const auto* s_off_off = find_stream(streams, off_off);
        double signal = 0.0, noise = 0.0;
        for (auto& t : rep.targets) {
            const auto* a = counts_for(t, on_off);
            const auto* b = counts_for(t, off_on);
            const auto* z = counts_for(t, off_off);
            const double base = z ? static_cast<double>(z->n_sc) : 0.0;
            if (!a || !b)
                continue;
            t.noise_db = noise_intensity_db(static_cast<double>(a->n_sc) - base, static_cast<double>(b->n_sc) - base);
            signal += static_cast<double>(a->n_sc) - base;
            noise += static_cast<double>(b->n_sc) - base;
        }
        if (rep.targets.empty()) {
            const double base = s_off_off ? static_cast<double>(count_channel(*s_off_off, Channel::Probe)) : 0.0;
            signal = static_cast<double>(count_channel(*s_on_off, Channel::Probe)) - base;
            noise = static_cast<double>(count_channel(*s_off_on, Channel::Probe)) - base;
        }
        rep.noise_intensity_db = noise_intensity_db(signal, noise);
    }
    return rep;
}

json AnalysisReport::to_json() const
{
    json car = json::array();
    for (const auto& b : car_bins)
        car.push_back({{"herald_bin", b.herald_bin},
                       {"herald_center_ps", b.herald_center_ps},
                       {"probe_peak_ps", b.probe_peak_ps},
                       {"n_cc", b.n_cc},
                       {"n_acc", b.n_acc},
                       {"car", b.car},
                       {"lower_bound", b.lower_bound}});
    json targets = json::array(), snr = json::array(), esnr = json::array();
    for (const auto& t : this->targets) {
        json counts = json::object();
        for (const auto& [label, wc] : t.counts)
            counts[label] = {{"n_sc", wc.n_sc}, {"n_cc", wc.n_cc}, {"n_acc", wc.n_acc}};
        json rows = json::array();
        for (const auto& r : t.target.window.rows)
            rows.push_back({r.herald_lo, r.herald_hi, r.probe_lo, r.probe_hi});
        targets.push_back({{"label", t.target.window.label},
                           {"direction_deg", t.target.direction_deg},
                           {"distance_m", t.target.distance_m},
                           {"peak_count", t.target.peak_count},
                           {"herald_bin", t.target.herald_bin},
                           {"rows", t.target.n_rows},
                           {"delta_distance_m", t.target.delta_distance_m},
                           {"delta_direction_deg", t.target.delta_direction_deg},
                           {"car", t.car.car},
                           {"car_lower_bound", t.car.lower_bound},
                           {"windows", rows},
                           {"counts", counts}});
        snr.push_back({{"label", t.target.window.label},
                       {"snr_c", estimate_json(t.snr_c)},
                       {"snr_q", estimate_json(t.snr_q)}});
        esnr.push_back({{"label", t.target.window.label}, {"esnr", estimate_json(t.esnr)}});
        targets.back()["noise_db"] = t.noise_db ? json(*t.noise_db) : json(nullptr);
    }
    json randomness = nullptr;
    if (this->randomness)
        randomness = {{"n", this->randomness->n},
                      {"chi2", this->randomness->chi2},
                      {"dof", this->randomness->dof},
                      {"p_value", this->randomness->p_value},
                      {"lag1_correlation", this->randomness->lag1_correlation},
                      {"lag1_standard_error", this->randomness->lag1_standard_error},
                      {"min_entropy_bits", this->randomness->min_entropy_bits}};
    else
        randomness = {{"error", randomness_note}};
    json peaks = json::array();
    for (const auto& p : classical_peaks)
        peaks.push_back({{"center_ps", p.center_ps}, {"count", p.count}, {"baseline", p.baseline}});
    json tags = json::object();
    for (const auto& [label, n] : tag_counts)
        tags[label] = n;
    return {{"tool_version", kToolVersion},
            {"fingerprint", fingerprint},
            {"reference_configuration", reference_configuration},
            {"car_configuration", car_configuration},
            {"car", car},
            {"snr", snr},
            {"esnr", esnr},
            {"targets", targets},
            {"resolution",
             {{"distance_cm", delta_distance_cm},
              {"direction_deg", delta_direction_deg},
              {"coincidence_fwhm_model_ps", coincidence_fwhm_model_ps},
              {"coincidence_fwhm_measured_ps",
               coincidence_fwhm_measured_ps ? json(*coincidence_fwhm_measured_ps) : json(nullptr)}}},
            {"randomness", randomness},
            {"calibration", {{"calibrated", calibrated}, {"residual_nm", calibration_residual_nm}}},
            {"noise_intensity_db", noise_intensity_db ? json(*noise_intensity_db) : json(nullptr)},
            {"classical_peaks", peaks},
            {"tag_counts", tags}};
}

// -------------------------------------------------------------------- sweep

SweepSpec SweepSpec::from_json(const json& j)
{
    std::vector<std::string> errors;
    SweepSpec s;
    if (!j.is_object())
        throw ValidationError({"sweep: must be an object"});
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "path" && it.key() != "values" && it.key() != "overrides" && it.key() != "per_value")
            errors.push_back("sweep." + it.key() + ": unknown key");
    if (auto it = j.find("path"); it != j.end() && it->is_string())
        s.path = it->get<std::string>();
    else
        errors.push_back("sweep.path: required string");
    if (auto it = j.find("values"); it != j.end() && it->is_array()) {
        for (const auto& v : *it) {
            if (v.is_number())
                s.values.push_back(v.get<double>());
            else
                errors.push_back("sweep.values: must hold numbers");
        }
    } else {
        errors.push_back("sweep.values: required array");
    }
    if (auto it = j.find("overrides"); it != j.end()) {
        if (it->is_object())
            s.overrides = *it;
        else
            errors.push_back("sweep.overrides: must be an object");
    }
    if (auto it = j.find("per_value"); it != j.end()) {
        if (!it->is_array() || it->size() != s.values.size()) {
            errors.push_back("sweep.per_value: must be an array with one object per value");
        } else {
            for (const auto& p : *it) {
                if (p.is_object())
                    s.per_value.push_back(p);
                else
                    errors.push_back("sweep.per_value: entries must be objects");
            }
        }
    }
    if (!errors.empty())
        throw ValidationError(errors);
    return s;
}

double NoiseScale::noise_rate_hz(double db, double probe_qe) const
{
    return signal_rate_hz * std::pow(10.0, db / 10.0) / (probe_qe * window_fraction);
}

NoiseScale calibrate_noise_scale(const json& scenario, int threads)
{
    auto pilot_doc = scenario;
    set_json_path(pilot_doc, "channels.noise_rate_hz", 0.0);
    pilot_doc["configurations"] = {Configuration{true, false}.label(), Configuration{false, false}.label()};
    const auto pilot = parse_scenario(pilot_doc);
    const auto sim = simulate(pilot, threads);
    const auto rep = analyze(pilot, sim.streams);
    double signal = 0.0, width = 0.0;
    for (const auto& t : rep.targets) {
        double on = 0.0, off = 0.0;
        for (const auto& [label, wc] : t.counts)
            (label == Configuration{true, false}.label() ? on : off) = static_cast<double>(wc.n_sc);
        signal += on - off;
        width += probe_window_width(t.target.window);
    }
    if (rep.targets.empty()) {
        for (const auto& [c, s] : sim.streams)
            signal += (c.probe_on ? 1.0 : -1.0) * static_cast<double>(count_channel(s, Channel::Probe));
        width = pilot.pump.period_ps();
    }
    NoiseScale out;
    out.signal_rate_hz = signal / pilot.duration_s();
    out.window_fraction = std::min(1.0, width / pilot.pump.period_ps());
    if (!(out.signal_rate_hz > 0.0) || !(out.window_fraction > 0.0))
        throw AnalysisError("noise-intensity calibration: scenario produces no probe signal counts");
    return out;
}

std::vector<SweepRow> sweep(const json& scenario, const SweepSpec& spec, int threads)
{
    json base = scenario;
    base.merge_patch(spec.overrides);
    const bool by_db = spec.path == "noise_intensity_db";
    if (!by_db) {
        // Fail early if the path does not name a scenario field.
        json probe = base;
        set_json_path(probe, spec.path, spec.values.empty() ? json(0.0) : json(spec.values.front()));
        parse_scenario(probe);
    }

    std::optional<NoiseScale> scale;
    if (by_db && !spec.values.empty())
        scale = calibrate_noise_scale(base, threads);

    if (!spec.per_value.empty() && spec.per_value.size() != spec.values.size())
        throw ValidationError({"sweep.per_value: must hold one object per value"});

    std::vector<SweepRow> out;
    for (std::size_t k = 0; k < spec.values.size(); ++k) {
        const double v = spec.values[k];
        json doc = base;
        if (!spec.per_value.empty())
            doc.merge_patch(spec.per_value[k]);
        if (by_db) {
            const double qe = parse_scenario(doc).probe_detector.quantum_efficiency;
            set_json_path(doc, "channels.noise_rate_hz", scale->noise_rate_hz(v, qe));
        } else {
            set_json_path(doc, spec.path, v);
        }
        const auto cfg = parse_scenario(doc);
        const auto sim = simulate(cfg, threads);
        const auto rep = analyze(cfg, sim.streams);
        for (const auto& t : rep.targets) {
            SweepRow row;
            row.value = v;
            row.target = t.target.window.label;
            row.direction_deg = t.target.direction_deg;
            row.distance_m = t.target.distance_m;
            row.noise_rate_hz = cfg.channels.noise_rate_hz;
            row.snr_c = t.snr_c;
            row.snr_q = t.snr_q;
            row.esnr = t.esnr;
            row.car = t.car.car;
            row.car_lower_bound = t.car.lower_bound;
            row.noise_db = t.noise_db;
            out.push_back(row);
        }
    }
    return out;
}

std::string sweep_csv_header()
{
    return "value,target,direction_deg,distance_m,snr_c,snr_c_sigma,snr_q,snr_q_sigma,esnr,esnr_sigma,car,"
           "car_lower_bound,noise_db,noise_rate_hz";
}

std::string sweep_csv_row(const SweepRow& r)
{
    std::ostringstream os;
    os.precision(10);
    auto est = [&](const std::optional<Estimate>& e) {
        if (e)
            os << e->value << ',' << e->sigma;
        else
            os << ',';
    };
    os << r.value << ',' << r.target << ',' << r.direction_deg << ',' << r.distance_m << ',';
    est(r.snr_c);
    os << ',';
    est(r.snr_q);
    os << ',';
    est(r.esnr);
    os << ',' << r.car << ',' << (r.car_lower_bound ? 1 : 0) << ',';
    if (r.noise_db)
        os << *r.noise_db;
    os << ',' << r.noise_rate_hz;
    return os.str();
}

}  // namespace qep

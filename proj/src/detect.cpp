#include "qep/detect.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "qep/channel.hpp"

namespace qep {

namespace {

constexpr char kMagic[4] = {'Q', 'T', 'T', '1'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v)
{
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p)
{
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | p[i];
    return v;
}

}  // namespace

const char* channel_name(Channel c)
{
    switch (c) {
    case Channel::Ref:
        return "REF";
    case Channel::Herald:
        return "HERALD";
    case Channel::Probe:
        return "PROBE";
    }
    return "?";
}

std::string to_hex(const Fingerprint& f)
{
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (auto b : f) {
        s.push_back(kDigits[b >> 4]);
        s.push_back(kDigits[b & 0xf]);
    }
    return s;
}

Fingerprint fingerprint_from_hex(const std::string& hex)
{
    if (hex.size() != 64)
        throw std::invalid_argument("fingerprint must be 64 hex digits");
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9')
            return c - '0';
        if (c >= 'a' && c <= 'f')
            return c - 'a' + 10;
        if (c >= 'A' && c <= 'F')
            return c - 'A' + 10;
        throw std::invalid_argument("fingerprint contains a non-hex digit");
    };
    Fingerprint f{};
    for (std::size_t i = 0; i < 32; ++i)
        f[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
    return f;
}

std::optional<Picoseconds> detect_arrival(double arrival_ps, const DetectorSpec& spec, CounterRng& rng,
                                          DetectDiagnostics& diag)
{
    if (!rng.bernoulli(spec.quantum_efficiency))
        return std::nullopt;
    double t = arrival_ps;
    if (spec.jitter_fwhm_ps > 0.0)
        t += rng.normal() * (spec.jitter_fwhm_ps / kFwhmPerSigma);
    auto ts = static_cast<Picoseconds>(std::llround(t));
    if (ts < 0) {
        ++diag.clipped_negative;
        ts = 0;
    }
    return ts;
}

void apply_dead_time(std::vector<Picoseconds>& timestamps, Picoseconds dead_time, DetectDiagnostics& diag)
{
    if (dead_time <= 0 || timestamps.empty())
        return;
    std::size_t kept = 1;
    Picoseconds last = timestamps.front();
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
        if (timestamps[i] - last < dead_time) {
            ++diag.dropped_dead_time;
            continue;
        }
        last = timestamps[i];
        timestamps[kept++] = last;
    }
    timestamps.resize(kept);
}

std::vector<TimeTag> detect_channel(std::span<const double> true_arrivals_ps, Channel channel,
                                    const DetectorSpec& spec, Picoseconds duration, std::uint64_t seed,
                                    DetectDiagnostics* diag)
{
    DetectDiagnostics local;
    const auto id = static_cast<std::uint64_t>(channel);
    CounterRng rng(seed, id, Substream::Standalone);
    CounterRng dark_rng(seed, id, static_cast<std::uint32_t>(Substream::Standalone) + 1);

    std::vector<Picoseconds> times;
    times.reserve(true_arrivals_ps.size());
    for (double a : true_arrivals_ps)
        if (auto ts = detect_arrival(a, spec, rng, local))
            times.push_back(*ts);

    std::vector<double> darks;
    sample_uniform_arrivals(0.0, static_cast<double>(duration), spec.dark_rate_hz, dark_rng, darks);
    DetectorSpec dark_spec = spec;
    dark_spec.quantum_efficiency = 1.0;
    for (double d : darks)
        if (auto ts = detect_arrival(d, dark_spec, dark_rng, local))
            times.push_back(*ts);

    std::sort(times.begin(), times.end());
    while (!times.empty() && times.back() >= duration) {
        times.pop_back();
        ++local.dropped_past_end;
    }
    apply_dead_time(times, spec.dead_time_ps, local);

    std::vector<TimeTag> out;
    out.reserve(times.size());
    for (auto t : times)
        out.push_back({channel, t});
    if (diag)
        *diag += local;
    return out;
}

TagStream merge_streams(std::span<const std::vector<TimeTag>> channels, Picoseconds duration)
{
    std::size_t total = 0;
    for (std::size_t c = 0; c < channels.size(); ++c) {
        const auto& list = channels[c];
        for (std::size_t i = 1; i < list.size(); ++i)
            if (list[i].timestamp < list[i - 1].timestamp)
                throw std::invalid_argument("merge_streams: input list " + std::to_string(c)
                                            + " is not sorted at index " + std::to_string(i));
        total += list.size();
    }

    TagStream out;
    out.duration = duration;
    out.tags.reserve(total);
    std::vector<std::size_t> pos(channels.size(), 0);
    for (std::size_t n = 0; n < total; ++n) {
        std::size_t best = channels.size();
        for (std::size_t c = 0; c < channels.size(); ++c) {
            if (pos[c] >= channels[c].size())
                continue;
            if (best == channels.size())
                best = c;
            else {
                const auto& a = channels[c][pos[c]];
                const auto& b = channels[best][pos[best]];
                if (a.timestamp < b.timestamp || (a.timestamp == b.timestamp && a.channel < b.channel))
                    best = c;
            }
        }
        out.tags.push_back(channels[best][pos[best]++]);
    }
    return out;
}

std::vector<std::uint8_t> encode_tags(const TagStream& stream)
{
    std::vector<std::uint8_t> out;
    out.reserve(kTagHeaderSize + stream.tags.size() * kTagRecordSize);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kTagFormatVersion);
    put_u64(out, stream.period_ps);
    put_u64(out, stream.tags.size());
    out.insert(out.end(), stream.fingerprint.begin(), stream.fingerprint.end());
    for (const auto& t : stream.tags) {
        out.push_back(static_cast<std::uint8_t>(t.channel));
        put_u64(out, static_cast<std::uint64_t>(t.timestamp));
    }
    return out;
}

TagStream decode_tags(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("bad magic, expected QTT1", 0);
    if (bytes.size() < kTagHeaderSize)
        throw FormatError("truncated header", bytes.size());
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
    if (version != kTagFormatVersion)
        throw FormatError("unsupported format version " + std::to_string(version), 4);

    TagStream s;
    s.period_ps = get_u64(bytes.data() + 6);
    const std::uint64_t count = get_u64(bytes.data() + 14);
    std::copy_n(bytes.data() + 22, 32, s.fingerprint.begin());

    const std::uint64_t payload = bytes.size() - kTagHeaderSize;
    if (payload / kTagRecordSize < count) {
        const std::uint64_t complete = payload / kTagRecordSize;
        throw FormatError("truncated record " + std::to_string(complete) + " of " + std::to_string(count),
                          kTagHeaderSize + complete * kTagRecordSize);
    }
    if (payload != count * kTagRecordSize)
        throw FormatError("trailing bytes after last record", kTagHeaderSize + count * kTagRecordSize);

    s.tags.resize(count);
    const std::uint8_t* p = bytes.data() + kTagHeaderSize;
    for (std::uint64_t i = 0; i < count; ++i, p += kTagRecordSize) {
        const std::uint64_t offset = kTagHeaderSize + i * kTagRecordSize;
        if (p[0] > 2)
            throw FormatError("invalid channel id " + std::to_string(p[0]), offset);
        const auto ts = static_cast<Picoseconds>(get_u64(p + 1));
        if (ts < 0)
            throw FormatError("negative timestamp", offset + 1);
        if (i > 0 && ts < s.tags[i - 1].timestamp)
            throw FormatError("unsorted payload", offset);
        s.tags[i] = {static_cast<Channel>(p[0]), ts};
    }
    s.duration = s.tags.empty() ? 0 : s.tags.back().timestamp + 1;
    return s;
}

void write_tags(const TagStream& stream, const std::filesystem::path& path)
{
    const auto bytes = encode_tags(stream);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os)
        throw std::ios_base::failure("write failed: " + path.string());
}

TagStream read_tags(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is)
        throw std::ios_base::failure("cannot open " + path.string());
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(is.tellg()));
    is.seekg(0);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is)
        throw std::ios_base::failure("read failed: " + path.string());
    return decode_tags(bytes);
}

void write_tags_csv(const TagStream& stream, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::trunc);
    if (!os)
        throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    os << "channel,timestamp_ps\n";
    for (const auto& t : stream.tags)
        os << static_cast<int>(t.channel) << ',' << t.timestamp << '\n';
}

}  // namespace qep

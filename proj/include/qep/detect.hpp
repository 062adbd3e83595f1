#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qep/model.hpp"
#include "qep/random.hpp"

namespace qep {

struct DetectorSpec {
    double quantum_efficiency = 1.0;
    double jitter_fwhm_ps = 0.0;
    double dark_rate_hz = 0.0;
    Picoseconds dead_time_ps = 0;
};

enum class Channel : std::uint8_t { Ref = 0, Herald = 1, Probe = 2 };

const char* channel_name(Channel c);

struct TimeTag {
    Channel channel = Channel::Ref;
    Picoseconds timestamp = 0;

    friend bool operator==(const TimeTag&, const TimeTag&) = default;
};

using Fingerprint = std::array<std::uint8_t, 32>;

std::string to_hex(const Fingerprint& f);
Fingerprint fingerprint_from_hex(const std::string& hex);

struct TagStream {
    std::vector<TimeTag> tags;
    /// Pump repetition period rounded to integer ps (informational).
    std::uint64_t period_ps = 0;
    /// Recording length. Not persisted: read_tags sets it to last tag + 1.
    Picoseconds duration = 0;
    Fingerprint fingerprint{};
};

/// Counters for events altered at the edges of the recording window.
struct DetectDiagnostics {
    std::uint64_t clipped_negative = 0;
    std::uint64_t dropped_past_end = 0;
    std::uint64_t dropped_dead_time = 0;

    DetectDiagnostics& operator+=(const DetectDiagnostics& o)
    {
        clipped_negative += o.clipped_negative;
        dropped_past_end += o.dropped_past_end;
        dropped_dead_time += o.dropped_dead_time;
        return *this;
    }
};

/// Thinning and Gaussian jitter for one arrival; nothing if not detected.
/// Negative results are clipped to zero and counted.
std::optional<Picoseconds> detect_arrival(double arrival_ps, const DetectorSpec& spec, CounterRng& rng,
                                          DetectDiagnostics& diag);

/// Removes tags that fall inside the dead time of an earlier accepted tag.
/// `timestamps` must be sorted.
void apply_dead_time(std::vector<Picoseconds>& timestamps, Picoseconds dead_time, DetectDiagnostics& diag);

/// Full detector model for one channel over [0, duration): thinning, jitter,
/// dark counts, dead time. Output sorted.
std::vector<TimeTag> detect_channel(std::span<const double> true_arrivals_ps, Channel channel,
                                    const DetectorSpec& spec, Picoseconds duration, std::uint64_t seed,
                                    DetectDiagnostics* diag = nullptr);

/// k-way merge of per-channel sorted tag lists. Equal timestamps order as
/// REF < HERALD < PROBE. Throws std::invalid_argument on unsorted input.
TagStream merge_streams(std::span<const std::vector<TimeTag>> channels, Picoseconds duration);

class FormatError : public std::runtime_error {
  public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset)
    {
    }
    std::uint64_t offset() const { return offset_; }

  private:
    std::uint64_t offset_;
};

inline constexpr std::uint16_t kTagFormatVersion = 1;
inline constexpr std::size_t kTagHeaderSize = 4 + 2 + 8 + 8 + 32;
inline constexpr std::size_t kTagRecordSize = 1 + 8;

void write_tags(const TagStream& stream, const std::filesystem::path& path);
TagStream read_tags(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_tags(const TagStream& stream);
TagStream decode_tags(std::span<const std::uint8_t> bytes);

/// `channel,timestamp_ps` rows, channel as 0/1/2.
void write_tags_csv(const TagStream& stream, const std::filesystem::path& path);

}  // namespace qep

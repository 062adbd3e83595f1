#pragma once

#include <array>
#include <cstdint>

namespace qep {

/// Philox4x32-10 block function (Salmon et al., SC'11).
using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key);

/// Independent random substreams of one pulse. Values are part of the
/// on-disk reproducibility contract; never renumber.
enum class Substream : std::uint32_t {
    Emission = 1,
    ProbePath = 2,
    HeraldPath = 3,
    Noise = 4,
    ProbeDetector = 5,
    HeraldDetector = 6,
    ReferenceDetector = 7,
    ProbeDark = 8,
    HeraldDark = 9,
    NoiseDetector = 10,
    Standalone = 100,
};

/// Counter-based generator: the stream for (seed, index, substream) is a
/// pure function of those three values, so pulses can be evaluated in any
/// order on any thread and still produce identical draws.
class CounterRng {
  public:
    CounterRng(std::uint64_t seed, std::uint64_t index, Substream sub)
        : CounterRng(seed, index, static_cast<std::uint32_t>(sub))
    {
    }
    CounterRng(std::uint64_t seed, std::uint64_t index, std::uint32_t sub);

    std::uint64_t next_u64();
    /// Uniform on the open interval (0, 1).
    double uniform();
    double normal();
    double exponential();
    bool bernoulli(double p) { return p >= 1.0 || (p > 0.0 && uniform() < p); }
    std::uint64_t poisson(double mean);

  private:
    void refill();

    PhiloxKey key_;
    PhiloxCounter ctr_;
    PhiloxCounter block_{};
    int used_ = 4;
    bool have_spare_normal_ = false;
    double spare_normal_ = 0.0;
};

}  // namespace qep

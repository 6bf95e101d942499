#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bdl {

// Derives an independent seed for a named pipeline stream ("corpus",
// "poison", "init", ...) from the global seed. Stable across platforms.
std::uint64_t sub_seed(std::uint64_t seed, std::string_view stream);

// Seed for element `index` of a stream, so per-sample randomness does not
// depend on iteration order.
std::uint64_t indexed_seed(std::uint64_t seed, std::uint64_t index);

// mt19937_64 with platform-independent uniform draws. The standard
// distributions are implementation-defined, so they are avoided here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer on [0, n); n > 0.
    std::uint64_t below(std::uint64_t n);

    // Uniform integer on [lo, hi].
    std::int64_t between(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace bdl

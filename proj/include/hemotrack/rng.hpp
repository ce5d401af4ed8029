#pragma once

#include <cmath>
#include <cstdint>

#include "hemotrack/common.hpp"

namespace hemo {

// Deterministic splitmix64-based generator. All randomness in the project goes
// through this class so that identical seeds give identical bytes on any
// platform (std::<distribution> implementations are not portable).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        HEMO_CHECK(lo <= hi, "uniform_int: empty range [", lo, ", ", hi, "]");
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    // Box-Muller, one value per call (the spare is kept).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent stream derived from this generator's seed and a tag.
    Rng fork(uint64_t tag) const {
        Rng mixer(state_ ^ (0xA0761D6478BD642FULL * (tag + 1)));
        return Rng(mixer.next_u64());
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable 64-bit hash for deriving per-item seeds from (seed, ordinal) pairs.
inline uint64_t mix_seed(uint64_t seed, uint64_t ordinal) {
    Rng r(seed ^ (0x9E3779B97F4A7C15ULL * (ordinal + 0x51ED270B7A53C4BBULL)));
    return r.next_u64();
}

}  // namespace hemo

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace hiflow {

// Deterministic RNG used everywhere instead of <random> distributions, whose
// outputs are implementation-defined. Same seed, same stream, any platform.
//
// Core generator is splitmix64; normals come from Box-Muller on 53-bit
// uniforms. Streams for independent purposes are derived by mixing a seed
// with a stream tag, so e.g. dataset shuffling is a pure function of
// (seed, epoch) regardless of which thread asks for it.

inline uint64_t splitmix64_next(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// One-shot mix of two 64-bit values into a stream seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + (tag << 6) + (tag >> 2));
    splitmix64_next(s);
    return splitmix64_next(s);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {
        // burn-in so trivially related seeds decorrelate
        splitmix64_next(state_);
    }

    static Rng from_stream(uint64_t seed, uint64_t tag) { return Rng(mix_seed(seed, tag)); }

    uint64_t next_u64() { return splitmix64_next(state_); }

    // uniform in [0, 1) with 53 bits of mantissa
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // index in [0, n)
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; u clamped away from 0 so log stays finite
        double u = uniform01();
        if (u < 1e-300) u = 1e-300;
        const double v = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * v);
        has_spare_ = true;
        return r * std::cos(two_pi * v);
    }

    template <typename T>
    void fill_normal(T* dst, size_t n, double std_dev = 1.0) {
        for (size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(normal() * std_dev);
    }

    // Fisher-Yates; order is a pure function of this stream's seed.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    uint64_t state_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace hiflow

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ccis {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256++ with splitmix64 seeding. All randomness in the project flows
// through this generator so results are bit-stable across platforms and runs;
// std::<distribution> types are implementation-defined and never used.
class Rng {
  public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    uint64_t uniform_int(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the second value is discarded so the
    // generator state is exactly the four words above (serializable, forkable).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent stream derived from this seed and a stream id; the parent
    // state is not advanced.
    Rng fork(uint64_t stream) const {
        uint64_t x = s_[0] ^ rotl(s_[2], 13) ^ (stream * 0x9e3779b97f4a7c15ULL);
        Rng r;
        for (auto& w : r.s_) w = splitmix64(x);
        return r;
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

// Stable derivation of a stream seed from a base seed and labels, used to make
// batch composition, noise draws, etc. pure functions of (seed, step).
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
    uint64_t x = base;
    splitmix64(x);
    x ^= 0x6a09e667f3bcc909ULL + a;
    splitmix64(x);
    x ^= 0xbb67ae8584caa73bULL + b;
    return splitmix64(x);
}

}  // namespace ccis

// Seeded deterministic RNG: xoshiro256** with splitmix64 seeding.
//
// The standard library's engines are portable but its distributions are not,
// so uniform/normal draws are constructed here from raw 64-bit outputs and
// behave identically on every platform.

#pragma once

#include <cmath>
#include <cstdint>

namespace infill {

inline uint64_t splitmix64(uint64_t &state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// One-shot mix of two words; used to derive independent sub-streams.
inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto &word : s_) {
            word = splitmix64(sm);
        }
    }

    // Derive an independent stream, e.g. per document or per step.
    Rng fork(uint64_t stream_id) const {
        return Rng(mix64(s_[0] ^ s_[3], stream_id));
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n) by rejection; unbiased and portable.
    uint64_t below(uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t r = next_u64();
        while (r >= limit) {
            r = next_u64();
        }
        return r % n;
    }

    // Box-Muller (cosine branch only, so every draw consumes exactly two u64s).
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - next_double(); // (0, 1]; avoids log(0)
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        return mean + stddev * r * std::cos(theta);
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

  private:
    static uint64_t rotl_(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t s_[4];
};

} // namespace infill

// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_RNG_H
#define REFSEG_RNG_H

#include <array>
#include <cmath>
#include <cstdint>

namespace refseg {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes a sequence of 64-bit keys into one stream seed. Used to derive
// independent deterministic streams (per sample, per step, per shard)
// from a single config seed.
inline uint64_t mix_keys(uint64_t a, uint64_t b, uint64_t c = 0, uint64_t d = 0) {
    uint64_t s = a;
    uint64_t out = splitmix64(s);
    s ^= b * 0x9e3779b97f4a7c15ULL;
    out ^= splitmix64(s);
    s ^= c * 0xc2b2ae3d27d4eb4fULL;
    out ^= splitmix64(s);
    s ^= d * 0x165667b19e3779f9ULL;
    out ^= splitmix64(s);
    return out;
}

// xoshiro256** — deterministic across platforms, 4x u64 state.
// std::mt19937 distributions are not portable, so sampling is hand-rolled.
class Rng {
public:
    explicit Rng(uint64_t seed = 1) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, n), unbiased enough for data generation (multiply-shift).
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    int next_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    double next_double() { // [0,1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller, no cached spare so state stays trivially serializable.
    double normal() {
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<int64_t>(last - first);
        for (int64_t i = n - 1; i > 0; i--) {
            int64_t j = static_cast<int64_t>(next_below(static_cast<uint64_t>(i + 1)));
            std::swap(first[i], first[j]);
        }
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> state_{};
};

} // namespace refseg

#endif // REFSEG_RNG_H

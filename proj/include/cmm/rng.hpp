#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace cmm {

namespace detail {
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
}  // namespace detail

// Counter-based splitmix64 stream. The entire generator state is one u64, so
// streams serialize exactly and can be forked cheaply.
class Rng {
public:
    Rng() : state_(0) {}
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return detail::mix64(state_);
    }

    // [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller, two uniforms per draw, no cached spare (keeps the stream
    // position a pure function of the number of draws).
    double gaussian() {
        double u1 = 1.0 - uniform();  // (0, 1], log stays finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    // Normal(0, stddev) truncated to |x| <= 2*stddev by resampling.
    double trunc_normal(double stddev) {
        for (;;) {
            double g = gaussian();
            if (std::fabs(g) <= 2.0) return g * stddev;
        }
    }

    // Uniform integer in [0, n), n >= 1. Multiply-shift, deterministic.
    int uniform_int(int n) {
        return int((static_cast<unsigned __int128>(next_u64()) *
                    static_cast<unsigned __int128>(uint64_t(n))) >> 64);
    }

    // +1 or -1 with equal probability.
    double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(p[i], p[j]);
        }
        return p;
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

inline uint64_t hash_tag(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : s) {
        h ^= uint8_t(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic stream derivation: independent child streams from a base seed
// plus up to three tags (indices, counters, hashed names).
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0,
                            uint64_t c = 0) {
    uint64_t h = detail::mix64(base + 0x9e3779b97f4a7c15ull);
    h = detail::mix64(h ^ (a + 0xbf58476d1ce4e5b9ull));
    h = detail::mix64(h ^ (b + 0x94d049bb133111ebull));
    h = detail::mix64(h ^ (c + 0x2545f4914f6cdd1dull));
    return h;
}

}  // namespace cmm

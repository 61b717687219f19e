#pragma once

// Counter-based pseudo-random generator. Each output is a hash of
// (key, counter), so a stream can be forked into independent named
// sub-streams and replayed exactly from its seed.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace coved {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    std::uint64_t next_u64() {
        ++counter_;
        return mix(key_ + 0x9e3779b97f4a7c15ull * counter_);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; consumes exactly two draws
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // uniform integer in [0, n), rejection sampled
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return r % n;
    }

    // independent stream derived from this one's key and a tag
    Rng fork(std::string_view tag) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        Rng out(0);
        out.key_ = mix(key_ ^ h);
        out.counter_ = 0;
        return out;
    }

private:
    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace coved

#pragma once

#include <cmath>
#include <cstdint>

namespace cimt {

// splitmix64 finalizer. Used both as a hash and as the generator step.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream key from (seed, index). Counter-based:
// sample i's stream never depends on how many draws sample i-1 made.
inline uint64_t mix_key(uint64_t seed, uint64_t index) {
    return splitmix64(seed ^ splitmix64(index ^ 0x51a4c7e8d2f0b693ULL));
}

inline uint64_t mix_key(uint64_t seed, uint64_t a, uint64_t b) {
    return mix_key(mix_key(seed, a), b);
}

// Small deterministic generator over a splitmix64 state walk.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    static Rng keyed(uint64_t seed, uint64_t index) { return Rng(mix_key(seed, index)); }
    static Rng keyed(uint64_t seed, uint64_t a, uint64_t b) { return Rng(mix_key(seed, a, b)); }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // log-uniform over [lo, hi], lo > 0
    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller; uniform() can return 0, shift into (0, 1]
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // [0, n)
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a over raw bytes; used for content hashes in logs and tests.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace cimt

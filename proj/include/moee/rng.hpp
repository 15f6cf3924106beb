#pragma once

#include <cmath>
#include <cstdint>

namespace moee {

/// xoshiro256** seeded through splitmix64. Fully specified here so that
/// every stream is byte-reproducible across platforms and standard-library
/// versions; no std::random distribution is used anywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : s_) word = splitmix64(x);
        have_spare_ = false;
    }

    /// Derive an independent stream for a named purpose (dataset, training
    /// noise, sampling, ...) from an experiment seed.
    static Rng stream(uint64_t seed, uint64_t stream_id) {
        uint64_t x = seed;
        uint64_t a = splitmix64(x);
        x = a ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1));
        return Rng(splitmix64(x));
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n). n must be > 0.
    int64_t below(int64_t n) {
        // Modulo bias is irrelevant at desk scale (n << 2^64).
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    /// Standard normal via Box-Muller (deterministic, platform-independent
    /// up to libm sin/cos/log rounding on the fixed platform).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double spare_ = 0.0;
    bool have_spare_;
};

}  // namespace moee

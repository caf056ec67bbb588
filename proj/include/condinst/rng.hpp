#pragma once

#include <cstdint>
#include <random>

namespace condinst {

/// Seedable generator with a fully specified bit stream so datasets and
/// initializations regenerate identically everywhere. The raw stream is
/// mt19937_64; derived draws avoid std::*_distribution (whose outputs vary
/// between standard libraries):
///   - uniform01: high 53 bits scaled by 2^-53
///   - uniform_int(lo,hi): 64-bit modulo of the raw draw
///   - normal: Box-Muller on two uniform01 draws
/// The algorithm tag below is recorded in dataset manifests.
class Rng {
public:
    static constexpr const char* kAlgorithm = "mt19937_64/u53/box-muller";

    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    double uniform01() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Inclusive on both ends.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi <= lo) return lo;
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Stream splitting for per-scene generators: mixes (seed, index) with
    /// splitmix64 so scenes are independent of generation order.
    static uint64_t mix(uint64_t seed, uint64_t index) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace condinst

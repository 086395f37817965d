#pragma once

#include <cmath>
#include <cstdint>

namespace quantstat {

/// SplitMix64 pseudo-random generator (Steele, Lea & Flood 2014).
///
/// The algorithm is fixed and self-contained, so every sequence is bit-stable
/// across platforms, compilers and standard-library versions. All randomized
/// components (bootstrap resampling, synthetic data generation, A/A splits)
/// draw from this generator; none use std:: distributions, whose output is
/// implementation-defined.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in the open interval (0, 1).
    double next_unit() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Multiply-shift bounded draw; the bias of
    /// at most n/2^64 is irrelevant at the sizes used here.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    /// Standard normal draw via the Box-Muller transform (cosine branch).
    /// Consumes exactly two uniforms.
    double next_normal() {
        const double u1 = next_unit();
        const double u2 = next_unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    uint64_t state_;
};

/// 64-bit finalizer used to derive independent substreams.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Deterministic substream for (seed, index). Replicate k of a bootstrap,
/// member i of a generator and dataset d of an evaluation each get their own
/// stream, so parallel execution order cannot change any result.
inline SplitMix64 substream(uint64_t seed, uint64_t index) {
    return SplitMix64(mix64(seed ^ 0x9E3779B97F4A7C15ULL) ^ mix64(index + 0x632BE59BD9B4E019ULL));
}

} // namespace quantstat

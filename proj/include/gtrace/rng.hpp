// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_RNG_HPP
#define GTRACE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace gtrace {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser. Used to derive independent module seeds from one global seed.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Seed for the named stream `stream` under `global_seed`.
constexpr std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return splitmix64(global_seed ^ splitmix64(h));
}

// The standard distributions are implementation-defined; these are not, so
// generated scenes are identical across standard libraries.

/// Uniform double in [0, 1).
inline double uniform01(Rng &rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng &rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng &rng, std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return r % n;
}

/// Standard normal sample (Box-Muller, one value per call).
inline double standard_normal(Rng &rng) {
    double u1;
    do {
        u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

} // namespace gtrace

#endif // GTRACE_RNG_HPP

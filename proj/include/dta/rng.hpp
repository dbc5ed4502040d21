// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dta {

using Rng = std::mt19937_64;

constexpr uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Seed of a named sub-stream ("data", "init", "attack", ...) of a run
/// seed. `index` separates per-sample streams inside one name.
constexpr uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index = 0) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return splitmix64(splitmix64(seed ^ h) + index);
}

inline Rng make_rng(uint64_t seed, std::string_view stream, uint64_t index = 0) {
    return Rng(derive_seed(seed, stream, index));
}

// Normal(0, sigma) truncated to +-2 sigma by rejection.
inline float truncated_normal(Rng& rng, float sigma) {
    std::normal_distribution<double> d(0.0, 1.0);
    for (;;) {
        const double z = d(rng);
        if (z >= -2.0 && z <= 2.0) return static_cast<float>(z * sigma);
    }
}

} // namespace dta

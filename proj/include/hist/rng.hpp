#pragma once

#include <cstdint>
#include <random>

namespace hist {

// splitmix64; used to derive independent seeds from (base, stream) pairs so
// datasets, model init and training order never share a stream by accident.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base + splitmix64(stream));
}

using Rng = std::mt19937_64;

inline size_t uniform_index(Rng& rng, size_t n) {
    return std::uniform_int_distribution<size_t>(0, n - 1)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gauss(Rng& rng, double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(rng);
}

}  // namespace hist

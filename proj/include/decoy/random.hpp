#pragma once

#include <cstdint>
#include <random>

#include "decoy/tensor.hpp"

namespace decoy {

using Rng = std::mt19937_64;

/// Independent stream for (seed, stream) pairs; splitmix-style mixing so
/// neighbouring seeds do not produce correlated engines.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + stream * 0xD1B54A32D192ED03ull + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
    return Rng(z);
}

template <class T>
Tensor<T> randn(Shape shape, Rng& rng, T stddev = T(1)) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng) * static_cast<double>(stddev));
    return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

inline int uniform_int(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace decoy

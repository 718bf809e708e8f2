#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "ba2m/core/tensor.hpp"

namespace ba2m {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream); streams with different ids do not overlap in
/// practice because the state is seeded through a splitmix64 mix of both values.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    std::seed_seq seq{mix(seed), mix(seed ^ mix(stream + 1)), mix(stream)};
    return Rng(seq);
}

template <typename T>
void fill_uniform(Tensor<T>& t, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, double mean, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
}

/// Uniform in +-sqrt(6 / fan_in); keeps layer outputs O(1) at initialisation.
template <typename T>
void fill_fan_in_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    fill_uniform(t, -bound, bound, rng);
}

template <typename T>
Tensor<T> random_uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor<T> t(std::move(shape));
    fill_uniform(t, lo, hi, rng);
    return t;
}

}  // namespace ba2m

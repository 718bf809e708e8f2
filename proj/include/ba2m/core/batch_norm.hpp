#pragma once

#include <string>

#include "ba2m/core/parameter.hpp"
#include "ba2m/core/tensor.hpp"

namespace ba2m {

enum class Mode { train, eval };

inline const char* to_string(Mode m) { return m == Mode::train ? "train" : "eval"; }

/// Running statistics of a batch-norm layer. Defaults to (mean 0, var 1) until the first
/// train-mode step; eval before that is allowed but logged.
template <typename T>
struct BatchNormStats {
    explicit BatchNormStats(std::size_t channels = 1, double eps = 1e-5, double momentum = 0.1)
        : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}), eps(eps), momentum(momentum) {}

    Tensor<T> running_mean;
    Tensor<T> running_var;
    double eps;
    double momentum;
    bool initialized = false;
    bool warned = false;
};

/// Affine parameters plus running statistics for one normalised tensor.
template <typename T>
struct BatchNorm {
    BatchNorm() = default;
    BatchNorm(const std::string& prefix, std::size_t channels, double eps = 1e-5, double momentum = 0.1)
        : gamma(prefix + ".gamma", Tensor<T>(Shape{channels}, T{1})),
          beta(prefix + ".beta", Tensor<T>(Shape{channels}, T{0})),
          stats(channels, eps, momentum) {}

    std::size_t channels() const { return gamma.numel(); }

    Parameter<T> gamma;
    Parameter<T> beta;
    BatchNormStats<T> stats;
};

}  // namespace ba2m

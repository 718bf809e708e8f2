#pragma once

#include <algorithm>
#include <string>
#include <utility>

#include "ba2m/core/tensor.hpp"

namespace ba2m {

/// A trainable tensor with its accumulated gradient. The name is a dotted path unique
/// within a network, e.g. "block2.ba2m.ac.fc0.weight".
template <typename T>
struct Parameter {
    Parameter() = default;
    Parameter(std::string name, Tensor<T> value)
        : name(std::move(name)), value(std::move(value)), grad(this->value.shape()) {}

    void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), T{0}); }
    std::size_t numel() const { return value.numel(); }

    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

}  // namespace ba2m

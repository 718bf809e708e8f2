#pragma once

#include <optional>
#include <span>

#include "ba2m/core/batch_norm.hpp"
#include "ba2m/core/tape.hpp"

/// Differentiable tensor ops. Every op records its output and an explicit backward closure
/// on the tape that owns its inputs, along with its FLOP count under the op-cost table:
///
///   conv2d          2 * N * C_out * H_out * W_out * (C_in / groups) * k * k
///   fully_connected 2 * N * C_in * C_out, plus N * C_out with bias
///   matmul          2 * batch * M * K * P
///   batch_norm      2 per element
///   global_avg_pool 1 per input element
///   softmax         3 per element
///   max3            2 per output element
///   reduce_mean     1 per input element
///   relu, add, scale_samples, scale: 1 per element
///   reshape         0
namespace ba2m::ops {

/// Grouped 2-D cross-correlation. kernel is [C_out, C_in/groups, k, k] with k in {1, 3} and
/// padding must equal (k-1)/2. Stride 1 preserves H and W; stride 2 halves them (rounding up).
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t groups, std::size_t padding, std::size_t stride = 1);

/// [N,C,H,W] -> [N,C,1,1], mean over each plane.
template <typename T>
Var<T> global_avg_pool(Var<T> input);

/// [N,C_in] x weight [C_out,C_in] (+ bias [C_out]) -> [N,C_out].
template <typename T>
Var<T> fully_connected(Var<T> input, Var<T> weight, std::optional<Var<T>> bias = std::nullopt);

/// Per-channel normalisation over every axis except 1. Accepts [N,C] or [N,C,H,W].
/// Train mode uses batch statistics (biased variance) and updates the running estimates
/// with the unbiased variance; eval mode uses the running estimates.
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, Mode mode);

/// Batched product over leading dims: [..,M,K] x [..,K,P] -> [..,M,P]. The transpose flags
/// read the last two dims of the respective operand swapped.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a = false, bool transpose_b = false);

/// Max-subtracted softmax along `axis`.
template <typename T>
Var<T> softmax(Var<T> input, std::size_t axis);

/// Elementwise maximum of three equally shaped tensors. The gradient goes to the first
/// operand (in order a, b, c) holding the maximum.
template <typename T>
Var<T> max3(Var<T> a, Var<T> b, Var<T> c);

/// Mean along `axis`; the axis is removed (a rank-1 input yields shape [1]).
template <typename T>
Var<T> reduce_mean(Var<T> input, std::size_t axis);

template <typename T>
Var<T> relu(Var<T> input);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Multiplies every element by a constant.
template <typename T>
Var<T> scale(Var<T> input, T factor);

/// Sample i of `input` ([N,...]) multiplied by weights[i]. Both operands are differentiated.
template <typename T>
Var<T> scale_samples(Var<T> input, Var<T> weights);

template <typename T>
Var<T> reshape(Var<T> input, Shape shape);

/// Sum of input elements times fixed coefficients of the same shape; a scalar [1].
template <typename T>
Var<T> weighted_sum(Var<T> input, const Tensor<T>& coeffs);

/// Mean over the batch of w_i * (-log softmax(logits_i)[label_i]); w_i defaults to 1.
/// Returns shape [1].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels, std::span<const T> sample_weights = {});

}  // namespace ba2m::ops

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ba2m/attention/attention.hpp"
#include "ba2m/core/checkpoint.hpp"
#include "ba2m/network/spec.hpp"

namespace ba2m {

/// Convolution without bias followed by batch norm.
template <typename T>
struct ConvBn {
    Parameter<T> weight;  // [out, in, k, k]
    BatchNorm<T> bn;
    std::size_t stride = 1;

    Var<T> forward(Var<T> x, Mode mode);
};

template <typename T>
struct Block {
    BlockSpec spec;
    std::vector<ConvBn<T>> convs;  // 2 for basic, 3 for residual
    std::optional<ConvBn<T>> shortcut;
    std::optional<AttentionStack<T>> attention;
};

/// Weights of one placement in one forward pass.
template <typename T>
struct PlacementTrace {
    std::size_t block = 0;
    SarBatch<T> batch;
};

struct ForwardOptions {
    EvalPolicy eval_policy = EvalPolicy::deactivated;
    /// Skips every BA2M instance (weights of 1 everywhere) regardless of mode.
    bool bypass_attention = false;
};

/// A built classification network. Copies are deep; parameter pointers handed out by
/// parameters() refer to this instance and are invalidated when it is moved or destroyed.
template <typename T>
class Network {
public:
    /// Deterministic initialisation: the same spec and seed give bitwise-identical parameters.
    static Network build(const NetworkSpec& spec, std::uint64_t seed);

    const NetworkSpec& spec() const { return spec_; }

    /// Logits [N, K] for x [N, C, H, W]. Traces of every active placement are appended to
    /// `trace` when given.
    Var<T> forward(Var<T> x, Mode mode, const ForwardOptions& options = {},
                   std::vector<PlacementTrace<T>>* trace = nullptr);

    /// Pieces of forward(), exposed so tests can recompose the network by hand.
    Var<T> forward_stem(Var<T> x, Mode mode);
    /// Block body; `attend` false skips the block's BA2M instance whatever its placement.
    Var<T> forward_block(std::size_t i, Var<T> x, Mode mode, bool attend, const ForwardOptions& options = {},
                         std::vector<PlacementTrace<T>>* trace = nullptr);
    Var<T> forward_head(Var<T> x);

    /// Eval-mode logits without gradient recording.
    Tensor<T> logits(const Tensor<T>& x, const ForwardOptions& options = {});
    /// argmax of eval-mode logits.
    std::vector<int> predict(const Tensor<T>& x, const ForwardOptions& options = {});

    /// Stable order: stem, blocks in order (convs, shortcut, attention), head.
    std::vector<Parameter<T>*> parameters();
    std::vector<BatchNorm<T>*> batch_norms();
    std::vector<AttentionStack<T>*> attention_stacks();
    std::size_t parameter_count();

    Block<T>& block(std::size_t i) { return blocks_.at(i); }
    ConvBn<T>& stem() { return stem_; }

    /// Parameters plus BN running statistics as named tensors.
    std::vector<NamedTensor> state();
    /// Loads a state produced by state() of a network with the same spec; every entry must
    /// match by name and shape.
    void load_state(const std::vector<NamedTensor>& entries);

private:
    NetworkSpec spec_;
    ConvBn<T> stem_;
    std::vector<Block<T>> blocks_;
    Parameter<T> head_weight_, head_bias_;
};

/// Index of the largest entry per row of [N, K] (first on ties).
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace ba2m

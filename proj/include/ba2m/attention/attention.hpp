#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ba2m/attention/config.hpp"
#include "ba2m/core/batch_norm.hpp"
#include "ba2m/core/random.hpp"
#include "ba2m/core/tape.hpp"

namespace ba2m {

/// GAP -> FC0 (C -> hidden) -> FC1 (hidden -> C) -> BN over the channel vector.
template <typename T>
struct ChannelBranch {
    Parameter<T> fc0_weight, fc0_bias, fc1_weight, fc1_bias;
    BatchNorm<T> bn;
};

/// Grouped 1x1 (C -> hidden) -> 3x3 (hidden -> hidden) -> 1x1 (hidden -> C) -> BN.
template <typename T>
struct LocalSpatialBranch {
    Parameter<T> conv0, conv1, conv2;
    BatchNorm<T> bn;
};

/// Grouped 1x1 projections f, g, h (C -> C); per group softmax(f g^T) h over flattened pixels.
template <typename T>
struct GlobalSpatialBranch {
    Parameter<T> f, g, h;
};

/// Parameters of one BA2M instance. Only the branches selected in the config are allocated.
template <typename T>
class AttentionStack {
public:
    AttentionStack() = default;
    /// Builds and initialises the branches; parameter names are prefixed with `prefix`.
    AttentionStack(const Ba2mConfig& config, const std::string& prefix, Rng& rng);

    const Ba2mConfig& config() const { return config_; }

    std::optional<ChannelBranch<T>> channel;
    std::optional<LocalSpatialBranch<T>> local_spatial;
    std::optional<GlobalSpatialBranch<T>> global_spatial;

    /// Stable order: channel, local spatial, global spatial; weights before BN affine terms.
    std::vector<Parameter<T>*> parameters();
    std::vector<BatchNorm<T>*> batch_norms();
    std::size_t parameter_count();

private:
    Ba2mConfig config_;
};

/// Per-sample attention representation and its batch-normalised weights.
/// In train mode the weights are a softmax over the batch (sum 1, each in (0,1) for N >= 2);
/// in eval mode every weight is 1.
template <typename T>
struct SarBatch {
    std::vector<T> sar;
    std::vector<T> weights;
    Mode mode = Mode::train;
    /// Tape handle of the weights ([N]); gradients flow through it back into the SAR path.
    Var<T> weight_var;
};

/// What eval mode does with the module: skip it (weight 1 without computing SAR), or compute
/// each test image's SAR and normalise it alone, which also yields weight 1.
enum class EvalPolicy { deactivated, per_image };

template <typename T>
struct Ba2mResult {
    Var<T> output;
    std::optional<SarBatch<T>> sar;  // absent when eval skipped the module
};

template <typename T>
Var<T> channel_attention(Var<T> x, AttentionStack<T>& stack, Mode mode);

template <typename T>
Var<T> local_spatial_attention(Var<T> x, AttentionStack<T>& stack, Mode mode);

template <typename T>
Var<T> global_spatial_attention(Var<T> x, AttentionStack<T>& stack);

/// The [N*G, HW, HW] row-stochastic attention matrices used by global_spatial_attention.
template <typename T>
Var<T> global_attention_map(Var<T> x, AttentionStack<T>& stack);

/// mean over C of max(A_C, GAP(A_LS), GAP(A_GS)) over whichever branches are present.
/// ac is [N,C,1,1]; als and ags are [N,C,H,W]. Returns [N].
template <typename T>
Var<T> fuse_sar(std::optional<Var<T>> ac, std::optional<Var<T>> als, std::optional<Var<T>> ags);

/// Train: softmax over the batch axis (times N when scale_by_n). Eval: all ones.
template <typename T>
SarBatch<T> batch_excite(Var<T> sar, Mode mode, bool scale_by_n = false);

/// Scales sample i by weights[i]. Eval weights of 1 return the input unchanged.
template <typename T>
Var<T> reweight(Var<T> x, const SarBatch<T>& batch);

/// Full module: branches -> SAR -> batch weights -> re-weighted features.
template <typename T>
Ba2mResult<T> ba2m_forward(Var<T> x, AttentionStack<T>& stack, Mode mode,
                           EvalPolicy policy = EvalPolicy::deactivated);

}  // namespace ba2m

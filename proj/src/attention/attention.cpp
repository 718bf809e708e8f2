#include "ba2m/attention/attention.hpp"

#include <cmath>

#include "ba2m/core/error.hpp"
#include "ba2m/core/ops.hpp"

namespace ba2m {

namespace {

template <typename T>
Parameter<T> init_param(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> value(std::move(shape));
    fill_fan_in_uniform(value, fan_in, rng);
    return Parameter<T>(name, std::move(value));
}

template <typename T>
Parameter<T> conv_param(const std::string& name, std::size_t out, std::size_t in, std::size_t groups, std::size_t k,
                        Rng& rng) {
    return init_param<T>(name, Shape{out, in / groups, k, k}, (in / groups) * k * k, rng);
}

template <typename T>
void check_channels(Var<T> x, const Ba2mConfig& cfg, const char* where) {
    const Shape& s = x.shape();
    if (s.rank() != 4) throw DimensionError(std::string(where) + ": input must be [N,C,H,W], got " + s.to_string());
    if (s[1] != cfg.channels)
        throw ConfigError(std::string(where) + ": input has " + std::to_string(s[1]) + " channels, module expects " +
                          std::to_string(cfg.channels));
}

template <typename T>
Var<T> bn_forward(Var<T> x, BatchNorm<T>& bn, Mode mode) {
    Tape<T>& tape = *x.tape;
    return ops::batch_norm(x, tape.parameter(bn.gamma), tape.parameter(bn.beta), bn.stats, mode);
}

template <typename T>
Var<T> require_branch_input(const std::optional<Var<T>>& v, const Shape& expect, const char* name) {
    if (v->shape() != expect)
        throw DimensionError(std::string("fuse_sar: ") + name + " has shape " + v->shape().to_string() + ", expected " +
                             expect.to_string());
    return *v;
}

}  // namespace

template <typename T>
AttentionStack<T>::AttentionStack(const Ba2mConfig& config, const std::string& prefix, Rng& rng) : config_(config) {
    config_.validate();
    const std::size_t C = config_.channels, h = config_.hidden();
    const std::string p = prefix.empty() ? "" : prefix + ".";
    if (config_.branches.channel) {
        channel.emplace(ChannelBranch<T>{
            init_param<T>(p + "ac.fc0.weight", Shape{h, C}, C, rng),
            Parameter<T>(p + "ac.fc0.bias", Tensor<T>(Shape{h})),
            init_param<T>(p + "ac.fc1.weight", Shape{C, h}, h, rng),
            Parameter<T>(p + "ac.fc1.bias", Tensor<T>(Shape{C})),
            BatchNorm<T>(p + "ac.bn", C),
        });
    }
    if (config_.branches.local_spatial) {
        const std::size_t G = config_.groups_ls();
        local_spatial.emplace(LocalSpatialBranch<T>{
            conv_param<T>(p + "als.conv0.weight", h, C, G, 1, rng),
            conv_param<T>(p + "als.conv1.weight", h, h, G, 3, rng),
            conv_param<T>(p + "als.conv2.weight", C, h, G, 1, rng),
            BatchNorm<T>(p + "als.bn", C),
        });
    }
    if (config_.branches.global_spatial) {
        const std::size_t G = config_.groups_gs();
        global_spatial.emplace(GlobalSpatialBranch<T>{
            conv_param<T>(p + "ags.f.weight", C, C, G, 1, rng),
            conv_param<T>(p + "ags.g.weight", C, C, G, 1, rng),
            conv_param<T>(p + "ags.h.weight", C, C, G, 1, rng),
        });
    }
}

template <typename T>
std::vector<Parameter<T>*> AttentionStack<T>::parameters() {
    std::vector<Parameter<T>*> out;
    if (channel) {
        auto& b = *channel;
        out.insert(out.end(), {&b.fc0_weight, &b.fc0_bias, &b.fc1_weight, &b.fc1_bias, &b.bn.gamma, &b.bn.beta});
    }
    if (local_spatial) {
        auto& b = *local_spatial;
        out.insert(out.end(), {&b.conv0, &b.conv1, &b.conv2, &b.bn.gamma, &b.bn.beta});
    }
    if (global_spatial) {
        auto& b = *global_spatial;
        out.insert(out.end(), {&b.f, &b.g, &b.h});
    }
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> AttentionStack<T>::batch_norms() {
    std::vector<BatchNorm<T>*> out;
    if (channel) out.push_back(&channel->bn);
    if (local_spatial) out.push_back(&local_spatial->bn);
    return out;
}

template <typename T>
std::size_t AttentionStack<T>::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->numel();
    return n;
}

template <typename T>
Var<T> channel_attention(Var<T> x, AttentionStack<T>& stack, Mode mode) {
    check_channels(x, stack.config(), "channel_attention");
    if (!stack.channel) throw ConfigError("channel_attention: branch not enabled");
    auto& b = *stack.channel;
    Tape<T>& tape = *x.tape;
    typename Tape<T>::Scope scope(tape, "ac");
    const std::size_t N = x.shape()[0], C = x.shape()[1];
    Var<T> v = ops::reshape(ops::global_avg_pool(x), Shape{N, C});
    v = ops::fully_connected(v, tape.parameter(b.fc0_weight), std::optional<Var<T>>(tape.parameter(b.fc0_bias)));
    v = ops::fully_connected(v, tape.parameter(b.fc1_weight), std::optional<Var<T>>(tape.parameter(b.fc1_bias)));
    v = bn_forward(v, b.bn, mode);
    return ops::reshape(v, Shape{N, C, 1, 1});
}

template <typename T>
Var<T> local_spatial_attention(Var<T> x, AttentionStack<T>& stack, Mode mode) {
    check_channels(x, stack.config(), "local_spatial_attention");
    if (!stack.local_spatial) throw ConfigError("local_spatial_attention: branch not enabled");
    auto& b = *stack.local_spatial;
    Tape<T>& tape = *x.tape;
    typename Tape<T>::Scope scope(tape, "als");
    const std::size_t G = stack.config().groups_ls();
    Var<T> v = ops::conv2d(x, tape.parameter(b.conv0), G, 0);
    v = ops::conv2d(v, tape.parameter(b.conv1), G, 1);
    v = ops::conv2d(v, tape.parameter(b.conv2), G, 0);
    return bn_forward(v, b.bn, mode);
}

template <typename T>
struct GlobalParts {
    Var<T> attention;  // [N*G, HW, HW]
    Var<T> values;     // [N*G, C/G, HW]
};

template <typename T>
GlobalParts<T> global_parts(Var<T> x, AttentionStack<T>& stack, const char* where) {
    check_channels(x, stack.config(), where);
    if (!stack.global_spatial) throw ConfigError(std::string(where) + ": branch not enabled");
    auto& b = *stack.global_spatial;
    Tape<T>& tape = *x.tape;
    typename Tape<T>::Scope scope(tape, "ags");
    const Shape& s = x.shape();
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
    const std::size_t G = stack.config().groups_gs();
    const Shape grouped{N * G, C / G, HW};
    Var<T> f = ops::reshape(ops::conv2d(x, tape.parameter(b.f), G, 0), grouped);
    Var<T> g = ops::reshape(ops::conv2d(x, tape.parameter(b.g), G, 0), grouped);
    Var<T> h = ops::reshape(ops::conv2d(x, tape.parameter(b.h), G, 0), grouped);
    // scores[p, q] = sum_c f[c, p] g[c, q]; each row p is normalised over q.
    Var<T> att = ops::softmax(ops::matmul(f, g, true, false), 2);
    return {att, h};
}

template <typename T>
Var<T> global_attention_map(Var<T> x, AttentionStack<T>& stack) {
    return global_parts(x, stack, "global_attention_map").attention;
}

template <typename T>
Var<T> global_spatial_attention(Var<T> x, AttentionStack<T>& stack) {
    auto parts = global_parts(x, stack, "global_spatial_attention");
    typename Tape<T>::Scope scope(*x.tape, "ags");
    // out[c, p] = sum_q att[p, q] h[c, q]
    Var<T> out = ops::matmul(parts.values, parts.attention, false, true);
    return ops::reshape(out, x.shape());
}

template <typename T>
Var<T> fuse_sar(std::optional<Var<T>> ac, std::optional<Var<T>> als, std::optional<Var<T>> ags) {
    std::vector<Var<T>> vectors;
    std::optional<Shape> spatial;
    for (const auto* v : {&als, &ags}) {
        if (!*v) continue;
        const Shape& s = (*v)->shape();
        if (s.rank() != 4) throw DimensionError("fuse_sar: spatial maps must be [N,C,H,W], got " + s.to_string());
        if (spatial && *spatial != s)
            throw DimensionError("fuse_sar: spatial maps differ: " + spatial->to_string() + " vs " + s.to_string());
        spatial = s;
    }
    std::optional<Shape> vec_shape;
    if (spatial) vec_shape = Shape{(*spatial)[0], (*spatial)[1], 1, 1};
    if (ac) {
        if (!vec_shape) {
            const Shape& s = ac->shape();
            if (s.rank() != 4 || s[2] != 1 || s[3] != 1)
                throw DimensionError("fuse_sar: channel vector must be [N,C,1,1], got " + s.to_string());
            vec_shape = s;
        }
        vectors.push_back(require_branch_input(ac, *vec_shape, "channel vector"));
    }
    if (als) vectors.push_back(ops::global_avg_pool(*als));
    if (ags) vectors.push_back(ops::global_avg_pool(*ags));
    if (vectors.empty()) throw ConfigError("fuse_sar: at least one branch output is required");

    // max over fewer than three operands repeats the last one; max(a, b, b) = max(a, b).
    Var<T> m = vectors[0];
    if (vectors.size() > 1) m = ops::max3(vectors[0], vectors[1], vectors.back());
    const std::size_t N = (*vec_shape)[0], C = (*vec_shape)[1];
    return ops::reduce_mean(ops::reshape(m, Shape{N, C}), 1);
}

template <typename T>
SarBatch<T> batch_excite(Var<T> sar, Mode mode, bool scale_by_n) {
    const Shape& s = sar.shape();
    if (s.rank() != 1) throw DimensionError("batch_excite: SAR must be a vector, got " + s.to_string());
    const std::size_t N = s[0];
    SarBatch<T> out;
    out.mode = mode;
    out.sar.assign(sar.value().data().begin(), sar.value().data().end());
    for (std::size_t i = 0; i < N; ++i)
        if (!std::isfinite(static_cast<double>(out.sar[i])))
            throw NumericError("batch_excite: SAR of sample " + std::to_string(i) + " is not finite");
    if (mode == Mode::eval) {
        out.weights.assign(N, T{1});
        out.weight_var = sar.tape->constant(Tensor<T>(Shape{N}, T{1}));
        return out;
    }
    Var<T> w = ops::softmax(sar, 0);
    if (scale_by_n) w = ops::scale(w, static_cast<T>(N));
    out.weight_var = w;
    out.weights.assign(w.value().data().begin(), w.value().data().end());
    return out;
}

template <typename T>
Var<T> reweight(Var<T> x, const SarBatch<T>& batch) {
    if (x.shape().rank() == 0 || x.shape()[0] != batch.weights.size())
        throw DimensionError("reweight: input " + x.shape().to_string() + " does not match " +
                             std::to_string(batch.weights.size()) + " weights");
    if (batch.mode == Mode::eval) return x;
    return ops::scale_samples(x, batch.weight_var);
}

template <typename T>
Ba2mResult<T> ba2m_forward(Var<T> x, AttentionStack<T>& stack, Mode mode, EvalPolicy policy) {
    check_channels(x, stack.config(), "ba2m_forward");
    if (stack.config().branches.empty()) throw ConfigError("ba2m_forward: branch subset must be nonempty");
    if (mode == Mode::eval && policy == EvalPolicy::deactivated) return {x, std::nullopt};

    std::optional<Var<T>> ac, als, ags;
    if (stack.channel) ac = channel_attention(x, stack, mode);
    if (stack.local_spatial) als = local_spatial_attention(x, stack, mode);
    if (stack.global_spatial) ags = global_spatial_attention(x, stack);
    typename Tape<T>::Scope scope(*x.tape, "fuse");
    Var<T> sar = fuse_sar(ac, als, ags);
    // Eval with the per-image policy normalises every image on its own: softmax over one
    // element is 1, which batch_excite's eval path yields directly.
    SarBatch<T> batch = batch_excite(sar, mode, stack.config().scale_by_n);
    Var<T> out = reweight(x, batch);
    return {out, std::move(batch)};
}

#define BA2M_INSTANTIATE_ATTENTION(T)                                                                      \
    template class AttentionStack<T>;                                                                      \
    template Var<T> channel_attention(Var<T>, AttentionStack<T>&, Mode);                                   \
    template Var<T> local_spatial_attention(Var<T>, AttentionStack<T>&, Mode);                             \
    template Var<T> global_spatial_attention(Var<T>, AttentionStack<T>&);                                  \
    template Var<T> global_attention_map(Var<T>, AttentionStack<T>&);                                      \
    template Var<T> fuse_sar(std::optional<Var<T>>, std::optional<Var<T>>, std::optional<Var<T>>);        \
    template SarBatch<T> batch_excite(Var<T>, Mode, bool);                                                 \
    template Var<T> reweight(Var<T>, const SarBatch<T>&);                                                  \
    template Ba2mResult<T> ba2m_forward(Var<T>, AttentionStack<T>&, Mode, EvalPolicy);

BA2M_INSTANTIATE_ATTENTION(float)
BA2M_INSTANTIATE_ATTENTION(double)

}  // namespace ba2m

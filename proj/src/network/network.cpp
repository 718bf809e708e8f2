#include "ba2m/network/network.hpp"

#include <map>

#include "ba2m/core/error.hpp"
#include "ba2m/core/ops.hpp"

namespace ba2m {

namespace {

// Separate generator streams per component keep the backbone initialisation identical
// whether or not attention is placed.
constexpr std::uint64_t kStemStream = 0;
constexpr std::uint64_t kBlockStream = 100;
constexpr std::uint64_t kAttentionStream = 10000;
constexpr std::uint64_t kHeadStream = 20000;

template <typename T>
ConvBn<T> make_conv_bn(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                       Rng& rng) {
    Tensor<T> w(Shape{out, in, k, k});
    fill_fan_in_uniform(w, in * k * k, rng);
    return ConvBn<T>{Parameter<T>(prefix + ".weight", std::move(w)), BatchNorm<T>(prefix + ".bn", out), stride};
}

std::string bn_prefix(const std::string& gamma_name) { return gamma_name.substr(0, gamma_name.size() - 6); }

}  // namespace

template <typename T>
Var<T> ConvBn<T>::forward(Var<T> x, Mode mode) {
    Tape<T>& tape = *x.tape;
    const std::size_t k = weight.value.dim(2);
    Var<T> y = ops::conv2d(x, tape.parameter(weight), 1, (k - 1) / 2, stride);
    return ops::batch_norm(y, tape.parameter(bn.gamma), tape.parameter(bn.beta), bn.stats, mode);
}

template <typename T>
Network<T> Network<T>::build(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Network<T> net;
    net.spec_ = spec;
    {
        Rng rng = make_rng(seed, kStemStream);
        net.stem_ = make_conv_bn<T>("stem.conv", spec.input_channels, spec.stem.out_channels, 3, spec.stem.stride, rng);
    }
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const BlockSpec& bs = spec.blocks[i];
        const std::string p = "block" + std::to_string(i);
        Rng rng = make_rng(seed, kBlockStream + i);
        Block<T> b;
        b.spec = bs;
        if (bs.kind == BlockKind::basic) {
            b.convs.push_back(make_conv_bn<T>(p + ".conv0", bs.in_channels, bs.out_channels, 3, bs.stride, rng));
            b.convs.push_back(make_conv_bn<T>(p + ".conv1", bs.out_channels, bs.out_channels, 3, 1, rng));
        } else {
            const std::size_t mid = bs.mid();
            b.convs.push_back(make_conv_bn<T>(p + ".conv0", bs.in_channels, mid, 1, bs.stride, rng));
            b.convs.push_back(make_conv_bn<T>(p + ".conv1", mid, mid, 3, 1, rng));
            b.convs.push_back(make_conv_bn<T>(p + ".conv2", mid, bs.out_channels, 1, 1, rng));
            if (bs.has_projection())
                b.shortcut = make_conv_bn<T>(p + ".shortcut", bs.in_channels, bs.out_channels, 1, bs.stride, rng);
        }
        if (bs.ba2m != Placement::none) {
            Rng arng = make_rng(seed, kAttentionStream + i);
            b.attention.emplace(spec.ba2m_for_block(i), p + ".ba2m", arng);
        }
        net.blocks_.push_back(std::move(b));
    }
    {
        Rng rng = make_rng(seed, kHeadStream);
        const std::size_t C = spec.blocks.back().out_channels;
        Tensor<T> w(Shape{spec.num_classes, C});
        fill_fan_in_uniform(w, C, rng);
        net.head_weight_ = Parameter<T>("head.fc.weight", std::move(w));
        net.head_bias_ = Parameter<T>("head.fc.bias", Tensor<T>(Shape{spec.num_classes}));
    }
    return net;
}

template <typename T>
Var<T> Network<T>::forward_stem(Var<T> x, Mode mode) {
    const Shape& s = x.shape();
    if (s.rank() != 4 || s[1] != spec_.input_channels || s[2] != spec_.input_height || s[3] != spec_.input_width)
        throw DimensionError("network input must be [N," + std::to_string(spec_.input_channels) + "," +
                             std::to_string(spec_.input_height) + "," + std::to_string(spec_.input_width) + "], got " +
                             s.to_string());
    typename Tape<T>::Scope scope(*x.tape, "stem");
    return ops::relu(stem_.forward(x, mode));
}

template <typename T>
Var<T> Network<T>::forward_block(std::size_t i, Var<T> x, Mode mode, bool attend, const ForwardOptions& options,
                                 std::vector<PlacementTrace<T>>* trace) {
    Block<T>& b = blocks_.at(i);
    Tape<T>& tape = *x.tape;
    typename Tape<T>::Scope scope(tape, "block" + std::to_string(i));
    const bool use_attention = attend && b.attention && !options.bypass_attention;

    auto attend_here = [&](Var<T> v) {
        typename Tape<T>::Scope inner(tape, "ba2m");
        auto r = ba2m_forward(v, *b.attention, mode, options.eval_policy);
        if (trace && r.sar) trace->push_back({i, std::move(*r.sar)});
        return r.output;
    };

    Var<T> y;
    if (b.spec.kind == BlockKind::basic) {
        y = ops::relu(b.convs[0].forward(x, mode));
        y = ops::relu(b.convs[1].forward(y, mode));
    } else {
        Var<T> h = ops::relu(b.convs[0].forward(x, mode));
        h = ops::relu(b.convs[1].forward(h, mode));
        h = b.convs[2].forward(h, mode);
        if (use_attention && b.spec.ba2m == Placement::inside) h = attend_here(h);
        Var<T> sc = b.shortcut ? b.shortcut->forward(x, mode) : x;
        y = ops::relu(ops::add(h, sc));
    }
    if (use_attention && b.spec.ba2m == Placement::between) y = attend_here(y);
    return y;
}

template <typename T>
Var<T> Network<T>::forward_head(Var<T> x) {
    Tape<T>& tape = *x.tape;
    typename Tape<T>::Scope scope(tape, "head");
    const std::size_t N = x.shape()[0], C = x.shape()[1];
    Var<T> pooled = ops::reshape(ops::global_avg_pool(x), Shape{N, C});
    return ops::fully_connected(pooled, tape.parameter(head_weight_), std::optional<Var<T>>(tape.parameter(head_bias_)));
}

template <typename T>
Var<T> Network<T>::forward(Var<T> x, Mode mode, const ForwardOptions& options, std::vector<PlacementTrace<T>>* trace) {
    Var<T> y = forward_stem(x, mode);
    for (std::size_t i = 0; i < blocks_.size(); ++i) y = forward_block(i, y, mode, true, options, trace);
    return forward_head(y);
}

template <typename T>
Tensor<T> Network<T>::logits(const Tensor<T>& x, const ForwardOptions& options) {
    Tape<T> tape(false);
    return forward(tape.constant(x), Mode::eval, options).value();
}

template <typename T>
std::vector<int> Network<T>::predict(const Tensor<T>& x, const ForwardOptions& options) {
    return argmax_rows(logits(x, options));
}

template <typename T>
std::vector<Parameter<T>*> Network<T>::parameters() {
    std::vector<Parameter<T>*> out;
    auto add_conv = [&](ConvBn<T>& c) { out.insert(out.end(), {&c.weight, &c.bn.gamma, &c.bn.beta}); };
    add_conv(stem_);
    for (auto& b : blocks_) {
        for (auto& c : b.convs) add_conv(c);
        if (b.shortcut) add_conv(*b.shortcut);
        if (b.attention)
            for (auto* p : b.attention->parameters()) out.push_back(p);
    }
    out.push_back(&head_weight_);
    out.push_back(&head_bias_);
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> Network<T>::batch_norms() {
    std::vector<BatchNorm<T>*> out{&stem_.bn};
    for (auto& b : blocks_) {
        for (auto& c : b.convs) out.push_back(&c.bn);
        if (b.shortcut) out.push_back(&b.shortcut->bn);
        if (b.attention)
            for (auto* bn : b.attention->batch_norms()) out.push_back(bn);
    }
    return out;
}

template <typename T>
std::vector<AttentionStack<T>*> Network<T>::attention_stacks() {
    std::vector<AttentionStack<T>*> out;
    for (auto& b : blocks_)
        if (b.attention) out.push_back(&*b.attention);
    return out;
}

template <typename T>
std::size_t Network<T>::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->numel();
    return n;
}

template <typename T>
std::vector<NamedTensor> Network<T>::state() {
    std::vector<NamedTensor> out;
    for (auto* p : parameters()) out.push_back({p->name, p->value});
    for (auto* bn : batch_norms()) {
        const std::string prefix = bn_prefix(bn->gamma.name);
        out.push_back({prefix + ".running_mean", bn->stats.running_mean});
        out.push_back({prefix + ".running_var", bn->stats.running_var});
    }
    return out;
}

template <typename T>
void Network<T>::load_state(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& e : entries)
        if (!by_name.emplace(e.name, &e).second) throw FormatError("checkpoint has duplicate entry '" + e.name + "'");

    std::size_t used = 0;
    auto assign = [&](const std::string& name, Tensor<T>& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint is missing '" + name + "'");
        const NamedTensor& e = *it->second;
        if (e.shape() != dst.shape())
            throw FormatError("checkpoint entry '" + name + "' has shape " + e.shape().to_string() + ", expected " +
                              dst.shape().to_string());
        std::visit([&](const auto& t) { dst = t.template cast<T>(); }, e.tensor);
        ++used;
    };
    for (auto* p : parameters()) assign(p->name, p->value);
    for (auto* bn : batch_norms()) {
        const std::string prefix = bn_prefix(bn->gamma.name);
        assign(prefix + ".running_mean", bn->stats.running_mean);
        assign(prefix + ".running_var", bn->stats.running_var);
        bn->stats.initialized = true;
    }
    if (used != entries.size())
        throw FormatError("checkpoint has " + std::to_string(entries.size() - used) + " entries this network lacks");
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    if (logits.shape().rank() != 2) throw DimensionError("argmax_rows: expected [N,K], got " + logits.shape().to_string());
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    std::vector<int> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (logits[n * K + k] > logits[n * K + best]) best = k;
        out[n] = static_cast<int>(best);
    }
    return out;
}

template class Network<float>;
template class Network<double>;
template std::vector<int> argmax_rows(const Tensor<float>&);
template std::vector<int> argmax_rows(const Tensor<double>&);

}  // namespace ba2m

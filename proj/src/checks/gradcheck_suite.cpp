#include "ba2m/checks/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>

#include "ba2m/attention/attention.hpp"
#include "ba2m/core/error.hpp"
#include "ba2m/core/ops.hpp"
#include "ba2m/core/random.hpp"
#include "ba2m/network/network.hpp"

namespace ba2m::checks {

namespace {

using Entry = std::function<GradCheckReport(std::uint64_t)>;

Tensor<double> uniform(Shape s, double lo, double hi, Rng& rng) { return random_uniform<double>(std::move(s), lo, hi, rng); }

Ba2mConfig small_config(std::size_t C) {
    Ba2mConfig cfg;
    cfg.channels = C;
    cfg.reduction = 2;
    cfg.min_hidden = 2;
    return cfg;
}

std::vector<std::pair<std::string, Entry>> op_entries() {
    return {
        {"conv2d_grouped", [](std::uint64_t s) {
             Rng r = make_rng(s, 1);
             auto x = uniform(Shape{2, 4, 4, 4}, -1, 1, r), w = uniform(Shape{2, 2, 3, 3}, -1, 1, r);
             return gradcheck_op([](auto v) { return ops::conv2d(v[0], v[1], 2, 1); }, {x, w}, {.seed = s});
         }},
        {"conv2d_1x1", [](std::uint64_t s) {
             Rng r = make_rng(s, 2);
             auto x = uniform(Shape{2, 3, 3, 2}, -1, 1, r), w = uniform(Shape{4, 3, 1, 1}, -1, 1, r);
             return gradcheck_op([](auto v) { return ops::conv2d(v[0], v[1], 1, 0); }, {x, w}, {.seed = s});
         }},
        {"conv2d_stride2", [](std::uint64_t s) {
             Rng r = make_rng(s, 3);
             auto x = uniform(Shape{1, 2, 5, 5}, -1, 1, r), w = uniform(Shape{3, 2, 3, 3}, -1, 1, r);
             return gradcheck_op([](auto v) { return ops::conv2d(v[0], v[1], 1, 1, 2); }, {x, w}, {.seed = s});
         }},
        {"global_avg_pool", [](std::uint64_t s) {
             Rng r = make_rng(s, 4);
             return gradcheck_op([](auto v) { return ops::global_avg_pool(v[0]); },
                                 {uniform(Shape{2, 3, 3, 2}, -1, 1, r)}, {.seed = s});
         }},
        {"fully_connected", [](std::uint64_t s) {
             Rng r = make_rng(s, 5);
             auto x = uniform(Shape{3, 4}, -1, 1, r), w = uniform(Shape{2, 4}, -1, 1, r), b = uniform(Shape{2}, -1, 1, r);
             return gradcheck_op(
                 [](auto v) { return ops::fully_connected(v[0], v[1], std::optional<Var<double>>(v[2])); }, {x, w, b},
                 {.seed = s});
         }},
        {"batch_norm_train", [](std::uint64_t s) {
             Rng r = make_rng(s, 6);
             BatchNormStats<double> stats(3);
             auto x = uniform(Shape{4, 3, 2, 2}, -1, 1, r), g = uniform(Shape{3}, 0.5, 1.5, r),
                  b = uniform(Shape{3}, -1, 1, r);
             return gradcheck_op([&](auto v) { return ops::batch_norm(v[0], v[1], v[2], stats, Mode::train); },
                                 {x, g, b}, {.seed = s});
         }},
        {"batch_norm_eval", [](std::uint64_t s) {
             Rng r = make_rng(s, 7);
             BatchNormStats<double> stats(3);
             stats.running_mean = uniform(Shape{3}, -0.5, 0.5, r);
             stats.running_var = uniform(Shape{3}, 0.5, 2.0, r);
             stats.initialized = true;
             auto x = uniform(Shape{2, 3}, -1, 1, r), g = uniform(Shape{3}, 0.5, 1.5, r), b = uniform(Shape{3}, -1, 1, r);
             return gradcheck_op([&](auto v) { return ops::batch_norm(v[0], v[1], v[2], stats, Mode::eval); },
                                 {x, g, b}, {.seed = s});
         }},
        {"matmul", [](std::uint64_t s) {
             GradCheckReport rep;
             for (bool ta : {false, true})
                 for (bool tb : {false, true}) {
                     Rng r = make_rng(s, 8);
                     auto a = uniform(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, -1, 1, r);
                     auto b = uniform(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, -1, 1, r);
                     rep.merge(gradcheck_op([=](auto v) { return ops::matmul(v[0], v[1], ta, tb); }, {a, b}, {.seed = s}));
                 }
             return rep;
         }},
        {"softmax", [](std::uint64_t s) {
             Rng r = make_rng(s, 9);
             GradCheckReport rep;
             auto x = uniform(Shape{3, 5, 2}, -3, 3, r);
             for (std::size_t axis : {0u, 1u, 2u})
                 rep.merge(gradcheck_op([=](auto v) { return ops::softmax(v[0], axis); }, {x}, {.seed = s}));
             return rep;
         }},
        {"max3", [](std::uint64_t s) {
             Rng r = make_rng(s, 10);
             auto a = uniform(Shape{10}, -1, 1, r), b = uniform(Shape{10}, -1, 1, r), c = uniform(Shape{10}, -1, 1, r);
             return gradcheck_op([](auto v) { return ops::max3(v[0], v[1], v[2]); }, {a, b, c}, {.seed = s});
         }},
        {"reduce_mean", [](std::uint64_t s) {
             Rng r = make_rng(s, 11);
             return gradcheck_op([](auto v) { return ops::reduce_mean(v[0], 1); }, {uniform(Shape{3, 4, 2}, -1, 1, r)},
                                 {.seed = s});
         }},
        {"relu", [](std::uint64_t s) {
             Rng r = make_rng(s, 12);
             return gradcheck_op([](auto v) { return ops::relu(v[0]); }, {uniform(Shape{20}, -1, 1, r)}, {.seed = s});
         }},
        {"add", [](std::uint64_t s) {
             Rng r = make_rng(s, 13);
             auto a = uniform(Shape{2, 3}, -1, 1, r), b = uniform(Shape{2, 3}, -1, 1, r);
             return gradcheck_op([](auto v) { return ops::add(v[0], v[1]); }, {a, b}, {.seed = s});
         }},
        {"scale", [](std::uint64_t s) {
             Rng r = make_rng(s, 14);
             return gradcheck_op([](auto v) { return ops::scale(v[0], -1.7); }, {uniform(Shape{6}, -1, 1, r)},
                                 {.seed = s});
         }},
        {"scale_samples", [](std::uint64_t s) {
             Rng r = make_rng(s, 15);
             auto x = uniform(Shape{3, 2, 2}, -1, 1, r), w = uniform(Shape{3}, 0, 1, r);
             return gradcheck_op([](auto v) { return ops::scale_samples(v[0], v[1]); }, {x, w}, {.seed = s});
         }},
        {"reshape", [](std::uint64_t s) {
             Rng r = make_rng(s, 16);
             return gradcheck_op([](auto v) { return ops::reshape(v[0], Shape{3, 4}); },
                                 {uniform(Shape{2, 6}, -1, 1, r)}, {.seed = s});
         }},
        {"cross_entropy", [](std::uint64_t s) {
             Rng r = make_rng(s, 17);
             const std::vector<int> labels{0, 2, 1};
             const std::vector<double> w{0.2, 1.0, 0.7};
             return gradcheck_op([&](auto v) { return ops::cross_entropy<double>(v[0], labels, w); },
                                 {uniform(Shape{3, 4}, -3, 3, r)}, {.seed = s});
         }},
    };
}

GradCheckReport stack_check(std::uint64_t s, std::uint64_t stream, Shape shape,
                            std::function<Var<double>(Var<double>, AttentionStack<double>&)> f) {
    Rng r = make_rng(s, stream);
    AttentionStack<double> stack(small_config(shape[1]), "", r);
    auto x = uniform(shape, -1, 1, r);
    const Tensor<double> coeffs = [&] {
        Tape<double> t(false);
        return uniform(f(t.constant(x), stack).shape(), -1, 1, r);
    }();
    return gradcheck([&](Tape<double>&, std::span<const Var<double>> v) { return ops::weighted_sum(f(v[0], stack), coeffs); },
                     {x}, stack.parameters(), {.seed = s});
}

std::vector<std::pair<std::string, Entry>> attention_entries() {
    return {
        {"channel_attention", [](std::uint64_t s) {
             return stack_check(s, 20, Shape{3, 4, 3, 3}, [](auto x, auto& st) { return channel_attention(x, st, Mode::train); });
         }},
        {"local_spatial_attention", [](std::uint64_t s) {
             return stack_check(s, 21, Shape{2, 8, 4, 4},
                                [](auto x, auto& st) { return local_spatial_attention(x, st, Mode::train); });
         }},
        {"global_spatial_attention", [](std::uint64_t s) {
             return stack_check(s, 22, Shape{1, 4, 3, 3}, [](auto x, auto& st) { return global_spatial_attention(x, st); });
         }},
        {"sar_and_batch_softmax", [](std::uint64_t s) {
             Rng r = make_rng(s, 23);
             auto a = uniform(Shape{4, 3, 1, 1}, -1, 1, r), b = uniform(Shape{4, 3, 2, 2}, -1, 1, r),
                  c = uniform(Shape{4, 3, 2, 2}, -1, 1, r);
             return gradcheck_op(
                 [](auto v) { return batch_excite(fuse_sar<double>(v[0], v[1], v[2]), Mode::train).weight_var; },
                 {a, b, c}, {.seed = s});
         }},
        {"ba2m_module_n2", [](std::uint64_t s) {
             return stack_check(s, 24, Shape{2, 4, 3, 3},
                                [](auto x, auto& st) { return ba2m_forward(x, st, Mode::train).output; });
         }},
    };
}

NetworkSpec tiny_spec() {
    NetworkSpec s;
    s.name = "gradcheck";
    s.input_height = s.input_width = 6;
    s.num_classes = 3;
    s.stem = {4, 1};
    s.ba2m.reduction = 2;
    s.ba2m.min_hidden = 2;
    s.blocks = {
        {BlockKind::residual, 4, 4, 1, 0, Placement::between},
        {BlockKind::residual, 4, 8, 2, 0, Placement::inside},
    };
    return s;
}

std::vector<std::pair<std::string, Entry>> network_entries() {
    return {
        {"network_end_to_end_n2", [](std::uint64_t s) {
             auto net = Network<double>::build(tiny_spec(), s);
             Rng r = make_rng(s, 30);
             auto x = uniform(Shape{2, 3, 6, 6}, -1, 1, r);
             const std::vector<int> labels{1, 2};
             return gradcheck(
                 [&](Tape<double>&, std::span<const Var<double>> v) {
                     return ops::cross_entropy(net.forward(v[0], Mode::train), labels);
                 },
                 {x}, net.parameters(), {.seed = s});
         }},
    };
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck_suite(const std::string& scope, std::uint64_t seed) {
    if (scope != "all" && scope != "ops" && scope != "attention" && scope != "network")
        throw InputError("unknown gradcheck scope '" + scope + "' (expected all, ops, attention or network)");
    std::vector<GradcheckEntry> out;
    auto run = [&](const char* name, const std::vector<std::pair<std::string, Entry>>& entries) {
        if (scope != "all" && scope != name) return;
        for (const auto& [label, f] : entries) out.push_back({name, label, f(seed)});
    };
    run("ops", op_entries());
    run("attention", attention_entries());
    run("network", network_entries());
    return out;
}

double max_error(const std::vector<GradcheckEntry>& entries) {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.report.max_rel_error);
    return m;
}

}  // namespace ba2m::checks

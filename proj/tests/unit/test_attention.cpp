#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "ba2m/attention/attention.hpp"
#include "ba2m/core/error.hpp"
#include "ba2m/core/gradcheck.hpp"
#include "ba2m/core/ops.hpp"

using namespace ba2m;

namespace {

Ba2mConfig small_config(std::size_t C, std::size_t R = 2, std::size_t min_hidden = 2) {
    Ba2mConfig cfg;
    cfg.channels = C;
    cfg.reduction = R;
    cfg.min_hidden = min_hidden;
    return cfg;
}

template <typename F>
Tensor<double> run_on(const Tensor<double>& x, F&& f) {
    Tape<double> tape(false);
    return f(tape.constant(x)).value();
}

// Grouped 1x1 convolution by direct loops; w is [Co, Ci/G, 1, 1].
Tensor<double> naive_conv1x1(const Tensor<double>& x, const Tensor<double>& w, std::size_t groups) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Co = w.dim(0);
    const std::size_t cig = C / groups, cog = Co / groups;
    Tensor<double> y(Shape{N, Co, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Co; ++o)
            for (std::size_t i = 0; i < cig; ++i)
                for (std::size_t a = 0; a < H; ++a)
                    for (std::size_t b = 0; b < W; ++b)
                        y.at(n, o, a, b) += w.at(o, i, 0, 0) * x.at(n, (o / cog) * cig + i, a, b);
    return y;
}

// Self-attention over pixels, one group at a time, written out without the engine.
Tensor<double> naive_global(const Tensor<double>& x, GlobalSpatialBranch<double>& b, std::size_t G) {
    const auto f = naive_conv1x1(x, b.f.value, G), g = naive_conv1x1(x, b.g.value, G),
               h = naive_conv1x1(x, b.h.value, G);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), P = H * W, cg = C / G;
    Tensor<double> y(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t grp = 0; grp < G; ++grp)
            for (std::size_t p = 0; p < P; ++p) {
                std::vector<double> s(P);
                for (std::size_t q = 0; q < P; ++q)
                    for (std::size_t c = 0; c < cg; ++c)
                        s[q] += f.at(n, grp * cg + c, p / W, p % W) * g.at(n, grp * cg + c, q / W, q % W);
                const double m = *std::max_element(s.begin(), s.end());
                double z = 0;
                for (auto& v : s) z += (v = std::exp(v - m));
                for (std::size_t c = 0; c < cg; ++c) {
                    double acc = 0;
                    for (std::size_t q = 0; q < P; ++q) acc += s[q] / z * h.at(n, grp * cg + c, q / W, q % W);
                    y.at(n, grp * cg + c, p / W, p % W) = acc;
                }
            }
    return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Var<double> sar_var(Tape<double>& tape, std::vector<double> values) {
    const std::size_t n = values.size();
    return tape.constant(Tensor<double>(Shape{n}, std::move(values)));
}

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("hidden width with floor") {
        Ba2mConfig cfg;
        cfg.channels = 2048;
        CHECK(cfg.hidden() == 64);
        cfg.channels = 64;
        CHECK(cfg.hidden() == 32);
    }
    TEST_CASE("derived group counts divide") {
        for (std::size_t C : {8, 16, 64, 256, 2048}) {
            for (std::size_t R : {1, 2, 4, 8, 32}) {
                Ba2mConfig cfg = small_config(C, R, 4);
                CHECK(C % cfg.groups_ls() == 0);
                CHECK(cfg.hidden() % cfg.groups_ls() == 0);
                CHECK(C % cfg.groups_gs() == 0);
                CHECK(cfg.groups_ls() <= R);
                CHECK_NOTHROW(cfg.validate());
            }
        }
    }
    TEST_CASE("errors") {
        Ba2mConfig cfg = small_config(12);
        cfg.group_count_gs = 5;
        CHECK_THROWS_AS(cfg.validate(), GroupingError);
        cfg = small_config(12);
        cfg.reduction = 0;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        CHECK_THROWS_AS(BranchSet::parse(""), ConfigError);
        CHECK_THROWS_AS(BranchSet::parse("ca,xyz"), ConfigError);
        CHECK(BranchSet::parse(" gsa , ca") == BranchSet{true, false, true});
        CHECK(BranchSet::parse("lsa").to_string() == "lsa");
    }
}

TEST_SUITE("attention stack") {
    TEST_CASE("parameter shapes and names") {
        Rng rng = make_rng(1);
        Ba2mConfig cfg = small_config(8, 2, 2);
        AttentionStack<double> s(cfg, "m", rng);
        auto params = s.parameters();
        REQUIRE(params.size() == 14);
        CHECK(params[0]->name == "m.ac.fc0.weight");
        CHECK(params[0]->value.shape() == Shape{4, 8});
        CHECK(params[2]->value.shape() == Shape{8, 4});
        const std::size_t G = cfg.groups_ls();
        CHECK(s.local_spatial->conv1.value.shape() == Shape{4, 4 / G, 3, 3});
        CHECK(s.global_spatial->f.value.shape() == Shape{8, 8 / cfg.groups_gs(), 1, 1});
        std::vector<std::string> names;
        for (auto* p : params) names.push_back(p->name);
        std::sort(names.begin(), names.end());
        CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
    }
    TEST_CASE("only selected branches are allocated") {
        Rng rng = make_rng(2);
        Ba2mConfig cfg = small_config(8);
        cfg.branches = BranchSet::parse("lsa");
        AttentionStack<double> s(cfg, "", rng);
        CHECK(!s.channel);
        CHECK(s.local_spatial);
        CHECK(!s.global_spatial);
        CHECK(s.parameters().size() == 5);
    }
}

TEST_SUITE("channel_attention") {
    TEST_CASE("identity weights give the pooled channel vector") {
        Rng rng = make_rng(3);
        Ba2mConfig cfg = small_config(4, 1, 4);
        AttentionStack<double> s(cfg, "", rng);
        for (auto* w : {&s.channel->fc0_weight, &s.channel->fc1_weight}) {
            w->value = Tensor<double>(Shape{4, 4});
            for (std::size_t i = 0; i < 4; ++i) w->value[i * 4 + i] = 1;
        }
        auto x = random_uniform<double>(Shape{2, 4, 3, 3}, -1, 1, rng);
        auto y = run_on(x, [&](Var<double> v) { return channel_attention(v, s, Mode::eval); });
        CHECK(y.shape() == Shape{2, 4, 1, 1});
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < 4; ++c) {
                double gap = 0;
                for (std::size_t i = 0; i < 9; ++i) gap += x.at(n, c, i / 3, i % 3) / 9;
                CHECK(y.at(n, c, 0, 0) == doctest::Approx(gap / std::sqrt(1 + 1e-5)).epsilon(1e-12));
            }
    }
    TEST_CASE("channel mismatch") {
        Rng rng = make_rng(4);
        AttentionStack<double> s(small_config(4), "", rng);
        auto x = Tensor<double>(Shape{1, 5, 2, 2});
        CHECK_THROWS_AS(run_on(x, [&](Var<double> v) { return channel_attention(v, s, Mode::eval); }), ConfigError);
    }
    TEST_CASE("gradient check") {
        Rng rng = make_rng(5);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{2, 8, 4, 4}, -1, 1, rng);
        auto rep = gradcheck_op([&](auto v) { return channel_attention(v[0], s, Mode::train); }, {x});
        CHECK(rep.max_rel_error < 1e-5);
        auto params = s.parameters();
        auto coeffs = random_uniform<double>(Shape{2, 8, 1, 1}, -1, 1, rng);
        auto prep = gradcheck(
            [&](Tape<double>&, std::span<const Var<double>> v) {
                return ops::weighted_sum(channel_attention(v[0], s, Mode::train), coeffs);
            },
            {x}, std::vector<Parameter<double>*>(params.begin(), params.begin() + 6));
        INFO(prep.worst);
        CHECK(prep.max_rel_error < 1e-5);
    }
}

TEST_SUITE("local_spatial_attention") {
    TEST_CASE("shape preserved") {
        Rng rng = make_rng(6);
        AttentionStack<double> s(small_config(8), "", rng);
        for (auto shape : {Shape{1, 8, 1, 1}, Shape{2, 8, 5, 3}, Shape{3, 8, 4, 4}}) {
            auto x = random_uniform<double>(shape, -1, 1, rng);
            auto y = run_on(x, [&](Var<double> v) { return local_spatial_attention(v, s, Mode::train); });
            CHECK(y.shape() == shape);
        }
    }
    TEST_CASE("zero input gives beta") {
        Rng rng = make_rng(7);
        AttentionStack<double> s(small_config(8), "", rng);
        for (std::size_t c = 0; c < 8; ++c) s.local_spatial->bn.beta.value[c] = 0.1 * static_cast<double>(c);
        auto y = run_on(Tensor<double>(Shape{2, 8, 3, 3}),
                        [&](Var<double> v) { return local_spatial_attention(v, s, Mode::train); });
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(0.1 * ((i / 9) % 8)));
    }
    TEST_CASE("grouping error") {
        Ba2mConfig cfg = small_config(8);
        cfg.group_count_ls = 3;
        Rng rng = make_rng(8);
        CHECK_THROWS_AS(AttentionStack<double>(cfg, "", rng), GroupingError);
    }
    TEST_CASE("gradient check") {
        Rng rng = make_rng(9);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{2, 8, 6, 6}, -1, 1, rng);
        auto coeffs = random_uniform<double>(x.shape(), -1, 1, rng);
        auto params = s.parameters();
        auto rep = gradcheck(
            [&](Tape<double>&, std::span<const Var<double>> v) {
                return ops::weighted_sum(local_spatial_attention(v[0], s, Mode::train), coeffs);
            },
            {x}, std::vector<Parameter<double>*>(params.begin() + 6, params.begin() + 11));
        INFO(rep.worst);
        CHECK(rep.max_rel_error < 1e-5);
    }
}

TEST_SUITE("global_spatial_attention") {
    TEST_CASE("matches a direct per-group evaluation") {
        Rng rng = make_rng(10);
        for (std::size_t G : {1, 2, 4}) {
            Ba2mConfig cfg = small_config(8);
            cfg.group_count_gs = G;
            AttentionStack<double> s(cfg, "", rng);
            auto x = random_uniform<double>(Shape{2, 8, 3, 4}, -1, 1, rng);
            auto y = run_on(x, [&](Var<double> v) { return global_spatial_attention(v, s); });
            CHECK(max_abs_diff(y, naive_global(x, *s.global_spatial, G)) < 1e-12);
        }
    }
    TEST_CASE("single pixel returns h(x)") {
        Rng rng = make_rng(11);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{3, 8, 1, 1}, -1, 1, rng);
        auto y = run_on(x, [&](Var<double> v) { return global_spatial_attention(v, s); });
        auto h = naive_conv1x1(x, s.global_spatial->h.value, s.config().groups_gs());
        CHECK(y.storage() == h.storage());
    }
    TEST_CASE("attention rows sum to one") {
        Rng rng = make_rng(12);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{2, 8, 4, 5}, -3, 3, rng);
        auto a = run_on(x, [&](Var<double> v) { return global_attention_map(v, s); });
        const std::size_t P = 20;
        CHECK(a.shape() == Shape{2 * s.config().groups_gs(), P, P});
        for (std::size_t r = 0; r < a.numel() / P; ++r) {
            double sum = 0;
            for (std::size_t q = 0; q < P; ++q) sum += a[r * P + q];
            CHECK(std::abs(sum - 1) < 1e-6);
        }
    }
    TEST_CASE("gradient check") {
        Rng rng = make_rng(13);
        Ba2mConfig cfg = small_config(4);
        cfg.group_count_gs = 2;
        AttentionStack<double> s(cfg, "", rng);
        auto x = random_uniform<double>(Shape{1, 4, 3, 3}, -1, 1, rng);
        auto coeffs = random_uniform<double>(x.shape(), -1, 1, rng);
        auto params = s.parameters();
        auto rep = gradcheck(
            [&](Tape<double>&, std::span<const Var<double>> v) {
                return ops::weighted_sum(global_spatial_attention(v[0], s), coeffs);
            },
            {x}, std::vector<Parameter<double>*>(params.end() - 3, params.end()));
        INFO(rep.worst);
        CHECK(rep.max_rel_error < 1e-5);
    }
}

TEST_SUITE("fuse_sar") {
    TEST_CASE("hand example") {
        Tape<double> t(false);
        auto ac = t.constant(Tensor<double>(Shape{1, 2, 1, 1}, std::vector<double>{1, 0}));
        auto als = t.constant(Tensor<double>(Shape{1, 2, 2, 1}, std::vector<double>{0, 0, 1, 3}));
        auto ags = t.constant(Tensor<double>(Shape{1, 2, 2, 1}, std::vector<double>{-1, -1, -2, 0}));
        auto sar = fuse_sar<double>(ac, als, ags);
        CHECK(sar.shape() == Shape{1});
        CHECK(sar.value()[0] == doctest::Approx(1.5).epsilon(1e-15));
    }
    TEST_CASE("constant maps give the constant") {
        Tape<double> t(false);
        auto ac = t.constant(Tensor<double>(Shape{3, 4, 1, 1}, 0.7));
        auto sp = t.constant(Tensor<double>(Shape{3, 4, 2, 2}, 0.7));
        auto sar = fuse_sar<double>(ac, sp, sp).value();
        for (std::size_t i = 0; i < 3; ++i) CHECK(sar[i] == doctest::Approx(0.7));
    }
    TEST_CASE("subsets take the max over what is present") {
        Rng rng = make_rng(14);
        Tape<double> t(false);
        auto ac = t.constant(random_uniform<double>(Shape{2, 3, 1, 1}, -1, 1, rng));
        auto als = t.constant(random_uniform<double>(Shape{2, 3, 2, 2}, -1, 1, rng));
        auto only_ac = fuse_sar<double>(ac, std::nullopt, std::nullopt).value();
        for (std::size_t n = 0; n < 2; ++n) {
            const double m = (ac.value()[n * 3] + ac.value()[n * 3 + 1] + ac.value()[n * 3 + 2]) / 3;
            CHECK(only_ac[n] == doctest::Approx(m).epsilon(1e-14));
        }
        auto pair = fuse_sar<double>(ac, als, std::nullopt).value();
        for (std::size_t n = 0; n < 2; ++n) {
            double acc = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                double g = 0;
                for (std::size_t i = 0; i < 4; ++i) g += als.value()[(n * 3 + c) * 4 + i] / 4;
                acc += std::max(ac.value()[n * 3 + c], g);
            }
            CHECK(pair[n] == doctest::Approx(acc / 3).epsilon(1e-14));
        }
        CHECK_THROWS_AS(fuse_sar<double>(std::nullopt, std::nullopt, std::nullopt), ConfigError);
    }
    TEST_CASE("shape mismatch") {
        Tape<double> t(false);
        auto ac = t.constant(Tensor<double>(Shape{2, 3, 1, 1}));
        auto als = t.constant(Tensor<double>(Shape{2, 4, 2, 2}));
        CHECK_THROWS_AS(fuse_sar<double>(ac, als, std::nullopt), DimensionError);
    }
    TEST_CASE("batch permutation equivariance") {
        Rng rng = make_rng(15);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{4, 8, 3, 3}, -1, 1, rng);
        const std::vector<std::size_t> perm{2, 0, 3, 1};
        Tensor<double> xp(x.shape());
        const std::size_t per = 8 * 9;
        for (std::size_t n = 0; n < 4; ++n)
            std::copy_n(x.storage().begin() + perm[n] * per, per, xp.storage().begin() + n * per);
        auto sar_of = [&](const Tensor<double>& in) {
            return run_on(in, [&](Var<double> v) {
                return fuse_sar<double>(channel_attention(v, s, Mode::train), local_spatial_attention(v, s, Mode::train),
                                        global_spatial_attention(v, s));
            });
        };
        auto a = sar_of(x), b = sar_of(xp);
        for (std::size_t n = 0; n < 4; ++n) CHECK(std::abs(b[n] - a[perm[n]]) < 1e-12);
    }
}

TEST_SUITE("batch_excite") {
    TEST_CASE("closed forms") {
        Tape<double> t(false);
        auto same = batch_excite(sar_var(t, {0.3, 0.3, 0.3, 0.3}), Mode::train);
        for (double w : same.weights) CHECK(w == doctest::Approx(0.25).epsilon(1e-15));
        auto single = batch_excite(sar_var(t, {-4.2}), Mode::train);
        CHECK(single.weights[0] == 1.0);
        auto two = batch_excite(sar_var(t, {0, std::log(3.0)}), Mode::train);
        CHECK(two.weights[0] == doctest::Approx(0.25).epsilon(1e-15));
        CHECK(two.weights[1] == doctest::Approx(0.75).epsilon(1e-15));
        auto eval = batch_excite(sar_var(t, {1, 2, 3}), Mode::eval);
        CHECK(eval.weights == std::vector<double>{1, 1, 1});
        CHECK(eval.sar == std::vector<double>{1, 2, 3});
    }
    TEST_CASE("weights are a distribution and shift invariant") {
        Rng rng = make_rng(16);
        for (int trial = 0; trial < 20; ++trial) {
            Tape<double> t(false);
            auto sar = random_uniform<double>(Shape{8}, -5, 5, rng);
            auto shifted = sar;
            for (auto& v : shifted.storage()) v += 17.25;
            auto a = batch_excite(t.constant(sar), Mode::train);
            auto b = batch_excite(t.constant(shifted), Mode::train);
            CHECK(std::abs(std::accumulate(a.weights.begin(), a.weights.end(), 0.0) - 1) < 1e-6);
            for (std::size_t i = 0; i < 8; ++i) {
                CHECK(a.weights[i] > 0);
                CHECK(a.weights[i] < 1);
                CHECK(std::abs(a.weights[i] - b.weights[i]) < 1e-12);
            }
        }
    }
    TEST_CASE("scale by batch size") {
        Tape<double> t(false);
        auto b = batch_excite(sar_var(t, {0, std::log(3.0)}), Mode::train, true);
        CHECK(b.weights[0] == doctest::Approx(0.5));
        CHECK(b.weights[1] == doctest::Approx(1.5));
    }
    TEST_CASE("non-finite SAR") {
        Tape<double> t(false);
        Tensor<double> bad(Shape{2});
        bad[1] = std::numeric_limits<double>::infinity();
        // Tape::record rejects non-finite values, so route the check through a raw constant.
        auto v = t.constant(bad);
        CHECK_THROWS_AS(batch_excite(v, Mode::train), NumericError);
    }
}

TEST_SUITE("reweight") {
    TEST_CASE("eval is the identity") {
        Rng rng = make_rng(17);
        Tape<double> t(false);
        auto x = t.constant(random_uniform<double>(Shape{3, 2, 2, 2}, -1, 1, rng));
        auto b = batch_excite(sar_var(t, {1, 2, 3}), Mode::eval);
        auto y = reweight(x, b);
        CHECK(y.value().storage() == x.value().storage());
    }
    TEST_CASE("train scales each sample") {
        Tape<double> t(false);
        auto x = t.constant(Tensor<double>(Shape{2, 1, 1, 2}, std::vector<double>{4, 8, 2, -6}));
        auto b = batch_excite(sar_var(t, {0, std::log(3.0)}), Mode::train);
        auto y = reweight(x, b).value();
        CHECK(y[0] == doctest::Approx(1));
        CHECK(y[1] == doctest::Approx(2));
        CHECK(y[2] == doctest::Approx(1.5));
        CHECK(y[3] == doctest::Approx(-4.5));
        auto wrong = t.constant(Tensor<double>(Shape{3, 1, 1, 1}));
        CHECK_THROWS_AS(reweight(wrong, b), DimensionError);
    }
}

TEST_SUITE("ba2m_forward") {
    TEST_CASE("shape preserved") {
        Rng rng = make_rng(18);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{3, 8, 4, 4}, -1, 1, rng);
        auto y = run_on(x, [&](Var<double> v) { return ba2m_forward(v, s, Mode::train).output; });
        CHECK(y.shape() == x.shape());
    }
    TEST_CASE("constant channel branch gives uniform weights") {
        Rng rng = make_rng(19);
        Ba2mConfig cfg = small_config(4);
        cfg.branches = BranchSet::parse("ca");
        AttentionStack<double> s(cfg, "", rng);
        // Zero weights make A_C equal to beta for every sample.
        s.channel->fc1_weight.value = Tensor<double>(Shape{4, 2});
        s.channel->bn.beta.value = Tensor<double>(Shape{4}, 0.4);
        auto x = random_uniform<double>(Shape{4, 4, 3, 3}, -1, 1, rng);
        Tape<double> t(false);
        auto r = ba2m_forward(t.constant(x), s, Mode::train);
        for (double sar : r.sar->sar) CHECK(sar == doctest::Approx(0.4));
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(r.output.value()[i] == doctest::Approx(x[i] / 4));
    }
    TEST_CASE("eval output is independent of the rest of the batch") {
        Rng rng = make_rng(20);
        AttentionStack<double> s(small_config(8), "", rng);
        // One train step so the BN running statistics are not the defaults.
        run_on(random_uniform<double>(Shape{4, 8, 3, 3}, -1, 1, rng),
               [&](Var<double> v) { return ba2m_forward(v, s, Mode::train).output; });
        auto big = random_uniform<double>(Shape{8, 8, 3, 3}, -1, 1, rng);
        Tensor<double> first(Shape{1, 8, 3, 3});
        std::copy_n(big.storage().begin(), first.numel(), first.storage().begin());
        for (auto policy : {EvalPolicy::deactivated, EvalPolicy::per_image}) {
            auto a = run_on(first, [&](Var<double> v) { return ba2m_forward(v, s, Mode::eval, policy).output; });
            auto b = run_on(big, [&](Var<double> v) { return ba2m_forward(v, s, Mode::eval, policy).output; });
            for (std::size_t i = 0; i < first.numel(); ++i) CHECK(a[i] == b[i]);
            CHECK(a.storage() == first.storage());
        }
        Tape<double> t(false);
        auto r = ba2m_forward(t.constant(big), s, Mode::eval, EvalPolicy::per_image);
        REQUIRE(r.sar);
        CHECK(r.sar->weights == std::vector<double>(8, 1.0));
        CHECK(!ba2m_forward(t.constant(big), s, Mode::eval).sar);
    }
    TEST_CASE("gradient couples samples") {
        // N = 2: the loss of sample 1 alone depends on sample 0's pixels only through the weights.
        Rng rng = make_rng(21);
        AttentionStack<double> s(small_config(4), "", rng);
        auto x = random_uniform<double>(Shape{2, 4, 3, 3}, -1, 1, rng);
        Tensor<double> coeffs(x.shape());
        for (std::size_t i = x.numel() / 2; i < x.numel(); ++i) coeffs[i] = 1.0 + 0.01 * static_cast<double>(i);
        auto loss = [&](Tape<double>&, std::span<const Var<double>> v) {
            return ops::weighted_sum(ba2m_forward(v[0], s, Mode::train).output, coeffs);
        };
        Tape<double> t;
        auto in = t.input(x);
        t.backward(loss(t, std::span<const Var<double>>(&in, 1)));
        auto g = t.grad(in);
        double cross = 0;
        for (std::size_t i = 0; i < x.numel() / 2; ++i) cross = std::max(cross, std::abs(g[i]));
        CHECK(cross > 1e-6);
        auto rep = gradcheck(loss, {x}, {});
        CHECK(rep.max_rel_error < 1e-5);
    }
    TEST_CASE("end-to-end gradient check with cross-entropy") {
        Rng rng = make_rng(22);
        AttentionStack<double> s(small_config(8), "", rng);
        auto x = random_uniform<double>(Shape{2, 8, 6, 6}, -1, 1, rng);
        Parameter<double> head("head", random_uniform<double>(Shape{3, 8}, -1, 1, rng));
        const std::vector<int> labels{0, 2};
        std::vector<Parameter<double>*> params = s.parameters();
        params.push_back(&head);
        auto rep = gradcheck(
            [&](Tape<double>& t, std::span<const Var<double>> v) {
                auto y = ba2m_forward(v[0], s, Mode::train).output;
                auto pooled = ops::reshape(ops::global_avg_pool(y), Shape{2, 8});
                return ops::cross_entropy(ops::fully_connected(pooled, t.parameter(head)), labels);
            },
            {x}, params);
        INFO(rep.worst);
        CHECK(rep.max_rel_error < 1e-4);
    }
}

#include <cmath>

#include "doctest.h"

#include "ba2m/core/error.hpp"
#include "ba2m/core/gradcheck.hpp"
#include "ba2m/core/ops.hpp"
#include "ba2m/network/network.hpp"

using namespace ba2m;

namespace {

NetworkSpec tiny_spec() {
    NetworkSpec s;
    s.name = "tiny";
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

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t first, std::size_t count) {
    Shape s = x.shape();
    const std::size_t per = s.numel() / s[0];
    std::vector<std::size_t> dims = s.dims();
    dims[0] = count;
    Tensor<T> out{Shape(dims)};
    std::copy_n(x.storage().begin() + first * per, count * per, out.storage().begin());
    return out;
}

template <typename T>
void train_step(Network<T>& net, const Tensor<T>& x) {
    Tape<T> tape(false);
    net.forward(tape.constant(x), Mode::train);
}

}  // namespace

TEST_SUITE("network spec") {
    TEST_CASE("text round trip") {
        for (const NetworkSpec& s : {reference_spec(4), tiny_spec()}) {
            const std::string text = to_text(s);
            CHECK(parse_network_spec(text) == s);
        }
        NetworkSpec s = tiny_spec();
        s.ba2m.group_count_gs = 2;
        s.ba2m.branches = BranchSet::parse("ca,gsa");
        s.ba2m.scale_by_n = true;
        s.blocks[0].mid_channels = 3;
        CHECK(parse_network_spec(to_text(s)) == s);
    }
    TEST_CASE("errors") {
        NetworkSpec s = tiny_spec();
        s.blocks[1].in_channels = 5;
        CHECK_THROWS_AS(s.validate(), SpecError);
        s = tiny_spec();
        s.blocks[0].kind = BlockKind::basic;
        s.blocks[0].ba2m = Placement::inside;
        CHECK_THROWS_AS(s.validate(), SpecError);
        s = tiny_spec();
        s.blocks[0].stride = 3;
        CHECK_THROWS_AS(s.validate(), SpecError);
        s = tiny_spec();
        s.ba2m.group_count_ls = 3;
        CHECK_THROWS_AS(s.validate(), SpecError);

        const std::string good = to_text(tiny_spec());
        CHECK_THROWS_AS(parse_network_spec(good + "\n[extra]\nx = 1\n"), SpecError);
        CHECK_THROWS_AS(parse_network_spec(good + "\n[block.5]\nin_channels = 8\nout_channels = 8\n"), SpecError);
        std::string bad = good;
        bad.replace(bad.find("num_classes = 3"), 15, "num_classes = x");
        CHECK_THROWS_AS(parse_network_spec(bad), SpecError);
        bad = good;
        bad.replace(bad.find("ba2m = between"), 14, "ba2m = around");
        CHECK_THROWS_AS(parse_network_spec(bad), SpecError);
    }
    TEST_CASE("spatial sizes") {
        auto sizes = reference_spec().spatial_sizes();
        REQUIRE(sizes.size() == 5);
        CHECK(sizes[0] == std::pair<std::size_t, std::size_t>{16, 16});
        CHECK(sizes[1] == std::pair<std::size_t, std::size_t>{8, 8});
        CHECK(sizes[4] == std::pair<std::size_t, std::size_t>{4, 4});
    }
}

TEST_SUITE("network build") {
    TEST_CASE("deterministic under seed") {
        auto a = Network<float>::build(reference_spec(), 7);
        auto b = Network<float>::build(reference_spec(), 7);
        auto c = Network<float>::build(reference_spec(), 8);
        auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
        REQUIRE(pa.size() == pb.size());
        bool any_diff = false;
        for (std::size_t i = 0; i < pa.size(); ++i) {
            CHECK(pa[i]->name == pb[i]->name);
            CHECK(pa[i]->value.storage() == pb[i]->value.storage());
            any_diff = any_diff || pa[i]->value.storage() != pc[i]->value.storage();
        }
        CHECK(any_diff);
    }
    TEST_CASE("one attention stack per placement") {
        auto net = Network<float>::build(reference_spec(), 1);
        CHECK(net.attention_stacks().size() == 2);
        auto plain = Network<float>::build(reference_spec().with_placement(Placement::none), 1);
        CHECK(plain.attention_stacks().empty());
        std::size_t extra = 0;
        for (auto* s : net.attention_stacks()) extra += s->parameter_count();
        CHECK(net.parameter_count() == plain.parameter_count() + extra);
    }
    TEST_CASE("parameter names unique and order stable") {
        auto net = Network<float>::build(tiny_spec(), 1);
        auto a = net.parameters(), b = net.parameters();
        CHECK(a == b);
        std::vector<std::string> names;
        for (auto* p : a) names.push_back(p->name);
        std::sort(names.begin(), names.end());
        CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
    }
}

TEST_SUITE("network forward") {
    TEST_CASE("no placements equals the plain block composition") {
        Rng rng = make_rng(3);
        auto x = random_uniform<float>(Shape{4, 3, 32, 32}, 0, 1, rng);
        auto with = Network<float>::build(reference_spec(), 11);
        auto without = Network<float>::build(reference_spec().with_placement(Placement::none), 11);
        for (Mode mode : {Mode::train, Mode::eval}) {
            Tape<float> t1(false), t2(false);
            auto a = without.forward(t1.constant(x), mode).value();
            Var<float> y = with.forward_stem(t2.constant(x), mode);
            for (std::size_t i = 0; i < 4; ++i) y = with.forward_block(i, y, mode, false);
            auto b = with.forward_head(y).value();
            CHECK(a.storage() == b.storage());
        }
    }
    TEST_CASE("equal SARs scale every placement by 1/N") {
        NetworkSpec spec = tiny_spec();
        spec.ba2m.branches = BranchSet::parse("ca");
        auto net = Network<double>::build(spec, 5);
        // Zero FC output makes A_C = beta, so every sample has the same SAR.
        for (auto* s : net.attention_stacks()) s->channel->fc1_weight.value = Tensor<double>(s->channel->fc1_weight.value.shape());
        auto copy = net;
        Rng rng = make_rng(4);
        const std::size_t N = 4;
        auto x = random_uniform<double>(Shape{N, 3, 6, 6}, -1, 1, rng);

        Tape<double> t1(false), t2(false);
        std::vector<PlacementTrace<double>> trace;
        auto a = net.forward(t1.constant(x), Mode::train, {}, &trace).value();
        REQUIRE(trace.size() == 2);
        for (auto& tr : trace)
            for (double w : tr.batch.weights) CHECK(w == doctest::Approx(1.0 / N).epsilon(1e-14));

        // Hand composition: block 0 output scaled after the block, block 1 residual branch
        // scaled before the shortcut addition.
        const double inv = 1.0 / N;
        Var<double> y = copy.forward_stem(t2.constant(x), Mode::train);
        y = ops::scale(copy.forward_block(0, y, Mode::train, false), inv);
        auto& b1 = copy.block(1);
        Var<double> h = ops::relu(b1.convs[0].forward(y, Mode::train));
        h = ops::relu(b1.convs[1].forward(h, Mode::train));
        h = ops::scale(b1.convs[2].forward(h, Mode::train), inv);
        y = ops::relu(ops::add(h, b1.shortcut->forward(y, Mode::train)));
        auto b = copy.forward_head(y).value();
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
    TEST_CASE("zero final gamma leaves the shortcut") {
        NetworkSpec spec = tiny_spec().with_placement(Placement::none);
        auto net = Network<double>::build(spec, 2);
        auto& b = net.block(0);
        b.convs[2].bn.gamma.value = Tensor<double>(Shape{4});
        Rng rng = make_rng(5);
        auto x = random_uniform<double>(Shape{2, 4, 6, 6}, -1, 1, rng);
        Tape<double> t(false);
        auto y = net.forward_block(0, t.constant(x), Mode::train, true).value();
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == std::max(0.0, x[i]));
    }
    TEST_CASE("eval logits do not depend on the batch") {
        auto net = Network<float>::build(reference_spec(), 3);
        Rng rng = make_rng(6);
        train_step(net, random_uniform<float>(Shape{8, 3, 32, 32}, 0, 1, rng));
        auto probe = random_uniform<float>(Shape{16, 3, 32, 32}, 0, 1, rng);
        auto full = net.logits(probe);
        for (std::size_t n : {0, 5, 15}) {
            auto alone = net.logits(slice_batch(probe, n, 1));
            for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(alone[k] - full[n * 4 + k]) <= 1e-6f);
        }
    }
    TEST_CASE("predictions invariant to test batch size") {
        auto net = Network<float>::build(reference_spec(), 9);
        Rng rng = make_rng(7);
        train_step(net, random_uniform<float>(Shape{8, 3, 32, 32}, 0, 1, rng));
        auto probe = random_uniform<float>(Shape{64, 3, 32, 32}, 0, 1, rng);
        const auto reference = net.predict(probe);
        for (std::size_t bs : {1, 2, 4, 8, 16}) {
            for (auto policy : {EvalPolicy::deactivated, EvalPolicy::per_image}) {
                std::vector<int> got;
                for (std::size_t i = 0; i < 64; i += bs) {
                    auto p = net.predict(slice_batch(probe, i, bs), {policy});
                    got.insert(got.end(), p.begin(), p.end());
                }
                CHECK(got == reference);
            }
        }
    }
    TEST_CASE("argmax") {
        CHECK(argmax_rows(Tensor<double>(Shape{1, 3}, std::vector<double>{0.1, 2.0, -1})) == std::vector<int>{1});
        CHECK(argmax_rows(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 1, 0, 3})) == std::vector<int>{0, 1});
    }
    TEST_CASE("input shape checked") {
        auto net = Network<float>::build(tiny_spec(), 1);
        CHECK_THROWS_AS(net.logits(Tensor<float>(Shape{1, 3, 5, 6})), DimensionError);
    }
    TEST_CASE("end-to-end gradient check on N = 2") {
        auto net = Network<double>::build(tiny_spec(), 12);
        Rng rng = make_rng(8);
        auto x = random_uniform<double>(Shape{2, 3, 6, 6}, -1, 1, rng);
        const std::vector<int> labels{1, 2};
        auto rep = gradcheck(
            [&](Tape<double>&, std::span<const Var<double>> v) {
                return ops::cross_entropy(net.forward(v[0], Mode::train), labels);
            },
            {x}, net.parameters());
        INFO(rep.worst);
        CHECK(rep.max_rel_error < 1e-4);
    }
}

TEST_SUITE("network state") {
    TEST_CASE("checkpoint round trip preserves logits") {
        auto net = Network<float>::build(reference_spec(), 21);
        Rng rng = make_rng(9);
        train_step(net, random_uniform<float>(Shape{8, 3, 32, 32}, 0, 1, rng));
        auto bytes = encode_checkpoint(net.state());
        auto other = Network<float>::build(reference_spec(), 22);
        other.load_state(decode_checkpoint(bytes));
        auto probe = random_uniform<float>(Shape{4, 3, 32, 32}, 0, 1, rng);
        CHECK(net.logits(probe).storage() == other.logits(probe).storage());
    }
    TEST_CASE("mismatched state rejected") {
        auto net = Network<float>::build(reference_spec(), 1);
        auto plain = Network<float>::build(reference_spec().with_placement(Placement::none), 1);
        CHECK_THROWS_AS(plain.load_state(net.state()), FormatError);
        CHECK_THROWS_AS(net.load_state(plain.state()), FormatError);
    }
}

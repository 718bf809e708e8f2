#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>

#include "ba2m/core/error.hpp"
#include "ba2m/train/train.hpp"

using namespace ba2m;
using namespace ba2m::train;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ba2m_test_train_" + name);
    std::filesystem::remove_all(p);
    return p;
}

TrainConfig small_config(const std::string& out) {
    TrainConfig c;
    c.epochs = 2;
    c.batch_size = 8;
    c.classes = 2;
    c.train_per_class = 8;
    c.val_per_class = 4;
    c.decay_epochs = {1};
    c.eval_batch_sizes = {1, 3, 8};
    c.output_dir = out;
    return c;
}

bool same_except_wallclock(const MetricLog& a, const MetricLog& b) {
    if (a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto &x = a.records[i], &y = b.records[i];
        if (x.lr != y.lr || x.train_loss != y.train_loss || x.train_acc != y.train_acc || x.val_loss != y.val_loss ||
            x.val_acc != y.val_acc || x.weight_stats.size() != y.weight_stats.size())
            return false;
        for (std::size_t k = 0; k < x.weight_stats.size(); ++k)
            if (x.weight_stats[k].min != y.weight_stats[k].min || x.weight_stats[k].max != y.weight_stats[k].max ||
                x.weight_stats[k].entropy_mean != y.weight_stats[k].entropy_mean)
                return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("defaults and overrides") {
        const TrainConfig d = parse_train_config("");
        CHECK(d.epochs == 20);
        CHECK(d.batch_size == 32);
        CHECK(d.eval_batch_sizes == std::vector<std::size_t>{1, 2, 4, 8, 16});
        CHECK(d.eval_policy == EvalPolicy::deactivated);
        CHECK_FALSE(d.placement.has_value());

        const TrainConfig c = parse_train_config(
            "[train]\nepochs = 3\nbatch_size = 16\ndecay_epochs = 1, 2\nflip = false\neval_policy = per_image\n"
            "[network]\nspec = nets/a.ini\nplacement = none\nscale_by_n = false\n"
            "[data]\nclasses = 3\nseed = 9\n[output]\ndir = out\n",
            "/base");
        CHECK(c.epochs == 3);
        CHECK(c.batch_size == 16);
        CHECK(c.decay_epochs == std::vector<std::size_t>{1, 2});
        CHECK_FALSE(c.flip);
        CHECK(c.eval_policy == EvalPolicy::per_image);
        CHECK(c.spec_path == "/base/nets/a.ini");
        CHECK(c.placement == Placement::none);
        CHECK(c.scale_by_n == false);
        CHECK(c.classes == 3);
        CHECK(c.data_seed == 9);
        CHECK(c.output_dir == "/base/out");
    }
    TEST_CASE("text round trip keeps the hash") {
        TrainConfig c = parse_train_config("[train]\nseed = 4\nbase_lr = 0.05\n[network]\nreduction = 8\n");
        const TrainConfig again = parse_train_config(to_text(c));
        CHECK(again.hash() == c.hash());
        CHECK(again.reduction == std::optional<std::size_t>(8));
        c.seed = 5;
        CHECK(c.hash() != again.hash());
    }
    TEST_CASE("rejections") {
        CHECK_THROWS_AS(parse_train_config("[train]\nepoch = 3\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[optim]\nlr = 1\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\nflip = maybe\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\nbatch_size = ten\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\ndecay_epochs = 1,,2\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\nmomentum = 1\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\neval_policy = sometimes\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[network]\nplacement = above\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[data]\nsource = imagenet\n"), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[data]\nimage_size = 16\n").network_spec(), ConfigError);
        CHECK_THROWS_AS(load_train_config("/nonexistent/train.ini"), FormatError);
    }
    TEST_CASE("learning rate scales with batch and decays") {
        const TrainConfig c;
        CHECK(c.learning_rate(0) == doctest::Approx(0.025));
        CHECK(c.learning_rate(9) == doctest::Approx(0.025));
        CHECK(c.learning_rate(10) == doctest::Approx(0.0025));
        CHECK(c.learning_rate(15) == doctest::Approx(0.00025));
        CHECK(c.learning_rate(19) == doctest::Approx(0.00025));
    }
    TEST_CASE("placement override reaches the network") {
        TrainConfig c;
        CHECK(c.network_spec().blocks.front().ba2m == Placement::none);
        c.placement = Placement::between;
        for (const auto& b : c.network_spec().blocks) CHECK(b.ba2m == Placement::between);
        c.scale_by_n = false;
        CHECK_FALSE(c.network_spec().ba2m.scale_by_n);
    }
}

TEST_SUITE("optimizer") {
    TEST_CASE("momentum and coupled decay, two steps by hand") {
        Parameter<float> p("p", Tensor<float>(Shape{2}, std::vector<float>{1.0f, -2.0f}));
        Sgd sgd({&p}, 0.9, 0.1);
        p.grad = Tensor<float>(Shape{2}, std::vector<float>{0.5f, 0.25f});
        sgd.step(0.1);
        // v = g + wd p
        double v0 = 0.5 + 0.1 * 1.0, v1 = 0.25 + 0.1 * -2.0;
        double p0 = 1.0 - 0.1 * v0, p1 = -2.0 - 0.1 * v1;
        CHECK(p.value[0] == doctest::Approx(p0).epsilon(1e-6));
        CHECK(p.value[1] == doctest::Approx(p1).epsilon(1e-6));
        sgd.zero_grad();
        CHECK(p.grad[0] == 0.f);
        sgd.step(0.05);
        v0 = 0.9 * v0 + 0.1 * p0;
        v1 = 0.9 * v1 + 0.1 * p1;
        CHECK(p.value[0] == doctest::Approx(p0 - 0.05 * v0).epsilon(1e-6));
        CHECK(p.value[1] == doctest::Approx(p1 - 0.05 * v1).epsilon(1e-6));
    }
}

TEST_SUITE("training loop") {
    TEST_CASE("seeded runs repeat and write their outputs") {
        const auto dir = temp_dir("repeat");
        TrainConfig c = small_config(dir.string());
        const DataSplits data = load_data(c);
        auto net_a = Network<float>::build(c.network_spec(), c.seed);
        auto net_b = Network<float>::build(c.network_spec(), c.seed);
        const TrainResult a = run_training(c, data, net_a);
        const TrainResult b = run_training(c, data, net_b, false);
        CHECK(same_except_wallclock(a.log, b.log));
        CHECK(a.initial_train_loss == b.initial_train_loss);
        CHECK(std::isfinite(a.initial_train_loss));
        CHECK(a.log.records.size() == 2);
        CHECK(a.log.records[1].lr == doctest::Approx(c.learning_rate(1)));
        for (const char* f : {"network.ini", "train.ini", "metrics.csv", "metrics.json", "best.ckpt", "final.ckpt"})
            CHECK(std::filesystem::exists(dir / f));
        CHECK(a.log.to_csv().find("block3_entropy_mean") != std::string::npos);

        const double ln_n = std::log(static_cast<double>(c.batch_size));
        for (const auto& r : a.log.records) {
            CHECK(r.weight_stats.size() == 2);
            for (const auto& w : r.weight_stats) {
                CHECK(w.min > 0);
                CHECK(w.min <= w.max);
                CHECK(w.entropy_min <= w.entropy_mean);
                CHECK(w.entropy_mean <= w.entropy_max);
                CHECK(w.entropy_max <= ln_n + 1e-9);
            }
        }
        std::filesystem::remove_all(dir);
    }
    TEST_CASE("checkpoint round trip keeps predictions and normalisation") {
        const auto dir = temp_dir("ckpt");
        TrainConfig c = small_config(dir.string());
        c.epochs = 1;
        const DataSplits data = load_data(c);
        auto net = Network<float>::build(c.network_spec(), 3);
        const TrainResult r = run_training(c, data, net);
        const Evaluation before = evaluate(net, data.val, 4, r.normalization);

        auto fresh = Network<float>::build(c.network_spec(), 99);
        const data::Normalization n = load_training_checkpoint(dir / "final.ckpt", fresh);
        CHECK(n.mean == r.normalization.mean);
        CHECK(n.stddev == r.normalization.stddev);
        const Evaluation after = evaluate(fresh, data.val, 4, n);
        CHECK(after.predictions == before.predictions);
        CHECK(after.loss == before.loss);

        auto plain = Network<float>::build(c.network_spec().with_placement(Placement::none), 1);
        CHECK_THROWS_AS(load_training_checkpoint(dir / "final.ckpt", plain), FormatError);
        std::filesystem::remove_all(dir);
    }
    TEST_CASE("non-finite loss aborts with a dump") {
        const auto dir = temp_dir("nan");
        TrainConfig c = small_config(dir.string());
        const DataSplits data = load_data(c);
        auto net = Network<float>::build(c.network_spec(), 1);
        auto params = net.parameters();
        for (float& v : params.back()->value.storage()) v = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(run_training(c, data, net), NumericError);
        CHECK(std::filesystem::exists(dir / "last_good.ckpt"));
        CHECK(std::filesystem::exists(dir / "nan_dump.json"));
        std::filesystem::remove_all(dir);
    }
}

TEST_SUITE("evaluation") {
    TEST_CASE("batch sizes and worker counts agree") {
        TrainConfig c = small_config("unused");
        c.val_per_class = 7;
        const DataSplits data = load_data(c);
        auto net = Network<float>::build(c.network_spec(), 5);
        const TrainResult r = run_training(c, data, net, false);

        const auto rows = evaluate_batch_sizes(net, data.val, {1, 2, 4, 8, 16}, r.normalization);
        REQUIRE(rows.size() == 5);
        for (const auto& row : rows) CHECK(row.accuracy == rows.front().accuracy);

        const Evaluation one = evaluate(net, data.val, 3, r.normalization, {}, 1);
        const Evaluation three = evaluate(net, data.val, 3, r.normalization, {}, 3);
        CHECK(one.predictions == three.predictions);
        CHECK(one.loss == three.loss);
        CHECK(one.predictions.size() == data.val.size());

        ForwardOptions per_image;
        per_image.eval_policy = EvalPolicy::per_image;
        CHECK(evaluate(net, data.val, 5, r.normalization, per_image).predictions == one.predictions);

        CHECK_THROWS_AS(evaluate_batch_sizes(net, data.val, {}, r.normalization), InputError);
    }
    TEST_CASE("thread count from the environment") {
        ::setenv("BA2M_THREADS", "3", 1);
        CHECK(thread_count_from_env() == 3);
        ::setenv("BA2M_THREADS", "zero", 1);
        CHECK(thread_count_from_env() == 1);
        ::unsetenv("BA2M_THREADS");
        CHECK(thread_count_from_env() == 1);
    }
}

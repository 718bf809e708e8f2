// Acceptance gate: one PASS/FAIL line per criterion, each with its measured value, tolerance
// and wallclock against its time budget. Exit status is non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include <spdlog/spdlog.h>

#include "ba2m/attention/attention.hpp"
#include "ba2m/checks/gradcheck_suite.hpp"
#include "ba2m/complexity/complexity.hpp"
#include "ba2m/core/checkpoint.hpp"
#include "ba2m/core/error.hpp"
#include "ba2m/core/random.hpp"
#include "ba2m/data/data.hpp"
#include "ba2m/theory/theory.hpp"
#include "ba2m/train/train.hpp"

#ifndef BA2M_FIXTURE_DIR
#error "BA2M_FIXTURE_DIR must point at tests/data"
#endif

namespace {

using namespace ba2m;
namespace cx = ba2m::complexity;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
};

std::string fmt_g(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

// 1 -------------------------------------------------------------------------------------------

Outcome gradients() {
    const auto entries = checks::run_gradcheck_suite("all", 0);
    std::string worst;
    double m = 0;
    bool has_network = false, has_coupling = false;
    for (const auto& e : entries) {
        if (e.report.max_rel_error >= m) {
            m = e.report.max_rel_error;
            worst = e.scope + "/" + e.name;
        }
        has_network = has_network || e.name == "network_end_to_end_n2";
        has_coupling = has_coupling || e.name == "sar_and_batch_softmax";
    }
    return {m < 1e-4 && has_network && has_coupling,
            std::to_string(entries.size()) + " checks, max rel err " + fmt_g(m, 3) + " (" + worst + ") < 1e-4"};
}

// 2 -------------------------------------------------------------------------------------------

std::vector<double> weights_of(const std::vector<double>& sar) {
    Tape<double> t(false);
    Tensor<double> x(Shape{sar.size()}, sar);
    return batch_excite(t.constant(x), Mode::train).weights;
}

Outcome weight_normalization() {
    const std::size_t sizes[] = {1, 2, 4, 64, 256};
    std::size_t batches = 0, failures = 0;
    double worst_sum = 0, worst_oracle = 0, worst_shift = 0, worst_perm = 0;
    std::string first_failure;
    for (std::size_t b = 0; b < 1000; ++b) {
        const std::size_t N = sizes[b % 5];
        Rng rng = make_rng(2024, b);
        // Spread varies per batch so both flat and peaked weight vectors occur.
        const double spread = std::uniform_real_distribution<double>(0.01, 12.0)(rng);
        std::vector<double> sar(N);
        for (double& a : sar) a = std::uniform_real_distribution<double>(-spread, spread)(rng);
        const auto w = weights_of(sar);

        // Independent oracle: direct exponentials in long double, no max shift.
        long double z = 0;
        for (double a : sar) z += std::exp(static_cast<long double>(a));
        double sum = 0;
        bool open_interval = true;
        for (std::size_t i = 0; i < N; ++i) {
            sum += w[i];
            worst_oracle = std::max(worst_oracle, std::abs(w[i] - static_cast<double>(std::exp(static_cast<long double>(sar[i])) / z)));
            if (N >= 2 && !(w[i] > 0.0 && w[i] < 1.0)) open_interval = false;
        }
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));

        const double c = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
        std::vector<double> shifted(sar);
        for (double& a : shifted) a += c;
        const auto ws = weights_of(shifted);
        std::vector<std::size_t> perm(N);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<double> permuted(N);
        for (std::size_t i = 0; i < N; ++i) permuted[i] = sar[perm[i]];
        const auto wp = weights_of(permuted);
        for (std::size_t i = 0; i < N; ++i) {
            worst_shift = std::max(worst_shift, std::abs(ws[i] - w[i]));
            worst_perm = std::max(worst_perm, std::abs(wp[i] - w[perm[i]]));
        }
        const bool ok = std::abs(sum - 1.0) <= 1e-6 && open_interval && (N != 1 || w[0] == 1.0);
        if (!ok && failures++ == 0) first_failure = " first failure: batch " + std::to_string(b);
        ++batches;
    }
    const bool pass = failures == 0 && worst_oracle <= 1e-12 && worst_shift <= 1e-12 && worst_perm <= 1e-12;
    return {pass, std::to_string(batches) + " batches, |sum-1| max " + fmt_g(worst_sum, 2) + " <= 1e-6, oracle " +
                      fmt_g(worst_oracle, 2) + ", shift " + fmt_g(worst_shift, 2) + ", permutation " +
                      fmt_g(worst_perm, 2) + " (each <= 1e-12)" + first_failure};
}

// 3 -------------------------------------------------------------------------------------------

Outcome inference_invariance() {
    const auto dir = std::filesystem::temp_directory_path() / "ba2m_acceptance_c3";
    std::filesystem::remove_all(dir);
    train::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.decay_epochs = {};
    cfg.output_dir = dir.string();
    const auto data = train::load_data(cfg);
    auto net = Network<float>::build(cfg.network_spec(), 0);
    const auto trained = train::run_training(cfg, data, net);

    auto restored = Network<float>::build(cfg.network_spec(), 1);
    const data::Normalization norm = train::load_training_checkpoint(dir / "final.ckpt", restored);
    const data::Dataset probe = data::synth_generate(4, 16, 32, 4242, {}, data::Split::val);

    const auto reference = train::evaluate(restored, probe, 64, norm).predictions;
    std::size_t agree = 0, total = 0;
    for (auto policy : {EvalPolicy::deactivated, EvalPolicy::per_image}) {
        ForwardOptions opts;
        opts.eval_policy = policy;
        for (std::size_t bs : {1, 2, 4, 8, 16}) {
            const auto got = train::evaluate(restored, probe, bs, norm, opts).predictions;
            for (std::size_t i = 0; i < got.size(); ++i) agree += got[i] == reference[i];
            total += got.size();
        }
    }
    std::filesystem::remove_all(dir);
    return {agree == total && total == 640,
            "64 probe images x batch sizes {1,2,4,8,16} x 2 eval policies: " + std::to_string(agree) + "/" +
                std::to_string(total) + " argmax agreement (checkpoint val acc " +
                fmt_g(trained.log.records.back().val_acc, 3) + ")"};
}

// 4 -------------------------------------------------------------------------------------------

Outcome theory_suite() {
    const auto r = theory::verify_theory(10000, 0);
    const std::size_t violations = r.lemma1.violations + r.lemma2.violations + r.loss_bound.violations;
    return {r.passed && violations == 0 && r.lemma1_w.monotone_decreasing && r.loss_gap_w.monotone_decreasing,
            "3 x 10000 draws, " + std::to_string(violations) + " violations; probes at w=0.5..0.999 monotone: " +
                (r.lemma1_w.monotone_decreasing ? "yes" : "no") + "/" + (r.loss_gap_w.monotone_decreasing ? "yes" : "no")};
}

// 5 -------------------------------------------------------------------------------------------

Outcome complexity_oracle() {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> cdist(1, 32), rdist(1, 32), hw(1, 8), fl(1, 32);
    std::size_t reconciled = 0;
    for (int i = 0; i < 50; ++i) {
        Ba2mConfig cfg;
        cfg.channels = 4 * static_cast<std::size_t>(cdist(rng));
        cfg.reduction = static_cast<std::size_t>(rdist(rng));
        cfg.min_hidden = static_cast<std::size_t>(fl(rng));
        const std::int64_t H = hw(rng), W = hw(rng);
        const cx::ClosedForm f = cx::closed_form(cfg, H, W);
        cx::Rational params = f.params_total(), flops = f.flops_total();
        for (const auto& t : cx::exclusion_ledger(cfg, H, W)) (t.metric == "params" ? params : flops) += t.value;
        const cx::GraphCount g = cx::graph_count(cfg, H, W);
        reconciled += params == cx::Rational(static_cast<std::int64_t>(g.params_total())) &&
                      flops == cx::Rational(static_cast<std::int64_t>(g.flops_total()));
    }
    cx::Rational delta = 0;
    for (std::int64_t C : {256, 512, 1024, 2048}) delta += cx::closed_form(C, 1, 1, 32).params_total();
    const double d = static_cast<double>(cx::floor_of(delta));
    const double rel = d / 650000.0 - 1.0;
    return {reconciled == 50 && std::abs(rel) <= 0.25,
            std::to_string(reconciled) + "/50 configs reconcile exactly; ResNet-50 delta " + cx::to_string(delta) +
                " params (" + (rel >= 0 ? "+" : "") + fmt_g(100 * rel, 3) + "% of 650000, band +-25%)"};
}

// 6 -------------------------------------------------------------------------------------------

Outcome ablation_structure() {
    const auto rows = cx::reduction_sweep(reference_spec(4), {2, 4, 8, 16, 32});
    bool ok = rows.size() == 5;
    std::string params = "params", flops = "flops";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        params += (i ? " > " : " ") + cx::to_string(rows[i].closed.params_total());
        flops += (i ? " > " : " ") + cx::to_string(rows[i].closed.flops_total());
        if (i > 0)
            ok = ok && rows[i].closed.params_total() < rows[i - 1].closed.params_total() &&
                 rows[i].closed.flops_total() < rows[i - 1].closed.flops_total();
    }
    return {ok, "R=2..32 " + params + "; " + flops};
}

// 7 -------------------------------------------------------------------------------------------

struct RunSummary {
    double final_val = 0, best_val = 0;
    train::MetricLog log;
    std::vector<NamedTensor> state;
};

RunSummary train_once(std::uint64_t seed, bool baseline) {
    train::TrainConfig cfg;
    cfg.seed = seed;
    if (baseline) cfg.placement = Placement::none;
    const auto data = train::load_data(cfg);
    auto net = Network<float>::build(cfg.network_spec(), seed);
    const auto r = train::run_training(cfg, data, net, false);
    return {r.log.records.back().val_acc, r.best_val_acc, r.log, net.state()};
}

bool same_run(const RunSummary& a, const RunSummary& b) {
    if (a.log.records.size() != b.log.records.size() || a.state.size() != b.state.size()) return false;
    for (std::size_t i = 0; i < a.log.records.size(); ++i) {
        const auto &x = a.log.records[i], &y = b.log.records[i];
        if (x.train_loss != y.train_loss || x.val_loss != y.val_loss || x.val_acc != y.val_acc) return false;
    }
    return encode_checkpoint(a.state) == encode_checkpoint(b.state);
}

Outcome desk_training() {
    std::vector<double> ba2m_acc, base_acc;
    RunSummary first;
    std::ostringstream per_seed;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        RunSummary with = train_once(seed, false);
        const RunSummary without = train_once(seed, true);
        spdlog::info("seed {}: BA2M final val {:.4f} (best {:.4f}), baseline final val {:.4f}", seed, with.final_val,
                     with.best_val, without.final_val);
        ba2m_acc.push_back(with.final_val);
        base_acc.push_back(without.final_val);
        per_seed << (seed ? " " : "") << fmt_g(with.final_val, 3) << "/" << fmt_g(without.final_val, 3);
        if (seed == 0) first = std::move(with);
    }
    const bool deterministic = same_run(first, train_once(0, false));
    const double mean_ba2m = std::accumulate(ba2m_acc.begin(), ba2m_acc.end(), 0.0) / 5;
    const double mean_base = std::accumulate(base_acc.begin(), base_acc.end(), 0.0) / 5;
    const bool reaches = first.best_val > 0.9;
    const bool non_inferior = mean_ba2m >= mean_base - 0.01;
    return {reaches && deterministic && non_inferior,
            "seed 0 best val " + fmt_g(first.best_val, 4) + " > 0.9 in 20 epochs; rerun identical: " +
                (deterministic ? "yes" : "no") + "; 5-seed mean final val BA2M " + fmt_g(mean_ba2m, 4) +
                " vs baseline " + fmt_g(mean_base, 4) + " (margin -0.01); per seed BA2M/baseline " + per_seed.str()};
}

// 8 -------------------------------------------------------------------------------------------

Outcome data_fidelity() {
    const auto path = std::filesystem::path(BA2M_FIXTURE_DIR) / "cifar100_fixture.bin";
    const auto bytes = read_file_bytes(path);
    const data::Dataset d = data::read_cifar100(path, data::Split::train, 100);
    const bool round_trip = data::serialize_cifar100(d) == bytes;

    const auto a = data::synth_generate(4, 32, 32, 17), b = data::synth_generate(4, 32, 32, 17),
               c = data::synth_generate(4, 32, 32, 18);
    const bool same = a.images.storage() == b.images.storage() && a.labels == b.labels;
    const bool differs = a.images.storage() != c.images.storage();
    return {round_trip && same && differs && d.size() == 100,
            std::to_string(d.size()) + "-record fixture round trip byte-exact: " + (round_trip ? "yes" : "no") +
                "; synthetic same seed bit-identical: " + (same ? "yes" : "no") +
                "; other seed differs: " + (differs ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BA2M acceptance gate"};
    std::vector<int> only;
    app.add_option("criteria", only, "Criterion numbers to run (default: all)");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::warn);

    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", 120, gradients},
        {2, "weight normalization", 10, weight_normalization},
        {3, "inference invariance", 60, inference_invariance},
        {4, "theory suite", 30, theory_suite},
        {5, "complexity oracle", 10, complexity_oracle},
        {6, "ablation structure", 10, ablation_structure},
        {7, "desk-scale training", 900, desk_training},
        {8, "data fidelity", 5, data_fidelity},
    };
    std::size_t failed = 0, ran = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs < c.budget_s;
        const bool pass = o.pass && in_time;
        std::printf("%s  %d  %-22s %s [%.1f s / %.0f s budget%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    o.detail.c_str(), secs, c.budget_s, in_time ? "" : ", over budget");
        std::fflush(stdout);
        failed += !pass;
        ++ran;
    }
    std::printf("%zu/%zu criteria passed\n", ran - failed, ran);
    return failed == 0 ? 0 : 1;
}

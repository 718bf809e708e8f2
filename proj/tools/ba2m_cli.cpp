// ba2m: train, eval, complexity, verify-theory and gradcheck front end.
//
// Exit codes: 0 success, 1 a check failed, 2 usage/config error, 3 I/O or format error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "ba2m/checks/gradcheck_suite.hpp"
#include "ba2m/complexity/complexity.hpp"
#include "ba2m/core/error.hpp"
#include "ba2m/theory/theory.hpp"
#include "ba2m/train/train.hpp"

#ifndef BA2M_BUILD_ID
#define BA2M_BUILD_ID "unknown"
#endif

namespace {

using namespace ba2m;
namespace cx = ba2m::complexity;

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format = "text";
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
    if (with_config) cmd->add_option("--config", c.config, "Train config (INI)");
    cmd->add_option("--seed", c.seed, "RNG seed");
    cmd->add_option("--out", c.out, "Output directory or file");
    cmd->add_option("--format", c.format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));
}

void log_run(const char* command, std::uint64_t seed, const std::string& config_hash) {
    spdlog::info("ba2m {} | build {} | seed {} | config {}", command, BA2M_BUILD_ID, seed, config_hash);
}

train::TrainConfig load_config(const Common& c) {
    train::TrainConfig cfg = c.config.empty() ? train::TrainConfig{} : train::load_train_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out << text;
}

int cmd_train(const Common& c) {
    const train::TrainConfig cfg = load_config(c);
    log_run("train", cfg.seed, cfg.hash());
    const auto data = train::load_data(cfg);
    auto net = Network<float>::build(cfg.network_spec(), cfg.seed);
    spdlog::info("network '{}' with {} parameters; {} train / {} val images", net.spec().name, net.parameter_count(),
                 data.train.size(), data.val.size());
    const train::TrainResult r = train::run_training(cfg, data, net);
    const auto& last = r.log.records.back();
    ForwardOptions opts;
    opts.eval_policy = cfg.eval_policy;
    const auto sizes = train::evaluate_batch_sizes(net, data.val, cfg.eval_batch_sizes, r.normalization, opts,
                                                   train::thread_count_from_env());
    if (c.format == "json") {
        nlohmann::json j = {{"best_val_acc", r.best_val_acc},
                            {"best_epoch", r.best_epoch},
                            {"final_val_acc", last.val_acc},
                            {"initial_train_loss", r.initial_train_loss},
                            {"final_train_loss", last.train_loss},
                            {"output_dir", cfg.output_dir}};
        std::cout << j.dump(2) << "\n";
    } else if (c.format == "csv") {
        std::cout << r.log.to_csv();
    } else {
        std::cout << "final val acc " << last.val_acc << " (best " << r.best_val_acc << " at epoch " << r.best_epoch
                  << "); train loss " << r.initial_train_loss << " -> " << last.train_loss << "\n";
        std::cout << "predictions identical across eval batch sizes:";
        for (const auto& s : sizes) std::cout << " " << s.batch_size;
        std::cout << "\noutputs in " << cfg.output_dir << "\n";
    }
    return kOk;
}

int cmd_eval(const Common& c, std::string checkpoint, const std::vector<std::size_t>& batch_sizes,
             const std::string& policy) {
    train::TrainConfig cfg = load_config(c);
    if (!batch_sizes.empty()) cfg.eval_batch_sizes = batch_sizes;
    if (cfg.eval_batch_sizes.empty()) throw InputError("--batch-sizes must not be empty");
    if (checkpoint.empty()) checkpoint = (std::filesystem::path(cfg.output_dir) / "best.ckpt").string();
    log_run("eval", cfg.seed, cfg.hash());
    const auto data = train::load_data(cfg);
    auto net = Network<float>::build(cfg.network_spec(), cfg.seed);
    const data::Normalization norm = train::load_training_checkpoint(checkpoint, net);
    ForwardOptions opts;
    opts.eval_policy = policy == "per_image" ? EvalPolicy::per_image : policy == "deactivated" ? EvalPolicy::deactivated
                                                                                                : cfg.eval_policy;
    const auto results = train::evaluate_batch_sizes(net, data.val, cfg.eval_batch_sizes, norm, opts,
                                                     train::thread_count_from_env());
    if (c.format == "json") {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : results) j.push_back({{"batch_size", r.batch_size}, {"accuracy", r.accuracy}});
        std::cout << nlohmann::json{{"checkpoint", checkpoint}, {"results", j}, {"predictions_identical", true}}.dump(2)
                  << "\n";
    } else {
        if (c.format == "csv") std::cout << "batch_size,accuracy\n";
        for (const auto& r : results)
            std::cout << r.batch_size << (c.format == "csv" ? "," : "  accuracy ") << std::setprecision(6)
                      << r.accuracy << "\n";
        if (c.format == "text") std::cout << "predictions identical across batch sizes\n";
    }
    return kOk;
}

int cmd_complexity(const Common& c, const std::string& spec_path, const std::vector<std::int64_t>& reductions) {
    NetworkSpec spec = reference_spec(4);
    if (!spec_path.empty()) spec = load_network_spec(spec_path);
    else if (!c.config.empty()) spec = load_config(c).network_spec();
    log_run("complexity", c.seed.value_or(0), std::to_string(std::hash<std::string>{}(to_text(spec))));
    const auto rows = cx::reduction_sweep(spec, reductions);
    bool ok = true;
    std::ostringstream detail;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].reduction <= rows[i - 1].reduction) continue;
        if (!(rows[i].closed.params_total() < rows[i - 1].closed.params_total()) ||
            !(rows[i].closed.flops_total() < rows[i - 1].closed.flops_total())) {
            ok = false;
            detail << "closed form not strictly decreasing between R=" << rows[i - 1].reduction << " and R="
                   << rows[i].reduction << "\n";
        }
    }
    // Closed form + exclusion ledger must equal the graph count of every placement.
    const auto sizes = spec.spatial_sizes();
    for (std::int64_t r : reductions) {
        const NetworkSpec s = spec.with_reduction(static_cast<std::size_t>(r));
        for (std::size_t i = 0; i < s.blocks.size(); ++i) {
            if (s.blocks[i].ba2m == Placement::none) continue;
            const auto cfg = s.ba2m_for_block(i);
            const auto H = static_cast<std::int64_t>(sizes[i + 1].first), W = static_cast<std::int64_t>(sizes[i + 1].second);
            const cx::ClosedForm f = cx::closed_form(cfg, H, W);
            cx::Rational params = f.params_total(), flops = f.flops_total();
            for (const auto& t : cx::exclusion_ledger(cfg, H, W)) (t.metric == "params" ? params : flops) += t.value;
            const cx::GraphCount g = cx::graph_count(cfg, H, W);
            if (params != cx::Rational(static_cast<std::int64_t>(g.params_total())) ||
                flops != cx::Rational(static_cast<std::int64_t>(g.flops_total()))) {
                ok = false;
                detail << "R=" << r << " block" << i << ": closed form + ledger does not match the graph count\n";
            }
        }
    }
    write_or_print(c.out, cx::render(rows, cx::parse_format(c.format)));
    std::cerr << detail.str();
    return ok ? kOk : kCheckFailed;
}

int cmd_verify_theory(const Common& c, std::size_t draws, const std::string& report) {
    const std::uint64_t seed = c.seed.value_or(0);
    log_run("verify-theory", seed, "draws=" + std::to_string(draws));
    const theory::TheoryReport r = theory::verify_theory(draws, seed);
    if (!report.empty()) write_or_print(report, r.to_json() + "\n");
    write_or_print(c.out, c.format == "json" ? r.to_json() + "\n" : r.to_text());
    return r.passed ? kOk : kCheckFailed;
}

int cmd_gradcheck(const Common& c, const std::string& scope) {
    const std::uint64_t seed = c.seed.value_or(0);
    log_run("gradcheck", seed, "scope=" + scope);
    const auto entries = checks::run_gradcheck_suite(scope, seed);
    constexpr double kTolerance = 1e-4;
    std::ostringstream out;
    if (c.format == "json") {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& e : entries)
            j.push_back({{"scope", e.scope},
                         {"name", e.name},
                         {"max_rel_error", e.report.max_rel_error},
                         {"coords", e.report.coords_checked},
                         {"worst", e.report.worst},
                         {"pass", e.report.max_rel_error < kTolerance}});
        out << j.dump(2) << "\n";
    } else {
        if (c.format == "csv") out << "scope,name,max_rel_error,coords,pass\n";
        for (const auto& e : entries) {
            const bool pass = e.report.max_rel_error < kTolerance;
            if (c.format == "csv")
                out << e.scope << "," << e.name << "," << e.report.max_rel_error << "," << e.report.coords_checked << ","
                    << (pass ? "true" : "false") << "\n";
            else
                out << (pass ? "ok   " : "FAIL ") << std::left << std::setw(10) << e.scope << std::setw(28) << e.name
                    << " max rel err " << std::scientific << std::setprecision(2) << e.report.max_rel_error
                    << std::defaultfloat << " over " << e.report.coords_checked << " coords\n";
        }
        if (c.format == "text") out << "max relative error " << checks::max_error(entries) << " (tolerance 1e-4)\n";
    }
    write_or_print(c.out, out.str());
    return checks::max_error(entries) < kTolerance ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    // stdout carries the report (possibly JSON or CSV); logs go to stderr.
    spdlog::set_default_logger(spdlog::stderr_color_mt("ba2m"));
    CLI::App app{"BA2M batch-aware attention toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(BA2M_BUILD_ID));

    Common common;
    auto* train_cmd = app.add_subcommand("train", "Train a network from a config");
    add_common(train_cmd, common);

    std::string checkpoint, policy;
    std::vector<std::size_t> batch_sizes;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint at several batch sizes");
    add_common(eval_cmd, common);
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/best.ckpt)");
    eval_cmd->add_option("--batch-sizes", batch_sizes, "Comma-separated eval batch sizes")->delimiter(',');
    eval_cmd->add_option("--policy", policy, "deactivated or per_image")
        ->check(CLI::IsMember({"deactivated", "per_image"}));

    std::string spec_path;
    std::vector<std::int64_t> reductions{2, 4, 8, 16, 32};
    auto* cx_cmd = app.add_subcommand("complexity", "Params/FLOPs per reduction R");
    add_common(cx_cmd, common);
    cx_cmd->add_option("--spec", spec_path, "Network spec (INI); default: reference spec");
    cx_cmd->add_option("--R", reductions, "Comma-separated reductions")->delimiter(',');

    std::size_t draws = 10000;
    std::string report;
    auto* th_cmd = app.add_subcommand("verify-theory", "Monte-Carlo checks of the weighting inequalities");
    add_common(th_cmd, common, false);
    th_cmd->add_option("--draws", draws, "Draws per check")->check(CLI::PositiveNumber);
    th_cmd->add_option("--report", report, "JSON report path");

    std::string scope = "all";
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    add_common(gc_cmd, common, false);
    gc_cmd->add_option("--scope", scope, "all, ops, attention or network")
        ->check(CLI::IsMember({"all", "ops", "attention", "network"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train_cmd) return cmd_train(common);
        if (*eval_cmd) return cmd_eval(common, checkpoint, batch_sizes, policy);
        if (*cx_cmd) return cmd_complexity(common, spec_path, reductions);
        if (*th_cmd) return cmd_verify_theory(common, draws, report);
        if (*gc_cmd) return cmd_gradcheck(common, scope);
    } catch (const InvariantViolation& e) {
        spdlog::error("invariant violated: {}", e.what());
        return kCheckFailed;
    } catch (const NumericError& e) {
        spdlog::error("{}", e.what());
        return kCheckFailed;
    } catch (const FormatError& e) {
        spdlog::error("format error: {}", e.what());
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        spdlog::error("I/O error: {}", e.what());
        return kIo;
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return kUsage;
    }
    return kUsage;
}

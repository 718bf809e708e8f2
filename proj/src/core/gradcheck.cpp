#include "ba2m/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ba2m/core/ops.hpp"
#include "ba2m/core/random.hpp"

namespace ba2m {

double gradient_relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

void GradCheckReport::merge(const GradCheckReport& other) {
    coords_checked += other.coords_checked;
    if (worst.empty() || other.max_rel_error > max_rel_error) {
        max_rel_error = other.max_rel_error;
        worst = other.worst;
    }
}

namespace {

std::vector<std::size_t> pick_coords(std::size_t numel, const GradCheckOptions& opt, Rng& rng) {
    std::vector<std::size_t> idx(numel);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_coords_per_tensor == 0 || numel <= opt.max_coords_per_tensor) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opt.max_coords_per_tensor);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

GradCheckReport gradcheck(const LossBuilder& build, std::vector<Tensor<double>> inputs,
                          const std::vector<Parameter<double>*>& params, const GradCheckOptions& options) {
    for (Parameter<double>* p : params) p->zero_grad();

    std::vector<std::vector<double>> input_grads;
    {
        Tape<double> tape(true);
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(tape.input(t));
        const Var<double> loss = build(tape, vars);
        tape.backward(loss);
        for (const auto& v : vars) {
            auto g = tape.grad(v);
            if (g.empty()) input_grads.emplace_back(v.value().numel(), 0.0);
            else input_grads.emplace_back(g.begin(), g.end());
        }
    }
    std::vector<std::vector<double>> param_grads;
    for (Parameter<double>* p : params) param_grads.emplace_back(p->grad.storage());

    auto evaluate = [&]() {
        Tape<double> tape(false);
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(tape.input(t));
        return build(tape, vars).value()[0];
    };

    Rng rng = make_rng(options.seed, 0x6772616463686bull);
    GradCheckReport report;
    auto probe = [&](std::vector<double>& values, const std::vector<double>& analytic, const std::string& label) {
        for (std::size_t k : pick_coords(values.size(), options, rng)) {
            const double saved = values[k];
            values[k] = saved + options.eps;
            const double up = evaluate();
            values[k] = saved - options.eps;
            const double down = evaluate();
            values[k] = saved;
            const double numeric = (up - down) / (2 * options.eps);
            const double err = gradient_relative_error(analytic[k], numeric, options.denominator_floor);
            ++report.coords_checked;
            if (report.worst.empty() || err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = label + "[" + std::to_string(k) + "]";
            }
        }
    };

    for (std::size_t i = 0; i < inputs.size(); ++i)
        probe(inputs[i].storage(), input_grads[i], "input" + std::to_string(i));
    for (std::size_t i = 0; i < params.size(); ++i) probe(params[i]->value.storage(), param_grads[i], params[i]->name);
    return report;
}

GradCheckReport gradcheck_op(const OpBuilder& op, std::vector<Tensor<double>> inputs, const GradCheckOptions& options) {
    Tensor<double> coeffs;
    {
        Tape<double> tape(false);
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(tape.input(t));
        coeffs = Tensor<double>(op(vars).shape());
    }
    Rng rng = make_rng(options.seed, 0x70726f6aull);
    fill_uniform(coeffs, -1.0, 1.0, rng);
    LossBuilder build = [&](Tape<double>&, std::span<const Var<double>> vars) {
        return ops::weighted_sum(op(vars), coeffs);
    };
    return gradcheck(build, std::move(inputs), {}, options);
}

}  // namespace ba2m

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ba2m/core/tape.hpp"

namespace ba2m {

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps components whose
/// true derivative is essentially zero from being judged on finite-difference round-off alone.
double gradient_relative_error(double analytic, double numeric, double floor);

struct GradCheckOptions {
    double eps = 1e-5;
    double denominator_floor = 1e-3;
    /// When nonzero, at most this many coordinates per tensor are probed (chosen by seed).
    std::size_t max_coords_per_tensor = 0;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0;
    std::size_t coords_checked = 0;
    std::string worst;  // "<tensor label>[<flat index>]"

    void merge(const GradCheckReport& other);
};

/// Builds a scalar loss on `tape` from leaves created for `inputs`. Parameters used by the
/// loss must be bound with tape.parameter() inside the builder.
using LossBuilder = std::function<Var<double>(Tape<double>& tape, std::span<const Var<double>> inputs)>;

/// Compares reverse-mode gradients of the loss w.r.t. every input tensor and every listed
/// parameter against central differences.
GradCheckReport gradcheck(const LossBuilder& build, std::vector<Tensor<double>> inputs,
                          const std::vector<Parameter<double>*>& params, const GradCheckOptions& options = {});

/// Convenience for a single op: the loss is a fixed random projection of the op's output.
using OpBuilder = std::function<Var<double>(std::span<const Var<double>> inputs)>;
GradCheckReport gradcheck_op(const OpBuilder& op, std::vector<Tensor<double>> inputs,
                             const GradCheckOptions& options = {});

}  // namespace ba2m

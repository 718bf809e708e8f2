#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ba2m/core/gradcheck.hpp"

namespace ba2m::checks {

struct GradcheckEntry {
    std::string scope;  // "ops", "attention" or "network"
    std::string name;
    GradCheckReport report;
};

/// Central-difference checks in f64 of every differentiable op, each attention branch, the
/// fused module on N = 2 (cross-sample coupling through the batch softmax) and a small
/// two-block network end to end on N = 2. `scope` is ops, attention, network or all;
/// anything else throws InputError.
std::vector<GradcheckEntry> run_gradcheck_suite(const std::string& scope, std::uint64_t seed);

double max_error(const std::vector<GradcheckEntry>& entries);

}  // namespace ba2m::checks

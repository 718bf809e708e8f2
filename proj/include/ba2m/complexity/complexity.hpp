#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <boost/rational.hpp>

#include "ba2m/attention/config.hpp"
#include "ba2m/network/network.hpp"

/// Parameter and FLOP accounting for BA2M.
///
/// FLOP convention: one multiply-accumulate = 2 FLOPs; the remaining per-op costs follow the
/// op-cost table in ba2m/core/ops.hpp. Closed forms are the big-O expressions of the module
/// evaluated in exact rational arithmetic. They count multiply-accumulates of ungrouped
/// convolutions at width C/R and leave out biases, BN, pooling, softmax and the fusion ops;
/// exclusion_ledger() lists every omitted term so closed form + ledger = graph count exactly.
namespace ba2m::complexity {

using Rational = boost::rational<std::int64_t>;

std::int64_t floor_of(const Rational& r);
std::string to_string(const Rational& r);

enum class Branch { ac, als, ags };
const char* to_string(Branch b);

struct ClosedForm {
    Rational params_ac, params_als, params_ags;
    Rational flops_ac, flops_als, flops_ags_conv, flops_ags_matmul;

    Rational params_total() const { return params_ac + params_als + params_ags; }
    Rational flops_total() const { return flops_ac + flops_als + flops_ags_conv + flops_ags_matmul; }
};

/// Params: 2C^2/R, C^2(9+2R)/R^2, 3C^2/R^2.
/// FLOPs:  2C^2/R, HWC^2(9+2R)/R^2, 3HWC^2/R^2 and 2(HW)^2(2C-R)/R for the attention products.
ClosedForm closed_form(std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t R);

/// Closed form restricted to the branches present in `branches`.
ClosedForm closed_form(const Ba2mConfig& config, std::int64_t H, std::int64_t W);

/// One term that the closed form omits or approximates. `group` is "ac", "als", "ags" or
/// "fuse"; `metric` is "params" or "flops".
struct LedgerTerm {
    std::string group;
    std::string metric;
    std::string name;
    Rational value;
};

/// Every difference between closed_form(config) and the instantiated module, derived from the
/// config alone: hidden-width rounding and floors, grouping, MAC-to-FLOP doubling, biases,
/// BN, pooling, softmax and the SAR/batch-softmax/re-weighting ops.
std::vector<LedgerTerm> exclusion_ledger(const Ba2mConfig& config, std::int64_t H, std::int64_t W);

/// Exact counts of an instantiated module or network, keyed by group.
struct GraphCount {
    std::map<std::string, std::uint64_t> params;
    std::map<std::string, std::uint64_t> flops;

    std::uint64_t params_total() const;
    std::uint64_t flops_total() const;
};

/// Builds the module, runs one train-mode forward on a [1,C,H,W] input and groups parameters
/// and recorded op costs by branch ("ac", "als", "ags", "fuse").
GraphCount graph_count(const Ba2mConfig& config, std::int64_t H, std::int64_t W);

/// Per-placement and backbone counts of a network, from its parameter list and a train-mode
/// forward of one sample. Keys: "backbone" and "block<i>.ba2m" for each placement.
template <typename T>
GraphCount graph_count(const Network<T>& net);

/// Sum of closed_form over the network's placements, each at its block's output size.
ClosedForm closed_form(const NetworkSpec& spec);

struct ReductionRow {
    std::int64_t reduction = 0;
    ClosedForm closed;
    std::uint64_t graph_params = 0;  // all BA2M modules
    std::uint64_t graph_flops = 0;
    std::uint64_t network_params = 0;  // backbone + modules
    std::uint64_t network_flops = 0;
};

/// Closed-form and graph counts of `spec` rebuilt at each reduction in `reductions`.
std::vector<ReductionRow> reduction_sweep(const NetworkSpec& spec, const std::vector<std::int64_t>& reductions);

enum class Format { text, csv, json };
Format parse_format(const std::string& s);
std::string render(const std::vector<ReductionRow>& rows, Format format);

}  // namespace ba2m::complexity

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

/// Numerical checks of the inequalities behind feature re-weighting:
///   (x + y)^w < x^w + y^w                 for x, y > 0, 0 < w < 1
///   (sum x_i)^w <= sum x_i^w              for x_i > 0, 0 < w < 1
///   L <= L'                               loss-value weighting vs feature weighting
/// where, for logits f_i, label y_i and weight w_i,
///   L  = (1/N) sum_i [ w_i LSE(f_i)   - w_i f_{i,y_i} ]
///   L' = (1/N) sum_i [ LSE(w_i f_i)   - w_i f_{i,y_i} ].
/// Every check has a stable formulation (used for the verdict) and a naive one (for the
/// cross-check where it does not overflow).
namespace ba2m::theory {

struct Check {
    bool holds = false;
    double margin = 0;  // right side minus left side; >= 0 when the inequality holds
};

/// Throws InputError unless x > 0, y > 0 and 0 < w < 1.
Check lemma1_check(double x, double y, double w);
double lemma1_margin_naive(double x, double y, double w);

/// Throws InputError on an empty vector, a non-positive entry, or w outside (0, 1).
/// A single element gives margin exactly 0 (holds, not strict).
Check lemma2_check(std::span<const double> xs, double w);
double lemma2_margin_naive(std::span<const double> xs, double w);

/// Logits are row-major [N, K].
struct LossRecord {
    std::size_t n = 0, k = 0;
    std::vector<double> logits;
    std::vector<int> labels;
    std::vector<double> weights;
};

struct LossBound {
    double loss = 0;        // L, loss-value weighting
    double loss_prime = 0;  // L', feature weighting
    double gap = 0;         // L' - L
    bool holds = false;
};

/// Throws PreconditionError if any weight is outside (0, 1), InputError on malformed records.
LossBound loss_bound_check(const LossRecord& record);
/// Same quantities by direct exp/log without max subtraction.
LossBound loss_bound_naive(const LossRecord& record);
/// LSE(w f) - w LSE(f) for one row; defined for w in [0, 1] and equal to 0 at w = 1, which
/// is the N = 1 case of batch softmax weights.
double sample_gap(std::span<const double> logits, double w);

struct MonteCarlo {
    std::string name;
    std::size_t draws = 0;
    std::size_t violations = 0;
    double min_margin = 0;
    /// Largest |stable - naive| / max(1, |naive|, size of the differenced terms) over draws
    /// where the naive path is finite.
    double max_naive_deviation = 0;
    std::size_t naive_compared = 0;
};

/// x, y log-uniform on (1e-6, 1e6), w uniform on (0, 1).
MonteCarlo monte_carlo_lemma1(std::size_t draws, std::uint64_t seed);
/// Lengths 2..64, entries log-uniform on (1e-6, 1e6), w uniform on (0, 1).
MonteCarlo monte_carlo_lemma2(std::size_t draws, std::uint64_t seed);
/// N in 2..32, K in 2..10, logits N(0, 3^2), weights uniform on (0.01, 0.99).
MonteCarlo monte_carlo_loss_bound(std::size_t draws, std::uint64_t seed);

struct Probe {
    std::vector<double> ws;
    std::vector<double> values;
    bool monotone_decreasing = false;
};

/// Two-term margin (lemma1_check) at x = y = 1 for each w.
Probe lemma1_probe(const std::vector<double>& ws);
/// Loss gap of a fixed random record (logits in [-5, 5]) with every weight set to w.
Probe loss_gap_probe(const std::vector<double>& ws, std::uint64_t seed);

/// Toy linear classifier: scaling the features of sample i by w_i and taking the plain
/// cross-entropy gives L', computed once through the tensor engine and once by the log-space
/// formula; weighting the per-sample losses instead gives L, also computed both ways.
struct WeightingDemo {
    double loss_prime_engine = 0, loss_prime_formula = 0;
    double loss_engine = 0, loss_formula = 0;
    double max_abs_difference = 0;  // over the two dual-path pairs
    bool bound_holds = false;       // L <= L'
};
WeightingDemo feature_vs_loss_weighting_demo(std::uint64_t seed, std::size_t n = 6, std::size_t k = 4,
                                             std::size_t d = 5);

inline const std::vector<double> kProbeWeights{0.5, 0.9, 0.99, 0.999};

struct TheoryReport {
    MonteCarlo lemma1, lemma2, loss_bound;
    Probe lemma1_w, loss_gap_w;
    WeightingDemo demo;
    bool passed = false;

    std::string to_json() const;
    std::string to_text() const;
};

/// Every check above with `draws` Monte-Carlo draws each. passed requires zero violations,
/// naive agreement within 1e-9, monotone probes, and the demo's dual paths within 1e-12.
TheoryReport verify_theory(std::size_t draws, std::uint64_t seed);

}  // namespace ba2m::theory

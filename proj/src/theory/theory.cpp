#include "ba2m/theory/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "ba2m/core/error.hpp"
#include "ba2m/core/ops.hpp"
#include "ba2m/core/random.hpp"

namespace ba2m::theory {

namespace {

constexpr double kNaiveTolerance = 1e-9;
constexpr double kDemoTolerance = 1e-12;

void check_weight(double w) {
    if (!(w > 0.0 && w < 1.0)) throw InputError("w must lie in (0, 1), got " + std::to_string(w));
}

// Error relative to the size of the terms being differenced, not to the (possibly tiny) margin:
// the naive path cannot do better than that.
double deviation(double stable, double naive, double scale = 0.0) {
    return std::abs(stable - naive) / std::max({1.0, std::abs(naive), scale});
}

double log_uniform(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> d(std::log(lo), std::log(hi));
    return std::exp(d(rng));
}

// w in the open interval; uniform_real_distribution can return its lower bound.
double open_unit(Rng& rng) {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    double w = 0;
    while (w <= 0.0) w = d(rng);
    return w;
}

void validate(const LossRecord& r) {
    if (r.n == 0 || r.k == 0) throw InputError("loss record needs N >= 1 and K >= 1");
    if (r.logits.size() != r.n * r.k || r.labels.size() != r.n || r.weights.size() != r.n)
        throw InputError("loss record sizes do not match N and K");
    for (int y : r.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= r.k) throw InputError("label out of range");
    for (double f : r.logits)
        if (!std::isfinite(f)) throw InputError("non-finite logit");
}

// log sum_j exp(s f_j), max-subtracted.
double lse_scaled(std::span<const double> f, double s) {
    const double m = *std::max_element(f.begin(), f.end());
    double acc = 0;
    for (double v : f) acc += std::exp(s * (v - m));
    return s * m + std::log(acc);
}

void update(MonteCarlo& mc, double margin, bool holds, double naive, double scale) {
    ++mc.draws;
    if (!holds) ++mc.violations;
    mc.min_margin = mc.draws == 1 ? margin : std::min(mc.min_margin, margin);
    if (std::isfinite(naive)) {
        ++mc.naive_compared;
        mc.max_naive_deviation = std::max(mc.max_naive_deviation, deviation(margin, naive, scale));
    }
}

bool strictly_decreasing(const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i] < v[i - 1])) return false;
    return true;
}

nlohmann::json to_json(const MonteCarlo& m) {
    return {{"draws", m.draws},
            {"violations", m.violations},
            {"min_margin", m.min_margin},
            {"max_naive_deviation", m.max_naive_deviation},
            {"naive_compared", m.naive_compared}};
}

nlohmann::json to_json(const Probe& p) {
    return {{"w", p.ws}, {"values", p.values}, {"monotone_decreasing", p.monotone_decreasing}};
}

}  // namespace

Check lemma1_check(double x, double y, double w) {
    if (!(x > 0.0) || !(y > 0.0) || !std::isfinite(x) || !std::isfinite(y))
        throw InputError("x and y must be finite and positive");
    check_weight(w);
    // With a = max, t = min/a: a^w [1 + t^w - (1+t)^w], and (1+t)^w - 1 = expm1(w log1p t).
    const double a = std::max(x, y), t = std::min(x, y) / a;
    const double margin = std::pow(a, w) * (std::pow(t, w) - std::expm1(w * std::log1p(t)));
    return {margin > 0.0, margin};
}

double lemma1_margin_naive(double x, double y, double w) {
    return std::pow(x, w) + std::pow(y, w) - std::pow(x + y, w);
}

Check lemma2_check(std::span<const double> xs, double w) {
    if (xs.empty()) throw InputError("lemma2_check needs at least one value");
    for (double x : xs)
        if (!(x > 0.0) || !std::isfinite(x)) throw InputError("values must be finite and positive");
    check_weight(w);
    const auto top = std::max_element(xs.begin(), xs.end());
    const double a = *top;
    double powers = 0, rest = 0;
    for (auto it = xs.begin(); it != xs.end(); ++it) {
        if (it == top) continue;
        const double r = *it / a;
        powers += std::pow(r, w);
        rest += r;
    }
    const double margin = std::pow(a, w) * (powers - std::expm1(w * std::log1p(rest)));
    return {margin >= 0.0, margin};
}

double lemma2_margin_naive(std::span<const double> xs, double w) {
    double powers = 0, sum = 0;
    for (double x : xs) {
        powers += std::pow(x, w);
        sum += x;
    }
    return powers - std::pow(sum, w);
}

double sample_gap(std::span<const double> f, double w) {
    if (f.empty()) throw InputError("sample_gap needs at least one logit");
    if (!(w >= 0.0 && w <= 1.0)) throw InputError("sample_gap weight must lie in [0, 1]");
    // With d_j = f_j - max f over the non-argmax entries:
    //   LSE(w f) - w LSE(f) = log1p(sum exp(w d_j)) - w log1p(sum exp(d_j)).
    const auto top = std::max_element(f.begin(), f.end());
    const double m = *top;
    double a = 0, b = 0;
    for (auto it = f.begin(); it != f.end(); ++it) {
        if (it == top) continue;
        a += std::exp(w * (*it - m));
        b += std::exp(*it - m);
    }
    return std::log1p(a) - w * std::log1p(b);
}

LossBound loss_bound_check(const LossRecord& r) {
    validate(r);
    for (double w : r.weights)
        if (!(w > 0.0 && w < 1.0))
            throw PreconditionError("feature weights must lie strictly in (0, 1), got " + std::to_string(w));
    LossBound out;
    for (std::size_t i = 0; i < r.n; ++i) {
        std::span<const double> f(r.logits.data() + i * r.k, r.k);
        const double w = r.weights[i];
        const double fy = w * f[static_cast<std::size_t>(r.labels[i])];
        out.loss += w * lse_scaled(f, 1.0) - fy;
        out.loss_prime += lse_scaled(f, w) - fy;
        out.gap += sample_gap(f, w);
    }
    const double n = static_cast<double>(r.n);
    out.loss /= n;
    out.loss_prime /= n;
    out.gap /= n;
    out.holds = out.gap >= 0.0;
    return out;
}

LossBound loss_bound_naive(const LossRecord& r) {
    validate(r);
    LossBound out;
    for (std::size_t i = 0; i < r.n; ++i) {
        const double* f = r.logits.data() + i * r.k;
        const double w = r.weights[i];
        double z = 0, zw = 0;
        for (std::size_t j = 0; j < r.k; ++j) {
            z += std::exp(f[j]);
            zw += std::exp(w * f[j]);
        }
        const double num = std::exp(w * f[r.labels[i]]);
        out.loss += -std::log(num / std::pow(z, w));
        out.loss_prime += -std::log(num / zw);
    }
    out.loss /= static_cast<double>(r.n);
    out.loss_prime /= static_cast<double>(r.n);
    out.gap = out.loss_prime - out.loss;
    out.holds = out.gap >= 0.0;
    return out;
}

MonteCarlo monte_carlo_lemma1(std::size_t draws, std::uint64_t seed) {
    MonteCarlo mc;
    mc.name = "lemma1";
    for (std::size_t i = 0; i < draws; ++i) {
        Rng rng = make_rng(seed, i);
        const double x = log_uniform(rng, 1e-6, 1e6), y = log_uniform(rng, 1e-6, 1e6), w = open_unit(rng);
        const Check c = lemma1_check(x, y, w);
        update(mc, c.margin, c.holds, lemma1_margin_naive(x, y, w), std::pow(x, w) + std::pow(y, w));
    }
    return mc;
}

MonteCarlo monte_carlo_lemma2(std::size_t draws, std::uint64_t seed) {
    MonteCarlo mc;
    mc.name = "lemma2";
    std::vector<double> xs;
    for (std::size_t i = 0; i < draws; ++i) {
        Rng rng = make_rng(seed, i);
        std::uniform_int_distribution<std::size_t> len(2, 64);
        xs.resize(len(rng));
        for (auto& x : xs) x = log_uniform(rng, 1e-6, 1e6);
        const double w = open_unit(rng);
        const Check c = lemma2_check(xs, w);
        double scale = 0;
        for (double x : xs) scale += std::pow(x, w);
        update(mc, c.margin, c.holds, lemma2_margin_naive(xs, w), scale);
    }
    return mc;
}

MonteCarlo monte_carlo_loss_bound(std::size_t draws, std::uint64_t seed) {
    MonteCarlo mc;
    mc.name = "loss_bound";
    for (std::size_t i = 0; i < draws; ++i) {
        Rng rng = make_rng(seed, i);
        std::uniform_int_distribution<std::size_t> nd(2, 32), kd(2, 10);
        std::normal_distribution<double> logit(0.0, 3.0);
        std::uniform_real_distribution<double> wd(0.01, 0.99);
        LossRecord r;
        r.n = nd(rng);
        r.k = kd(rng);
        std::uniform_int_distribution<int> label(0, static_cast<int>(r.k) - 1);
        r.logits.resize(r.n * r.k);
        for (auto& f : r.logits) f = logit(rng);
        for (std::size_t j = 0; j < r.n; ++j) {
            r.labels.push_back(label(rng));
            r.weights.push_back(wd(rng));
        }
        const LossBound s = loss_bound_check(r);
        const LossBound n = loss_bound_naive(r);
        update(mc, s.gap, s.holds, n.gap, std::max(std::abs(n.loss), std::abs(n.loss_prime)));
        // The two sides individually must agree too, not only their difference.
        if (std::isfinite(n.loss) && std::isfinite(n.loss_prime))
            mc.max_naive_deviation = std::max(
                {mc.max_naive_deviation, deviation(s.loss, n.loss), deviation(s.loss_prime, n.loss_prime)});
    }
    return mc;
}

Probe lemma1_probe(const std::vector<double>& ws) {
    Probe p;
    p.ws = ws;
    for (double w : ws) p.values.push_back(lemma1_check(1.0, 1.0, w).margin);
    p.monotone_decreasing = strictly_decreasing(p.values);
    return p;
}

Probe loss_gap_probe(const std::vector<double>& ws, std::uint64_t seed) {
    Rng rng = make_rng(seed, 0x9a9);
    LossRecord r;
    r.n = 8;
    r.k = 5;
    std::uniform_real_distribution<double> logit(-5.0, 5.0);
    std::uniform_int_distribution<int> label(0, 4);
    r.logits.resize(r.n * r.k);
    for (auto& f : r.logits) f = logit(rng);
    for (std::size_t i = 0; i < r.n; ++i) r.labels.push_back(label(rng));
    Probe p;
    p.ws = ws;
    for (double w : ws) {
        r.weights.assign(r.n, w);
        p.values.push_back(loss_bound_check(r).gap);
    }
    p.monotone_decreasing = strictly_decreasing(p.values);
    return p;
}

WeightingDemo feature_vs_loss_weighting_demo(std::uint64_t seed, std::size_t n, std::size_t k, std::size_t d) {
    if (n == 0 || k == 0 || d == 0) throw InputError("demo sizes must be positive");
    Rng rng = make_rng(seed, 0xde70);
    Tensor<double> x = random_uniform<double>(Shape{n, d}, -2.0, 2.0, rng);
    Tensor<double> wc = random_uniform<double>(Shape{k, d}, -1.0, 1.0, rng);
    Tensor<double> weights = random_uniform<double>(Shape{n}, 0.05, 0.95, rng);
    std::vector<int> labels(n);
    std::uniform_int_distribution<int> label(0, static_cast<int>(k) - 1);
    for (auto& y : labels) y = label(rng);

    WeightingDemo demo;
    {
        Tape<double> tape(false);
        auto logits = ops::fully_connected(ops::scale_samples(tape.constant(x), tape.constant(weights)),
                                           tape.constant(wc));
        demo.loss_prime_engine = ops::cross_entropy(logits, std::span<const int>(labels)).value()[0];
    }
    {
        Tape<double> tape(false);
        auto logits = ops::fully_connected(tape.constant(x), tape.constant(wc));
        demo.loss_engine =
            ops::cross_entropy(logits, std::span<const int>(labels), std::span<const double>(weights.storage()))
                .value()[0];
    }
    // Formula path: logits by hand, then the log-space expressions of L and L'.
    LossRecord r;
    r.n = n;
    r.k = k;
    r.labels = labels;
    r.weights.assign(weights.storage().begin(), weights.storage().end());
    r.logits.assign(n * k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t c = 0; c < d; ++c) r.logits[i * k + j] += wc[j * d + c] * x[i * d + c];
    const LossBound b = loss_bound_check(r);
    demo.loss_formula = b.loss;
    demo.loss_prime_formula = b.loss_prime;
    demo.max_abs_difference = std::max(std::abs(demo.loss_engine - demo.loss_formula),
                                       std::abs(demo.loss_prime_engine - demo.loss_prime_formula));
    demo.bound_holds = b.holds && demo.loss_engine <= demo.loss_prime_engine + kDemoTolerance;
    return demo;
}

TheoryReport verify_theory(std::size_t draws, std::uint64_t seed) {
    TheoryReport r;
    r.lemma1 = monte_carlo_lemma1(draws, seed);
    r.lemma2 = monte_carlo_lemma2(draws, seed + 1);
    r.loss_bound = monte_carlo_loss_bound(draws, seed + 2);
    r.lemma1_w = lemma1_probe(kProbeWeights);
    r.loss_gap_w = loss_gap_probe(kProbeWeights, seed);
    r.demo = feature_vs_loss_weighting_demo(seed);
    bool ok = true;
    for (const MonteCarlo* m : {&r.lemma1, &r.lemma2, &r.loss_bound})
        ok = ok && m->violations == 0 && m->max_naive_deviation <= kNaiveTolerance;
    ok = ok && r.lemma1_w.monotone_decreasing && r.loss_gap_w.monotone_decreasing;
    ok = ok && r.demo.max_abs_difference <= kDemoTolerance && r.demo.bound_holds;
    r.passed = ok;
    return r;
}

std::string TheoryReport::to_json() const {
    nlohmann::json j;
    j["lemma1"] = theory::to_json(lemma1);
    j["lemma2"] = theory::to_json(lemma2);
    j["loss_bound"] = theory::to_json(loss_bound);
    j["lemma1_probe"] = theory::to_json(lemma1_w);
    j["loss_gap_probe"] = theory::to_json(loss_gap_w);
    j["weighting_demo"] = {{"loss_engine", demo.loss_engine},
                           {"loss_formula", demo.loss_formula},
                           {"loss_prime_engine", demo.loss_prime_engine},
                           {"loss_prime_formula", demo.loss_prime_formula},
                           {"max_abs_difference", demo.max_abs_difference},
                           {"bound_holds", demo.bound_holds}};
    j["passed"] = passed;
    return j.dump(2);
}

std::string TheoryReport::to_text() const {
    std::ostringstream out;
    out.precision(6);
    for (const MonteCarlo* m : {&lemma1, &lemma2, &loss_bound})
        out << m->name << ": draws=" << m->draws << " violations=" << m->violations << " min_margin=" << m->min_margin
            << " naive_dev=" << m->max_naive_deviation << " (" << m->naive_compared << " compared)\n";
    auto probe = [&](const char* name, const Probe& p) {
        out << name << ":";
        for (std::size_t i = 0; i < p.ws.size(); ++i) out << " w=" << p.ws[i] << ":" << p.values[i];
        out << (p.monotone_decreasing ? " (decreasing)\n" : " (NOT decreasing)\n");
    };
    probe("lemma1 probe", lemma1_w);
    probe("loss gap probe", loss_gap_w);
    out << "weighting demo: L=" << demo.loss_engine << " L'=" << demo.loss_prime_engine
        << " dual-path diff=" << demo.max_abs_difference << "\n";
    out << (passed ? "PASS" : "FAIL") << "\n";
    return out.str();
}

}  // namespace ba2m::theory

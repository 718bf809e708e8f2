#include "ba2m/complexity/complexity.hpp"

#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "ba2m/core/error.hpp"

namespace ba2m::complexity {

namespace {

Rational R_(std::int64_t v) { return Rational(v); }

std::string first_component(const std::string& scope) { return scope.substr(0, scope.find('.')); }

void check_positive(std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t R) {
    if (C < 1 || H < 1 || W < 1 || R < 1) throw InputError("complexity: C, H, W and R must all be >= 1");
}

}  // namespace

std::int64_t floor_of(const Rational& r) {
    std::int64_t q = r.numerator() / r.denominator();
    if (r.numerator() % r.denominator() != 0 && r.numerator() < 0) --q;
    return q;
}

std::string to_string(const Rational& r) {
    if (r.denominator() == 1) return std::to_string(r.numerator());
    return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

const char* to_string(Branch b) {
    switch (b) {
        case Branch::ac: return "ac";
        case Branch::als: return "als";
        case Branch::ags: return "ags";
    }
    return "";
}

ClosedForm closed_form(std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t R) {
    check_positive(C, H, W, R);
    const Rational C2 = R_(C * C), HW = R_(H * W);
    ClosedForm f;
    f.params_ac = C2 * 2 / R;
    f.params_als = C2 * (9 + 2 * R) / (R * R);
    f.params_ags = C2 * 3 / (R * R);
    f.flops_ac = C2 * 2 / R;
    f.flops_als = HW * C2 * (9 + 2 * R) / (R * R);
    f.flops_ags_conv = HW * C2 * 3 / (R * R);
    f.flops_ags_matmul = HW * HW * 2 * (2 * C - R) / R;
    return f;
}

ClosedForm closed_form(const Ba2mConfig& config, std::int64_t H, std::int64_t W) {
    ClosedForm f = closed_form(static_cast<std::int64_t>(config.channels), H, W,
                               static_cast<std::int64_t>(config.reduction));
    if (!config.branches.channel) f.params_ac = f.flops_ac = 0;
    if (!config.branches.local_spatial) f.params_als = f.flops_als = 0;
    if (!config.branches.global_spatial) f.params_ags = f.flops_ags_conv = f.flops_ags_matmul = 0;
    return f;
}

std::vector<LedgerTerm> exclusion_ledger(const Ba2mConfig& config, std::int64_t H, std::int64_t W) {
    config.validate();
    const auto C = static_cast<std::int64_t>(config.channels);
    const auto R = static_cast<std::int64_t>(config.reduction);
    check_positive(C, H, W, R);
    const auto h = static_cast<std::int64_t>(config.hidden());
    const Rational cr(C, R), HW(H * W);
    std::vector<LedgerTerm> out;
    auto add = [&](const char* group, const char* metric, const char* name, Rational v) {
        out.push_back({group, metric, name, v});
    };

    if (config.branches.channel) {
        // The closed form assumes an FC bottleneck of exactly C/R.
        add("ac", "params", "hidden_width", R_(2 * C * h) - 2 * C * cr);
        add("ac", "params", "fc_bias", R_(h + C));
        add("ac", "params", "bn_affine", R_(2 * C));
        add("ac", "flops", "hidden_width", R_(2 * C * h) - 2 * C * cr);
        add("ac", "flops", "mac_to_flop", R_(2 * C * h));
        add("ac", "flops", "fc_bias", R_(h + C));
        add("ac", "flops", "gap", HW * C);
        add("ac", "flops", "bn", R_(2 * C));
    }
    if (config.branches.local_spatial) {
        // 1x1 C->h, 3x3 h->h, 1x1 h->C; the closed form counts them ungrouped at h = C/R.
        const auto G = static_cast<std::int64_t>(config.groups_ls());
        const Rational ungrouped(9 * h * h + 2 * C * h);
        const Rational nominal = 9 * cr * cr + 2 * C * cr;
        add("als", "params", "hidden_width", ungrouped - nominal);
        add("als", "params", "grouping", ungrouped / G - ungrouped);
        add("als", "params", "bn_affine", R_(2 * C));
        add("als", "flops", "hidden_width", HW * (ungrouped - nominal));
        add("als", "flops", "grouping", HW * (ungrouped / G - ungrouped));
        add("als", "flops", "mac_to_flop", HW * ungrouped / G);
        add("als", "flops", "bn", HW * 2 * C);
    }
    if (config.branches.global_spatial) {
        // f, g, h are C->C with G groups; the closed form counts 3 (C/R)^2 weights.
        const auto G = static_cast<std::int64_t>(config.groups_gs());
        const Rational actual(3 * C * C, G);
        add("ags", "params", "projection_width", actual - 3 * cr * cr);
        add("ags", "flops", "projection_width", HW * (actual - 3 * cr * cr));
        add("ags", "flops", "mac_to_flop", HW * actual);
        // Two [HW x C/G x HW] products per group; the closed form's 2(HW)^2(2C-R)/R is asymptotic.
        add("ags", "flops", "attention_products", HW * HW * 4 * C - HW * HW * 2 * (2 * cr - 1));
        add("ags", "flops", "softmax", HW * HW * 3 * G);
    }
    const std::int64_t spatial = std::int64_t{config.branches.local_spatial} + config.branches.global_spatial;
    add("fuse", "flops", "sar_pool", HW * C * spatial);
    if (config.branches.count() > 1) add("fuse", "flops", "sar_max", R_(2 * C));
    add("fuse", "flops", "sar_mean", R_(C));
    add("fuse", "flops", "batch_softmax", R_(3));
    if (config.scale_by_n) add("fuse", "flops", "scale_by_n", R_(1));
    add("fuse", "flops", "reweight", HW * C);
    return out;
}

std::uint64_t GraphCount::params_total() const {
    std::uint64_t n = 0;
    for (const auto& [_, v] : params) n += v;
    return n;
}

std::uint64_t GraphCount::flops_total() const {
    std::uint64_t n = 0;
    for (const auto& [_, v] : flops) n += v;
    return n;
}

GraphCount graph_count(const Ba2mConfig& config, std::int64_t H, std::int64_t W) {
    check_positive(static_cast<std::int64_t>(config.channels), H, W, static_cast<std::int64_t>(config.reduction));
    Rng rng = make_rng(0);
    AttentionStack<double> stack(config, "", rng);
    GraphCount out;
    for (auto* p : stack.parameters()) out.params[first_component(p->name)] += p->numel();
    Tape<double> tape(false);
    const Shape shape{1, config.channels, static_cast<std::size_t>(H), static_cast<std::size_t>(W)};
    ba2m_forward(tape.constant(Tensor<double>(shape, 1.0)), stack, Mode::train);
    for (const auto& c : tape.costs()) out.flops[first_component(c.scope)] += c.flops;
    return out;
}

template <typename T>
GraphCount graph_count(const Network<T>& net) {
    Network<T> copy = net;  // the train-mode pass below updates BN statistics
    const NetworkSpec& spec = copy.spec();
    auto group_of = [](const std::string& name) -> std::string {
        const auto pos = name.find(".ba2m");
        if (pos != std::string::npos && name.rfind("block", 0) == 0) return name.substr(0, pos + 5);
        return "backbone";
    };
    GraphCount out;
    for (auto* p : copy.parameters()) out.params[group_of(p->name)] += p->numel();
    Tape<T> tape(false);
    const Shape shape{1, spec.input_channels, spec.input_height, spec.input_width};
    copy.forward(tape.constant(Tensor<T>(shape, T{0.5})), Mode::train);
    for (const auto& c : tape.costs()) out.flops[group_of(c.scope)] += c.flops;
    return out;
}

template GraphCount graph_count(const Network<float>&);
template GraphCount graph_count(const Network<double>&);

ClosedForm closed_form(const NetworkSpec& spec) {
    spec.validate();
    const auto sizes = spec.spatial_sizes();
    ClosedForm total;
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const BlockSpec& b = spec.blocks[i];
        if (b.ba2m == Placement::none) continue;
        // Inside placement sees the residual branch output, which has the block's output shape.
        const auto [h, w] = sizes[i + 1];
        ClosedForm f = closed_form(spec.ba2m_for_block(i), static_cast<std::int64_t>(h), static_cast<std::int64_t>(w));
        total.params_ac += f.params_ac;
        total.params_als += f.params_als;
        total.params_ags += f.params_ags;
        total.flops_ac += f.flops_ac;
        total.flops_als += f.flops_als;
        total.flops_ags_conv += f.flops_ags_conv;
        total.flops_ags_matmul += f.flops_ags_matmul;
    }
    return total;
}

std::vector<ReductionRow> reduction_sweep(const NetworkSpec& spec, const std::vector<std::int64_t>& reductions) {
    std::vector<ReductionRow> rows;
    for (std::int64_t r : reductions) {
        if (r < 1) throw InputError("reduction must be >= 1, got " + std::to_string(r));
        NetworkSpec s = spec.with_reduction(static_cast<std::size_t>(r));
        auto net = Network<float>::build(s, 0);
        GraphCount g = graph_count(net);
        ReductionRow row;
        row.reduction = r;
        row.closed = closed_form(s);
        for (const auto& [k, v] : g.params)
            if (k != "backbone") row.graph_params += v;
        for (const auto& [k, v] : g.flops)
            if (k != "backbone") row.graph_flops += v;
        row.network_params = g.params_total();
        row.network_flops = g.flops_total();
        rows.push_back(row);
    }
    return rows;
}

Format parse_format(const std::string& s) {
    if (s == "text") return Format::text;
    if (s == "csv") return Format::csv;
    if (s == "json") return Format::json;
    throw InputError("unknown format '" + s + "' (expected text, csv or json)");
}

std::string render(const std::vector<ReductionRow>& rows, Format format) {
    std::ostringstream out;
    if (format == Format::json) {
        nlohmann::json j;
        j["flop_convention"] = "1 multiply-accumulate = 2 FLOPs";
        j["rows"] = nlohmann::json::array();
        for (const auto& r : rows) {
            j["rows"].push_back({
                {"reduction", r.reduction},
                {"closed_params", floor_of(r.closed.params_total())},
                {"closed_flops", floor_of(r.closed.flops_total())},
                {"closed_params_exact", to_string(r.closed.params_total())},
                {"closed_flops_exact", to_string(r.closed.flops_total())},
                {"graph_params", r.graph_params},
                {"graph_flops", r.graph_flops},
                {"network_params", r.network_params},
                {"network_flops", r.network_flops},
            });
        }
        out << j.dump(2) << "\n";
        return out.str();
    }
    const char* header[] = {"R", "closed_params", "closed_flops", "graph_params", "graph_flops", "network_params",
                            "network_flops"};
    auto cells = [](const ReductionRow& r) {
        return std::vector<std::string>{std::to_string(r.reduction),
                                        std::to_string(floor_of(r.closed.params_total())),
                                        std::to_string(floor_of(r.closed.flops_total())),
                                        std::to_string(r.graph_params),
                                        std::to_string(r.graph_flops),
                                        std::to_string(r.network_params),
                                        std::to_string(r.network_flops)};
    };
    if (format == Format::csv) {
        for (std::size_t i = 0; i < 7; ++i) out << (i ? "," : "") << header[i];
        out << "\n";
        for (const auto& r : rows) {
            auto c = cells(r);
            for (std::size_t i = 0; i < c.size(); ++i) out << (i ? "," : "") << c[i];
            out << "\n";
        }
        return out.str();
    }
    out << "# BA2M cost per reduction; FLOPs count one multiply-accumulate as 2; closed forms floored\n";
    for (std::size_t i = 0; i < 7; ++i) out << std::setw(i ? 16 : 4) << header[i];
    out << "\n";
    for (const auto& r : rows) {
        auto c = cells(r);
        for (std::size_t i = 0; i < c.size(); ++i) out << std::setw(i ? 16 : 4) << c[i];
        out << "\n";
    }
    return out.str();
}

}  // namespace ba2m::complexity

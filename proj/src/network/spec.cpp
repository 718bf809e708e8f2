#include "ba2m/network/spec.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ba2m/core/error.hpp"

namespace ba2m {

namespace pt = boost::property_tree;

const char* to_string(BlockKind k) { return k == BlockKind::basic ? "basic" : "residual"; }

const char* to_string(Placement p) {
    switch (p) {
        case Placement::none: return "none";
        case Placement::between: return "between";
        case Placement::inside: return "inside";
    }
    return "none";
}

BlockKind parse_block_kind(const std::string& s) {
    if (s == "basic") return BlockKind::basic;
    if (s == "residual") return BlockKind::residual;
    throw SpecError("unknown block kind '" + s + "' (expected basic or residual)");
}

Placement parse_placement(const std::string& s) {
    if (s == "none") return Placement::none;
    if (s == "between") return Placement::between;
    if (s == "inside") return Placement::inside;
    throw SpecError("unknown placement '" + s + "' (expected none, between or inside)");
}

namespace {

std::size_t strided(std::size_t n, std::size_t stride) { return (n + stride - 1) / stride; }

template <typename V>
V get(const pt::ptree& section, const std::string& section_name, const std::string& key) {
    auto v = section.get_optional<std::string>(key);
    if (!v) throw SpecError("[" + section_name + "] is missing '" + key + "'");
    try {
        return section.get<V>(key);
    } catch (const pt::ptree_error&) {
        throw SpecError("[" + section_name + "] " + key + " = '" + *v + "' is not valid");
    }
}

template <typename V>
V get_or(const pt::ptree& section, const std::string& section_name, const std::string& key, V fallback) {
    if (!section.get_optional<std::string>(key)) return fallback;
    return get<V>(section, section_name, key);
}

bool get_flag(const pt::ptree& section, const std::string& section_name, const std::string& key, bool fallback) {
    auto v = section.get_optional<std::string>(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw SpecError("[" + section_name + "] " + key + " = '" + *v + "' is not a boolean");
}

void check_keys(const pt::ptree& section, const std::string& name, std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : section) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw SpecError("[" + name + "] has unknown key '" + key + "'");
    }
}

}  // namespace

void NetworkSpec::validate() const {
    if (input_channels == 0 || input_height == 0 || input_width == 0)
        throw SpecError("input shape must be positive");
    if (num_classes < 2) throw SpecError("num_classes must be >= 2");
    if (stem.out_channels == 0) throw SpecError("stem out_channels must be positive");
    if (stem.stride != 1 && stem.stride != 2) throw SpecError("stem stride must be 1 or 2");
    if (blocks.empty()) throw SpecError("network needs at least one block");
    std::size_t width = stem.out_channels;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const BlockSpec& b = blocks[i];
        const std::string where = "block " + std::to_string(i) + ": ";
        if (b.in_channels != width)
            throw SpecError(where + "in_channels " + std::to_string(b.in_channels) + " does not match previous width " +
                            std::to_string(width));
        if (b.out_channels == 0) throw SpecError(where + "out_channels must be positive");
        if (b.stride != 1 && b.stride != 2) throw SpecError(where + "stride must be 1 or 2");
        if (b.kind == BlockKind::basic && b.ba2m == Placement::inside)
            throw SpecError(where + "inside placement needs a residual block");
        if (b.kind == BlockKind::basic && b.mid_channels != 0)
            throw SpecError(where + "mid_channels only applies to residual blocks");
        if (b.ba2m != Placement::none) {
            try {
                ba2m_for_block(i).validate();
            } catch (const Error& e) {
                throw SpecError(where + e.what());
            }
        }
        width = b.out_channels;
    }
}

Ba2mConfig NetworkSpec::ba2m_for_block(std::size_t i) const {
    Ba2mConfig c = ba2m;
    c.channels = blocks.at(i).out_channels;
    return c;
}

std::size_t NetworkSpec::placement_count() const {
    return static_cast<std::size_t>(
        std::count_if(blocks.begin(), blocks.end(), [](const BlockSpec& b) { return b.ba2m != Placement::none; }));
}

std::vector<std::pair<std::size_t, std::size_t>> NetworkSpec::spatial_sizes() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t h = strided(input_height, stem.stride), w = strided(input_width, stem.stride);
    out.emplace_back(h, w);
    for (const auto& b : blocks) {
        h = strided(h, b.stride);
        w = strided(w, b.stride);
        out.emplace_back(h, w);
    }
    return out;
}

NetworkSpec NetworkSpec::with_placement(Placement p) const {
    NetworkSpec s = *this;
    for (auto& b : s.blocks) b.ba2m = (p == Placement::inside && b.kind == BlockKind::basic) ? Placement::between : p;
    return s;
}

NetworkSpec NetworkSpec::with_reduction(std::size_t r) const {
    NetworkSpec s = *this;
    s.ba2m.reduction = r;
    return s;
}

NetworkSpec parse_network_spec(const std::string& text) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw SpecError(std::string("network spec: ") + e.what());
    }

    NetworkSpec spec;
    spec.blocks.clear();
    std::map<std::size_t, BlockSpec> blocks;
    for (const auto& [name, section] : tree) {
        if (name == "network") {
            check_keys(section, name, {"name", "input_channels", "input_height", "input_width", "num_classes"});
            spec.name = get_or<std::string>(section, name, "name", spec.name);
            spec.input_channels = get<std::size_t>(section, name, "input_channels");
            spec.input_height = get<std::size_t>(section, name, "input_height");
            spec.input_width = get<std::size_t>(section, name, "input_width");
            spec.num_classes = get<std::size_t>(section, name, "num_classes");
        } else if (name == "stem") {
            check_keys(section, name, {"out_channels", "stride"});
            spec.stem.out_channels = get<std::size_t>(section, name, "out_channels");
            spec.stem.stride = get_or<std::size_t>(section, name, "stride", 1);
        } else if (name == "ba2m") {
            check_keys(section, name,
                       {"reduction", "min_hidden", "group_count_ls", "group_count_gs", "branches", "scale_by_n"});
            spec.ba2m.reduction = get_or<std::size_t>(section, name, "reduction", spec.ba2m.reduction);
            spec.ba2m.min_hidden = get_or<std::size_t>(section, name, "min_hidden", spec.ba2m.min_hidden);
            if (section.get_optional<std::string>("group_count_ls"))
                spec.ba2m.group_count_ls = get<std::size_t>(section, name, "group_count_ls");
            if (section.get_optional<std::string>("group_count_gs"))
                spec.ba2m.group_count_gs = get<std::size_t>(section, name, "group_count_gs");
            if (auto b = section.get_optional<std::string>("branches")) {
                try {
                    spec.ba2m.branches = BranchSet::parse(*b);
                } catch (const ConfigError& e) {
                    throw SpecError(std::string("[ba2m] ") + e.what());
                }
            }
            spec.ba2m.scale_by_n = get_flag(section, name, "scale_by_n", false);
        } else if (name.rfind("block.", 0) == 0) {
            std::size_t index = 0;
            try {
                std::size_t used = 0;
                index = std::stoul(name.substr(6), &used);
                if (used != name.size() - 6) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw SpecError("bad block section name [" + name + "]");
            }
            check_keys(section, name, {"kind", "in_channels", "out_channels", "stride", "mid_channels", "ba2m"});
            BlockSpec b;
            b.kind = parse_block_kind(get_or<std::string>(section, name, "kind", "residual"));
            b.in_channels = get<std::size_t>(section, name, "in_channels");
            b.out_channels = get<std::size_t>(section, name, "out_channels");
            b.stride = get_or<std::size_t>(section, name, "stride", 1);
            b.mid_channels = get_or<std::size_t>(section, name, "mid_channels", 0);
            b.ba2m = parse_placement(get_or<std::string>(section, name, "ba2m", "none"));
            if (!blocks.emplace(index, b).second) throw SpecError("duplicate section [" + name + "]");
        } else {
            throw SpecError("unknown section [" + name + "]");
        }
    }
    std::size_t expect = 0;
    for (const auto& [index, b] : blocks) {
        if (index != expect) throw SpecError("block sections must be numbered 0.." + std::to_string(blocks.size() - 1));
        spec.blocks.push_back(b);
        ++expect;
    }
    spec.validate();
    return spec;
}

NetworkSpec load_network_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("cannot open network spec '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_network_spec(ss.str());
}

std::string to_text(const NetworkSpec& spec) {
    std::ostringstream out;
    out << "[network]\n"
        << "name = " << spec.name << "\n"
        << "input_channels = " << spec.input_channels << "\n"
        << "input_height = " << spec.input_height << "\n"
        << "input_width = " << spec.input_width << "\n"
        << "num_classes = " << spec.num_classes << "\n\n"
        << "[stem]\n"
        << "out_channels = " << spec.stem.out_channels << "\n"
        << "stride = " << spec.stem.stride << "\n\n"
        << "[ba2m]\n"
        << "reduction = " << spec.ba2m.reduction << "\n"
        << "min_hidden = " << spec.ba2m.min_hidden << "\n";
    if (spec.ba2m.group_count_ls) out << "group_count_ls = " << *spec.ba2m.group_count_ls << "\n";
    if (spec.ba2m.group_count_gs) out << "group_count_gs = " << *spec.ba2m.group_count_gs << "\n";
    out << "branches = " << spec.ba2m.branches.to_string() << "\n"
        << "scale_by_n = " << (spec.ba2m.scale_by_n ? "true" : "false") << "\n";
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const BlockSpec& b = spec.blocks[i];
        out << "\n[block." << i << "]\n"
            << "kind = " << to_string(b.kind) << "\n"
            << "in_channels = " << b.in_channels << "\n"
            << "out_channels = " << b.out_channels << "\n"
            << "stride = " << b.stride << "\n";
        if (b.mid_channels) out << "mid_channels = " << b.mid_channels << "\n";
        out << "ba2m = " << to_string(b.ba2m) << "\n";
    }
    return out.str();
}

NetworkSpec reference_spec(std::size_t num_classes) {
    NetworkSpec s;
    s.name = "reference";
    s.num_classes = num_classes;
    s.stem = {16, 2};
    s.ba2m.reduction = 4;
    s.ba2m.min_hidden = 8;
    // With 1/N weights the BN running statistics are collected on shrunken features and no
    // longer match eval inputs (weight 1); mean-one weights keep the two consistent.
    s.ba2m.scale_by_n = true;
    // One module per stage, at the stage output.
    s.blocks = {
        {BlockKind::residual, 16, 16, 2, 0, Placement::none},
        {BlockKind::residual, 16, 16, 1, 0, Placement::between},
        {BlockKind::residual, 16, 32, 2, 0, Placement::none},
        {BlockKind::residual, 32, 32, 1, 0, Placement::between},
    };
    return s;
}

}  // namespace ba2m

#include "ba2m/attention/config.hpp"

#include <algorithm>
#include <sstream>

#include "ba2m/core/error.hpp"

namespace ba2m {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

// Largest g <= cap dividing every width with each width / g >= min(floor, width).
std::size_t derive_groups(std::size_t cap, std::initializer_list<std::size_t> widths, std::size_t floor) {
    for (std::size_t g = std::max<std::size_t>(cap, 1); g > 1; --g) {
        bool ok = true;
        for (std::size_t w : widths) ok = ok && w % g == 0 && w / g >= std::min(floor, w);
        if (ok) return g;
    }
    return 1;
}

}  // namespace

BranchSet BranchSet::parse(const std::string& text) {
    BranchSet set{false, false, false};
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item == "ca") set.channel = true;
        else if (item == "lsa") set.local_spatial = true;
        else if (item == "gsa") set.global_spatial = true;
        else if (!item.empty()) throw ConfigError("unknown branch '" + item + "' (expected ca, lsa or gsa)");
    }
    if (set.empty()) throw ConfigError("branch subset must be nonempty");
    return set;
}

std::string BranchSet::to_string() const {
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += ',';
        out += name;
    };
    add(channel, "ca");
    add(local_spatial, "lsa");
    add(global_spatial, "gsa");
    return out;
}

std::size_t Ba2mConfig::hidden() const { return std::max(channels / std::max<std::size_t>(reduction, 1), min_hidden); }

std::size_t Ba2mConfig::groups_ls() const {
    if (group_count_ls) return *group_count_ls;
    return derive_groups(reduction, {channels, hidden()}, min_hidden);
}

std::size_t Ba2mConfig::groups_gs() const {
    if (group_count_gs) return *group_count_gs;
    return derive_groups(reduction, {channels}, min_hidden);
}

void Ba2mConfig::validate() const {
    if (channels == 0) throw ConfigError("ba2m: channels must be positive");
    if (reduction == 0) throw ConfigError("ba2m: reduction must be >= 1");
    if (min_hidden == 0) throw ConfigError("ba2m: min_hidden must be positive");
    if (branches.empty()) throw ConfigError("ba2m: branch subset must be nonempty");
    const std::size_t gl = groups_ls(), gg = groups_gs(), h = hidden();
    if (gl == 0 || gg == 0) throw GroupingError("ba2m: group counts must be positive");
    if (branches.local_spatial && (channels % gl != 0 || h % gl != 0))
        throw GroupingError("ba2m: local spatial group count " + std::to_string(gl) + " must divide channels " +
                            std::to_string(channels) + " and hidden width " + std::to_string(h));
    if (branches.global_spatial && channels % gg != 0)
        throw GroupingError("ba2m: global spatial group count " + std::to_string(gg) + " must divide channels " +
                            std::to_string(channels));
}

}  // namespace ba2m

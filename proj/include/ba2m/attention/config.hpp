#pragma once

#include <cstddef>
#include <optional>
#include <string>

namespace ba2m {

/// Which of the three attention branches take part in the SAR fusion.
struct BranchSet {
    bool channel = true;
    bool local_spatial = true;
    bool global_spatial = true;

    bool empty() const { return !channel && !local_spatial && !global_spatial; }
    std::size_t count() const { return std::size_t{channel} + local_spatial + global_spatial; }

    /// Comma-separated subset of {ca, lsa, gsa}; order and whitespace are ignored.
    static BranchSet parse(const std::string& text);
    std::string to_string() const;

    friend bool operator==(const BranchSet&, const BranchSet&) = default;
};

/// Shape of one BA2M instance.
///
/// hidden() = max(C / R, min_hidden) is the bottleneck width of the channel branch and of the
/// local spatial branch. Group counts left unset are derived from R: the largest count g <= R
/// that divides the branch's channel widths while keeping at least min(min_hidden, C)
/// channels per group. Explicit group counts are used as given and must divide.
struct Ba2mConfig {
    std::size_t channels = 0;
    std::size_t reduction = 32;
    std::size_t min_hidden = 32;
    std::optional<std::size_t> group_count_ls;
    std::optional<std::size_t> group_count_gs;
    BranchSet branches;
    /// Multiplies train-mode weights by N so their mean is 1 instead of 1/N.
    bool scale_by_n = false;

    std::size_t hidden() const;
    std::size_t groups_ls() const;
    std::size_t groups_gs() const;

    /// Throws ConfigError / GroupingError on an unusable configuration.
    void validate() const;

    friend bool operator==(const Ba2mConfig&, const Ba2mConfig&) = default;
};

}  // namespace ba2m

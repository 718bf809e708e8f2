#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ba2m/attention/config.hpp"

namespace ba2m {

enum class BlockKind { basic, residual };
enum class Placement { none, between, inside };

const char* to_string(BlockKind k);
const char* to_string(Placement p);
BlockKind parse_block_kind(const std::string& s);
Placement parse_placement(const std::string& s);

/// basic: conv3x3-BN-ReLU-conv3x3-BN-ReLU, no shortcut.
/// residual: bottleneck 1x1 (in -> mid) / 3x3 (mid -> mid) / 1x1 (mid -> out), each followed by
/// BN, with ReLU after the first two and after the shortcut addition. The shortcut is a 1x1
/// conv + BN when in != out or stride != 1. The stride sits on the first conv.
struct BlockSpec {
    BlockKind kind = BlockKind::residual;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t stride = 1;
    std::size_t mid_channels = 0;  // residual only; 0 means out_channels / 2
    Placement ba2m = Placement::none;

    std::size_t mid() const { return mid_channels ? mid_channels : std::max<std::size_t>(out_channels / 2, 1); }
    bool has_projection() const { return kind == BlockKind::residual && (in_channels != out_channels || stride != 1); }

    friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Stem conv3x3 (input channels -> out_channels) + BN + ReLU.
struct StemSpec {
    std::size_t out_channels = 16;
    std::size_t stride = 1;

    friend bool operator==(const StemSpec&, const StemSpec&) = default;
};

/// Declarative network: stem, ordered blocks with their BA2M placements, GAP + FC head.
/// `ba2m` is the template for every placement; its channel count is filled in per block.
struct NetworkSpec {
    std::string name = "network";
    std::size_t input_channels = 3;
    std::size_t input_height = 32;
    std::size_t input_width = 32;
    std::size_t num_classes = 10;
    StemSpec stem;
    std::vector<BlockSpec> blocks;
    Ba2mConfig ba2m;

    /// Throws SpecError on an inconsistent channel chain, bad strides or placements.
    void validate() const;
    /// The attention config used at block i (channels = that block's out width).
    Ba2mConfig ba2m_for_block(std::size_t i) const;
    std::size_t placement_count() const;
    /// Spatial size after the stem and after each block, in order.
    std::vector<std::pair<std::size_t, std::size_t>> spatial_sizes() const;

    /// Copy with every placement set to p.
    NetworkSpec with_placement(Placement p) const;
    NetworkSpec with_reduction(std::size_t r) const;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// INI-style text: [network], [stem], [ba2m] and one [block.<i>] section per block.
NetworkSpec parse_network_spec(const std::string& text);
NetworkSpec load_network_spec(const std::string& path);
std::string to_text(const NetworkSpec& spec);

/// The shipped desk-scale network: 32x32 input, stride-2 stem, residual stages of widths
/// {16, 32} with two blocks each (each stage opens with a stride-2 block, so the stages run
/// at 8x8 and 4x4). One BA2M module sits at the output of each stage, the last one feeding
/// the classifier, with weights scaled by N.
NetworkSpec reference_spec(std::size_t num_classes = 4);

}  // namespace ba2m

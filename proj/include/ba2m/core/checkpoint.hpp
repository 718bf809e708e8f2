#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "ba2m/core/tensor.hpp"

namespace ba2m {

/// One entry of a checkpoint container; dtype follows the tensor's precision.
struct NamedTensor {
    std::string name;
    std::variant<Tensor<float>, Tensor<double>> tensor;

    const Shape& shape() const;
    /// Values widened to double regardless of stored precision.
    std::vector<double> as_double() const;
};

/// Flat binary container:
///   "BA2M" | u32 version | u32 count |
///   count x ( u16 name_len | name bytes | u8 dtype (0=f32, 1=f64) | u8 rank | u32 dims[rank] | values )
/// All integers and values little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace ba2m

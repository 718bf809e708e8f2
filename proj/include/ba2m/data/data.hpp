#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ba2m/core/random.hpp"
#include "ba2m/core/batch_norm.hpp"
#include "ba2m/core/tensor.hpp"

namespace ba2m::data {

enum class Split { train, val };
const char* to_string(Split s);

struct Dataset {
    Tensor<float> images;  // [M,3,H,W], values in [0,1]
    std::vector<int> labels;
    std::vector<int> coarse_labels;  // CIFAR-100 only; empty otherwise
    std::size_t class_count = 0;
    Split split = Split::train;

    std::size_t size() const { return labels.size(); }
    /// Throws FormatError if labels, shapes or pixel values break the invariants.
    void validate() const;
};

/// Knobs of the synthetic generator. Each class has a fixed hue, grating frequency and
/// orientation, and blob position; every image jitters them and adds Gaussian noise.
struct SynthOptions {
    double noise = 0.08;         // pixel noise stddev
    double color_jitter = 0.06;  // per-image offset on each channel of the class colour
    double position_jitter = 0.12;  // blob centre jitter, fraction of the image side
};

/// Deterministic in (K, per_class, image_size, seed, options). Labels are grouped by class
/// in generation order; exactly per_class images per class. Throws InputError if K < 2,
/// per_class == 0 or image_size < 4.
Dataset synth_generate(std::size_t classes, std::size_t per_class, std::size_t image_size, std::uint64_t seed,
                       const SynthOptions& options = {}, Split split = Split::train);

/// CIFAR-100 binary layout: per record 1 coarse label byte, 1 fine label byte, then 3072
/// bytes of R, G, B planes, each 32x32 row-major.
inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarTrainRecords = 50000;
inline constexpr std::size_t kCifarValRecords = 10000;

/// Throws FormatError (with the byte offset) on a trailing partial record, a record count
/// other than `expected_records` when given, or a label byte out of range.
Dataset parse_cifar100(const std::vector<std::uint8_t>& bytes, Split split,
                       std::optional<std::size_t> expected_records = std::nullopt);
/// Reads the file; the expected count defaults to 50,000 for train and 10,000 for val.
Dataset read_cifar100(const std::filesystem::path& path, Split split);
Dataset read_cifar100(const std::filesystem::path& path, Split split, std::optional<std::size_t> expected_records);

/// Inverse of parse_cifar100 for datasets with 3x32x32 images and coarse labels.
std::vector<std::uint8_t> serialize_cifar100(const Dataset& d);
void write_cifar100(const std::filesystem::path& path, const Dataset& d);

/// Dataset dump in the checkpoint container: "images", "labels", "coarse_labels" (may be
/// empty) and "meta" = [class_count, split].
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

struct Normalization {
    std::array<float, 3> mean{0.f, 0.f, 0.f};
    std::array<float, 3> stddev{1.f, 1.f, 1.f};

    /// Per-channel mean and (population) stddev over every pixel of the dataset.
    static Normalization from(const Dataset& d);
};

struct Augmentation {
    std::size_t random_crop_pad = 0;  // zero-pad by this much, then crop back at a random offset
    bool horizontal_flip = false;     // with probability 0.5
};

struct Batch {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<std::size_t> indices;  // dataset rows, in batch order
};

/// Epoch-based iterator. Train mode shuffles with a stream derived from (seed, epoch),
/// augments, and drops the trailing partial batch so every batch has exactly N images.
/// Eval mode walks the dataset in order, keeps the partial batch and never augments.
/// Normalization, when set, applies in both modes.
class BatchIterator {
public:
    BatchIterator(const Dataset& dataset, std::size_t batch_size, Mode mode, std::uint64_t seed,
                  Augmentation augmentation = {}, std::optional<Normalization> normalization = std::nullopt);

    void start_epoch(std::size_t epoch);
    /// nullopt marks the end of the epoch.
    std::optional<Batch> next();
    std::size_t batches_per_epoch() const;
    std::size_t batch_size() const { return batch_size_; }

private:
    const Dataset* dataset_;
    std::size_t batch_size_;
    Mode mode_;
    std::uint64_t seed_;
    Augmentation augmentation_;
    std::optional<Normalization> normalization_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::size_t batch_index_ = 0;
    std::vector<std::size_t> order_;
};

/// Copy of image i with zero padding `pad`, cropped back at (dy, dx) in [0, 2 pad], and
/// optionally mirrored left-right. Exposed for tests.
void crop_flip_into(const Tensor<float>& images, std::size_t i, std::size_t pad, std::size_t dy, std::size_t dx,
                    bool flip, float* out);

}  // namespace ba2m::data

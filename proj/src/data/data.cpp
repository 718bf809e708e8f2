#include "ba2m/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "ba2m/core/checkpoint.hpp"
#include "ba2m/core/error.hpp"

namespace ba2m::data {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr int kCifarFine = 100, kCifarCoarse = 20;

// Shuffle streams use the epoch directly; augmentation streams set the top bit.
constexpr std::uint64_t kAugmentStream = 1ull << 63;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    const double i = std::floor(h * 6.0), f = h * 6.0 - i;
    const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

struct ClassFamily {
    std::array<double, 3> color;
    double frequency;    // grating cycles per image side
    double orientation;  // radians
    double blob_y, blob_x;  // centre, fraction of the side
};

ClassFamily family(std::size_t k, std::size_t K) {
    const double pi = std::numbers::pi;
    const double u = static_cast<double>(k) / static_cast<double>(K);
    ClassFamily f;
    f.color = hsv_to_rgb(u, 0.65, 0.75);
    f.frequency = 1.5 + static_cast<double>(k % 3);
    f.orientation = pi * u;
    f.blob_y = 0.5 + 0.25 * std::sin(2 * pi * u);
    f.blob_x = 0.5 + 0.25 * std::cos(2 * pi * u);
    return f;
}

Dataset from_entries(const std::vector<NamedTensor>& entries, const std::string& where) {
    const NamedTensor* images = nullptr;
    const NamedTensor* labels = nullptr;
    const NamedTensor* coarse = nullptr;
    const NamedTensor* meta = nullptr;
    for (const auto& e : entries) {
        if (e.name == "images") images = &e;
        else if (e.name == "labels") labels = &e;
        else if (e.name == "coarse_labels") coarse = &e;
        else if (e.name == "meta") meta = &e;
        else throw FormatError(where + ": unexpected dataset entry '" + e.name + "'");
    }
    if (!images || !labels || !meta) throw FormatError(where + ": dataset needs images, labels and meta entries");
    const auto* img = std::get_if<Tensor<float>>(&images->tensor);
    if (!img) throw FormatError(where + ": images must be stored as f32");
    const auto m = meta->as_double();
    if (m.size() != 2) throw FormatError(where + ": meta must hold [class_count, split]");
    Dataset d;
    d.images = *img;
    for (double v : labels->as_double()) d.labels.push_back(static_cast<int>(v));
    if (coarse)
        for (double v : coarse->as_double()) d.coarse_labels.push_back(static_cast<int>(v));
    d.class_count = static_cast<std::size_t>(m[0]);
    d.split = m[1] == 0.0 ? Split::train : Split::val;
    d.validate();
    return d;
}

}  // namespace

const char* to_string(Split s) { return s == Split::train ? "train" : "val"; }

void Dataset::validate() const {
    if (images.shape().rank() != 4 || images.shape()[1] != 3)
        throw FormatError("dataset images must be [M,3,H,W], got " + images.shape().to_string());
    if (labels.empty() || images.shape()[0] != labels.size())
        throw FormatError("dataset has " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(images.shape()[0]) + " images");
    if (!coarse_labels.empty() && coarse_labels.size() != labels.size())
        throw FormatError("coarse label count does not match label count");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= class_count)
            throw FormatError("label " + std::to_string(y) + " outside [0, " + std::to_string(class_count) + ")");
    for (float v : images.storage())
        if (!(v >= 0.f && v <= 1.f)) throw FormatError("pixel value outside [0, 1]");
}

Dataset synth_generate(std::size_t K, std::size_t per_class, std::size_t S, std::uint64_t seed,
                       const SynthOptions& options, Split split) {
    if (K < 2) throw InputError("synthetic dataset needs at least 2 classes");
    if (per_class == 0) throw InputError("synthetic dataset needs at least one image per class");
    if (S < 4) throw InputError("synthetic image size must be >= 4");
    const double pi = std::numbers::pi;
    const std::size_t M = K * per_class, plane = S * S;
    Dataset d;
    d.images = Tensor<float>(Shape{M, 3, S, S});
    d.labels.resize(M);
    d.class_count = K;
    d.split = split;
    const double side = static_cast<double>(S);
    const double sigma = 0.14 * side;
    for (std::size_t i = 0; i < M; ++i) {
        const std::size_t k = i / per_class;
        d.labels[i] = static_cast<int>(k);
        const ClassFamily f = family(k, K);
        // Each image has its own stream so any subset regenerates identically.
        Rng rng = make_rng(seed, i);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::array<double, 3> color;
        for (std::size_t c = 0; c < 3; ++c) color[c] = f.color[c] + options.color_jitter * (2 * unit(rng) - 1);
        const double phase = 2 * pi * unit(rng);
        const double theta = f.orientation + 0.2 * (2 * unit(rng) - 1);
        const double freq = f.frequency * (1.0 + 0.1 * (2 * unit(rng) - 1));
        const double by = (f.blob_y + options.position_jitter * gauss(rng)) * side;
        const double bx = (f.blob_x + options.position_jitter * gauss(rng)) * side;
        const double ct = std::cos(theta), st = std::sin(theta);
        float* out = d.images.storage().data() + i * 3 * plane;
        for (std::size_t y = 0; y < S; ++y) {
            for (std::size_t x = 0; x < S; ++x) {
                const double fy = static_cast<double>(y), fx = static_cast<double>(x);
                const double grating = std::sin(2 * pi * freq * (fx * ct + fy * st) / side + phase);
                const double r2 = (fy - by) * (fy - by) + (fx - bx) * (fx - bx);
                const double blob = std::exp(-r2 / (2 * sigma * sigma));
                for (std::size_t c = 0; c < 3; ++c) {
                    double v = 0.55 * color[c] + 0.12 * grating + 0.3 * blob + options.noise * gauss(rng);
                    out[c * plane + y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return d;
}

Dataset parse_cifar100(const std::vector<std::uint8_t>& bytes, Split split, std::optional<std::size_t> expected) {
    const std::size_t whole = bytes.size() / kCifarRecordBytes;
    if (bytes.size() % kCifarRecordBytes != 0)
        throw FormatError("CIFAR-100 file truncated: partial record at byte offset " +
                          std::to_string(whole * kCifarRecordBytes) + " (" + std::to_string(bytes.size()) +
                          " bytes total)");
    if (whole == 0) throw FormatError("CIFAR-100 file is empty (byte offset 0)");
    if (expected && whole != *expected) {
        const std::size_t offset = std::min(whole, *expected) * kCifarRecordBytes;
        throw FormatError("CIFAR-100 file " + std::string(whole > *expected ? "oversized" : "truncated") + ": " +
                          std::to_string(whole) + " records, expected " + std::to_string(*expected) +
                          ", first mismatch at byte offset " + std::to_string(offset));
    }
    Dataset d;
    d.images = Tensor<float>(Shape{whole, 3, kCifarSide, kCifarSide});
    d.labels.resize(whole);
    d.coarse_labels.resize(whole);
    d.class_count = kCifarFine;
    d.split = split;
    float* out = d.images.storage().data();
    for (std::size_t r = 0; r < whole; ++r) {
        const std::size_t at = r * kCifarRecordBytes;
        const int coarse = bytes[at], fine = bytes[at + 1];
        if (coarse >= kCifarCoarse)
            throw FormatError("CIFAR-100 coarse label " + std::to_string(coarse) + " at byte offset " +
                              std::to_string(at));
        if (fine >= kCifarFine)
            throw FormatError("CIFAR-100 fine label " + std::to_string(fine) + " at byte offset " +
                              std::to_string(at + 1));
        d.coarse_labels[r] = coarse;
        d.labels[r] = fine;
        for (std::size_t p = 0; p < kCifarPixels; ++p)
            out[r * kCifarPixels + p] = static_cast<float>(bytes[at + 2 + p]) / 255.0f;
    }
    return d;
}

Dataset read_cifar100(const std::filesystem::path& path, Split split) {
    return read_cifar100(path, split, split == Split::train ? kCifarTrainRecords : kCifarValRecords);
}

Dataset read_cifar100(const std::filesystem::path& path, Split split, std::optional<std::size_t> expected) {
    return parse_cifar100(read_file_bytes(path), split, expected);
}

std::vector<std::uint8_t> serialize_cifar100(const Dataset& d) {
    d.validate();
    const Shape& s = d.images.shape();
    if (s[2] != kCifarSide || s[3] != kCifarSide) throw InputError("CIFAR-100 images must be 3x32x32");
    if (d.coarse_labels.size() != d.size()) throw InputError("CIFAR-100 serialization needs coarse labels");
    std::vector<std::uint8_t> bytes;
    bytes.reserve(d.size() * kCifarRecordBytes);
    const float* px = d.images.storage().data();
    for (std::size_t r = 0; r < d.size(); ++r) {
        if (d.labels[r] >= kCifarFine || d.coarse_labels[r] < 0 || d.coarse_labels[r] >= kCifarCoarse)
            throw InputError("label outside the CIFAR-100 range in record " + std::to_string(r));
        bytes.push_back(static_cast<std::uint8_t>(d.coarse_labels[r]));
        bytes.push_back(static_cast<std::uint8_t>(d.labels[r]));
        for (std::size_t p = 0; p < kCifarPixels; ++p)
            bytes.push_back(static_cast<std::uint8_t>(std::lround(px[r * kCifarPixels + p] * 255.0f)));
    }
    return bytes;
}

void write_cifar100(const std::filesystem::path& path, const Dataset& d) { write_file_bytes(path, serialize_cifar100(d)); }

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
    d.validate();
    const std::size_t M = d.size();
    std::vector<NamedTensor> entries;
    entries.push_back({"images", d.images});
    Tensor<double> labels(Shape{M});
    for (std::size_t i = 0; i < M; ++i) labels[i] = d.labels[i];
    entries.push_back({"labels", labels});
    if (!d.coarse_labels.empty()) {
        Tensor<double> coarse(Shape{M});
        for (std::size_t i = 0; i < M; ++i) coarse[i] = d.coarse_labels[i];
        entries.push_back({"coarse_labels", coarse});
    }
    entries.push_back({"meta", Tensor<double>(Shape{2}, std::vector<double>{static_cast<double>(d.class_count),
                                                                           d.split == Split::train ? 0.0 : 1.0})});
    save_checkpoint(path, entries);
}

Dataset load_dataset(const std::filesystem::path& path) { return from_entries(load_checkpoint(path), path.string()); }

Normalization Normalization::from(const Dataset& d) {
    const Shape& s = d.images.shape();
    const std::size_t plane = s[2] * s[3];
    std::array<double, 3> sum{}, sq{};
    const float* px = d.images.storage().data();
    for (std::size_t i = 0; i < s[0]; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const float* p = px + (i * 3 + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                sum[c] += p[j];
                sq[c] += static_cast<double>(p[j]) * p[j];
            }
        }
    Normalization n;
    const double count = static_cast<double>(s[0] * plane);
    for (std::size_t c = 0; c < 3; ++c) {
        const double mean = sum[c] / count;
        const double var = std::max(sq[c] / count - mean * mean, 0.0);
        n.mean[c] = static_cast<float>(mean);
        n.stddev[c] = static_cast<float>(std::max(std::sqrt(var), 1e-6));
    }
    return n;
}

void crop_flip_into(const Tensor<float>& images, std::size_t i, std::size_t pad, std::size_t dy, std::size_t dx,
                    bool flip, float* out) {
    const Shape& s = images.shape();
    const std::size_t H = s[2], W = s[3];
    const float* src = images.storage().data() + i * 3 * H * W;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                // Position in the padded image, then back to source coordinates.
                const std::size_t ox = flip ? W - 1 - x : x;
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(ox + dx) - static_cast<std::ptrdiff_t>(pad);
                const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(H) &&
                                    sx < static_cast<std::ptrdiff_t>(W);
                out[(c * H + y) * W + x] = inside ? src[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] : 0.f;
            }
}

BatchIterator::BatchIterator(const Dataset& dataset, std::size_t batch_size, Mode mode, std::uint64_t seed,
                             Augmentation augmentation, std::optional<Normalization> normalization)
    : dataset_(&dataset),
      batch_size_(batch_size),
      mode_(mode),
      seed_(seed),
      augmentation_(augmentation),
      normalization_(normalization) {
    if (batch_size == 0) throw InputError("batch size must be >= 1");
    if (mode == Mode::train && dataset.size() < batch_size)
        throw InputError("training set of " + std::to_string(dataset.size()) + " images is smaller than one batch of " +
                         std::to_string(batch_size));
    start_epoch(0);
}

void BatchIterator::start_epoch(std::size_t epoch) {
    epoch_ = epoch;
    cursor_ = 0;
    batch_index_ = 0;
    order_.resize(dataset_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (mode_ == Mode::train) {
        Rng rng = make_rng(seed_, epoch);
        std::shuffle(order_.begin(), order_.end(), rng);
    }
}

std::size_t BatchIterator::batches_per_epoch() const {
    const std::size_t M = dataset_->size();
    return mode_ == Mode::train ? M / batch_size_ : (M + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchIterator::next() {
    if (batch_index_ >= batches_per_epoch()) return std::nullopt;
    const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
    const Shape& s = dataset_->images.shape();
    const std::size_t H = s[2], W = s[3], image = 3 * H * W;
    Batch b;
    b.images = Tensor<float>(Shape{n, 3, H, W});
    b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                     order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + n));
    const bool augment = mode_ == Mode::train && (augmentation_.random_crop_pad > 0 || augmentation_.horizontal_flip);
    Rng rng = make_rng(seed_, kAugmentStream | (static_cast<std::uint64_t>(epoch_) << 32) | batch_index_);
    const std::size_t pad = augmentation_.random_crop_pad;
    std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t row = b.indices[j];
        b.labels.push_back(dataset_->labels[row]);
        float* out = b.images.storage().data() + j * image;
        if (augment) {
            const std::size_t dy = pad ? offset(rng) : 0, dx = pad ? offset(rng) : 0;
            const bool flip = augmentation_.horizontal_flip && coin(rng);
            crop_flip_into(dataset_->images, row, pad, dy, dx, flip, out);
        } else {
            const float* src = dataset_->images.storage().data() + row * image;
            std::copy(src, src + image, out);
        }
        if (normalization_)
            for (std::size_t c = 0; c < 3; ++c) {
                float* p = out + c * H * W;
                for (std::size_t k = 0; k < H * W; ++k) p[k] = (p[k] - normalization_->mean[c]) / normalization_->stddev[c];
            }
    }
    cursor_ += n;
    ++batch_index_;
    return b;
}

}  // namespace ba2m::data

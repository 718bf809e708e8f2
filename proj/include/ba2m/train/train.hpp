#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ba2m/data/data.hpp"
#include "ba2m/network/network.hpp"

namespace ba2m::train {

/// Training run description, read from an INI file:
///
///   [train]   epochs, batch_size, base_lr, reference_batch, decay_epochs (comma list),
///             decay_factor, momentum, weight_decay, seed, crop_pad, flip,
///             eval_batch_sizes (comma list), eval_policy (deactivated|per_image)
///   [network] spec (path, relative to the config file; default: built-in reference spec),
///             placement, reduction, branches, scale_by_n   (overrides, all optional)
///   [data]    source (synthetic|cifar100), classes, train_per_class, val_per_class,
///             image_size, seed, noise, cifar_train, cifar_val
///   [output]  dir
///
/// The learning rate is base_lr * batch_size / reference_batch, multiplied by decay_factor at
/// each listed epoch.
struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double base_lr = 0.1;
    std::size_t reference_batch = 128;
    std::vector<std::size_t> decay_epochs{10, 15};
    double decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;
    std::size_t crop_pad = 2;
    bool flip = true;
    std::vector<std::size_t> eval_batch_sizes{1, 2, 4, 8, 16};
    EvalPolicy eval_policy = EvalPolicy::deactivated;

    std::string spec_path;  // empty: reference_spec(classes)
    std::optional<Placement> placement;
    std::optional<std::size_t> reduction;
    std::optional<BranchSet> branches;
    std::optional<bool> scale_by_n;

    std::string data_source = "synthetic";
    std::size_t classes = 4;
    std::size_t train_per_class = 160;
    std::size_t val_per_class = 64;
    std::size_t image_size = 32;
    std::uint64_t data_seed = 1;
    double noise = data::SynthOptions{}.noise;
    std::string cifar_train, cifar_val;

    std::string output_dir = "runs/default";

    /// Throws ConfigError on values outside their domain.
    void validate() const;
    double learning_rate(std::size_t epoch) const;
    /// Network spec with the overrides applied.
    NetworkSpec network_spec() const;
    /// FNV-1a of to_text(), as 16 hex digits.
    std::string hash() const;
};

/// Throws ConfigError on unknown sections/keys or unparsable values. Relative paths resolve
/// against `base_dir`.
TrainConfig parse_train_config(const std::string& text, const std::filesystem::path& base_dir = {});
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_text(const TrainConfig& c);

/// Train and val splits described by the config.
struct DataSplits {
    data::Dataset train, val;
};
DataSplits load_data(const TrainConfig& c);

/// SGD with momentum and coupled L2 weight decay: v = m v + (g + wd p); p -= lr v.
class Sgd {
public:
    Sgd(std::vector<Parameter<float>*> params, double momentum, double weight_decay);
    void zero_grad();
    void step(double lr);

private:
    std::vector<Parameter<float>*> params_;
    std::vector<std::vector<float>> velocity_;
    double momentum_, weight_decay_;
};

/// Distribution of one placement's batch weights over an epoch. Entropy is that of the
/// weights normalised to sum 1, so it is at most ln N.
struct WeightStats {
    std::size_t block = 0;
    double min = 0, max = 0;
    double entropy_min = 0, entropy_max = 0, entropy_mean = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double lr = 0;
    double train_loss = 0, train_acc = 0;
    double val_loss = 0, val_acc = 0;
    double wallclock_s = 0;
    std::vector<WeightStats> weight_stats;
};

struct MetricLog {
    std::vector<EpochRecord> records;

    std::string to_csv() const;
    std::string to_json() const;
    /// Writes metrics.csv and metrics.json into `dir`.
    void write(const std::filesystem::path& dir) const;
};

struct TrainResult {
    MetricLog log;
    double initial_train_loss = 0;  // loss of the first training batch, before any update
    double best_val_acc = 0;
    std::size_t best_epoch = 0;
    data::Normalization normalization;
};

/// Runs the configured SGD loop on `net`. Writes metrics, best.ckpt (best val accuracy) and
/// network.ini under config.output_dir when write_outputs is set. On a non-finite loss or
/// SAR, saves the last good state to last_good.ckpt, dumps the failing batch's SAR and
/// weight statistics to nan_dump.json, and throws NumericError.
TrainResult run_training(const TrainConfig& config, const DataSplits& data, Network<float>& net,
                         bool write_outputs = true);

/// Network state plus the input normalisation ("data.norm_mean", "data.norm_std").
void save_training_checkpoint(const std::filesystem::path& path, Network<float>& net, const data::Normalization& n);
data::Normalization load_training_checkpoint(const std::filesystem::path& path, Network<float>& net);

struct Evaluation {
    double loss = 0;
    double accuracy = 0;
    std::vector<int> predictions;
};

/// Eval-mode pass over the whole dataset in batches of `batch_size`. Batches are spread over
/// `threads` workers, each with its own copy of the network; results are merged in dataset
/// order.
Evaluation evaluate(Network<float>& net, const data::Dataset& d, std::size_t batch_size,
                    const data::Normalization& n, const ForwardOptions& options = {}, std::size_t threads = 1);

struct BatchSizeResult {
    std::size_t batch_size = 0;
    double accuracy = 0;
};

/// Evaluates at every batch size and checks that predictions agree image by image. Throws
/// InputError on an empty list and InvariantViolation naming the first disagreeing image.
std::vector<BatchSizeResult> evaluate_batch_sizes(Network<float>& net, const data::Dataset& d,
                                                  const std::vector<std::size_t>& batch_sizes,
                                                  const data::Normalization& n, const ForwardOptions& options = {},
                                                  std::size_t threads = 1);

/// Worker count from BA2M_THREADS (default 1, at least 1).
std::size_t thread_count_from_env();

}  // namespace ba2m::train

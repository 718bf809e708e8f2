#include "ba2m/train/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <spdlog/spdlog.h>

#include "json.hpp"

#include "ba2m/core/error.hpp"
#include "ba2m/core/ops.hpp"

namespace ba2m::train {

namespace pt = boost::property_tree;

namespace {

template <typename V>
V get(const pt::ptree& section, const std::string& section_name, const std::string& key, V fallback) {
    auto v = section.get_optional<std::string>(key);
    if (!v) return fallback;
    try {
        return section.get<V>(key);
    } catch (const pt::ptree_error&) {
        throw ConfigError("[" + section_name + "] " + key + " = '" + *v + "' is not valid");
    }
}

bool parse_flag(const std::string& section, const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("[" + section + "] " + key + " = '" + v + "' is not a boolean");
}

std::vector<std::size_t> parse_list(const std::string& section, const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        try {
            if (item.empty()) throw std::invalid_argument("empty");
            std::size_t used = 0;
            const long long n = std::stoll(item, &used);
            if (used != item.size() || n < 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(n));
        } catch (const std::exception&) {
            throw ConfigError("[" + section + "] " + key + " has a bad entry '" + item + "'");
        }
    }
    return out;
}

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

void check_keys(const pt::ptree& section, const std::string& name, std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : section)
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw ConfigError("[" + name + "] has unknown key '" + key + "'");
}

const char* to_string(EvalPolicy p) { return p == EvalPolicy::per_image ? "per_image" : "deactivated"; }

EvalPolicy parse_policy(const std::string& s) {
    if (s == "deactivated") return EvalPolicy::deactivated;
    if (s == "per_image") return EvalPolicy::per_image;
    throw ConfigError("eval_policy must be deactivated or per_image, got '" + s + "'");
}

// Per-image cross-entropy (double) and argmax of a [n, K] logits block.
void accumulate_logits(const Tensor<float>& logits, std::span<const int> labels, std::vector<int>& predictions,
                       std::vector<double>& losses, std::size_t& correct) {
    const std::size_t n = logits.shape()[0], K = logits.shape()[1];
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < n; ++i) {
        const float* row = logits.storage().data() + i * K;
        const double m = *std::max_element(row, row + K);
        double z = 0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(static_cast<double>(row[j]) - m);
        losses.push_back(m + std::log(z) - row[labels[i]]);
        predictions.push_back(pred[i]);
        correct += pred[i] == labels[i];
    }
}

struct WeightAccumulator {
    std::size_t block = 0;
    double min = 0, max = 0;
    double entropy_min = 0, entropy_max = 0, entropy_sum = 0;
    std::size_t batches = 0;

    void add(const std::vector<float>& w) {
        double total = 0;
        for (float v : w) total += v;
        double h = 0;
        for (float v : w) {
            const double p = v / total;
            if (p > 0) h -= p * std::log(p);
        }
        const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
        if (batches == 0) {
            min = *lo;
            max = *hi;
            entropy_min = entropy_max = h;
        } else {
            min = std::min<double>(min, *lo);
            max = std::max<double>(max, *hi);
            entropy_min = std::min(entropy_min, h);
            entropy_max = std::max(entropy_max, h);
        }
        entropy_sum += h;
        ++batches;
    }

    WeightStats stats() const {
        return {block, min, max, entropy_min, entropy_max, batches ? entropy_sum / static_cast<double>(batches) : 0.0};
    }
};

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (reference_batch < 1) throw ConfigError("reference_batch must be >= 1");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (!(decay_factor > 0)) throw ConfigError("decay_factor must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (eval_batch_sizes.empty()) throw ConfigError("eval_batch_sizes must not be empty");
    for (std::size_t b : eval_batch_sizes)
        if (b == 0) throw ConfigError("eval batch sizes must be >= 1");
    if (data_source == "synthetic") {
        if (classes < 2) throw ConfigError("synthetic data needs classes >= 2");
        if (train_per_class == 0 || val_per_class == 0) throw ConfigError("per-class counts must be >= 1");
        if (!(noise >= 0)) throw ConfigError("noise must be >= 0");
    } else if (data_source == "cifar100") {
        if (cifar_train.empty() || cifar_val.empty()) throw ConfigError("cifar100 needs cifar_train and cifar_val");
    } else {
        throw ConfigError("data source must be synthetic or cifar100, got '" + data_source + "'");
    }
}

double TrainConfig::learning_rate(std::size_t epoch) const {
    double lr = base_lr * static_cast<double>(batch_size) / static_cast<double>(reference_batch);
    for (std::size_t d : decay_epochs)
        if (epoch >= d) lr *= decay_factor;
    return lr;
}

NetworkSpec TrainConfig::network_spec() const {
    const std::size_t K = data_source == "cifar100" ? 100 : classes;
    NetworkSpec spec = spec_path.empty() ? reference_spec(K) : load_network_spec(spec_path);
    if (placement) spec = spec.with_placement(*placement);
    if (reduction) spec = spec.with_reduction(*reduction);
    if (branches) spec.ba2m.branches = *branches;
    if (scale_by_n) spec.ba2m.scale_by_n = *scale_by_n;
    if (data_source == "synthetic" && spec.input_height != image_size)
        throw ConfigError("network input " + std::to_string(spec.input_height) + " does not match image_size " +
                          std::to_string(image_size));
    spec.validate();
    return spec;
}

std::string TrainConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : to_text(*this)) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

TrainConfig parse_train_config(const std::string& text, const std::filesystem::path& base_dir) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    auto resolve = [&](const std::string& p) {
        if (p.empty() || std::filesystem::path(p).is_absolute() || base_dir.empty()) return p;
        return (base_dir / p).string();
    };
    TrainConfig c;
    for (const auto& [name, s] : tree) {
        if (name == "train") {
            check_keys(s, name, {"epochs", "batch_size", "base_lr", "reference_batch", "decay_epochs", "decay_factor",
                                 "momentum", "weight_decay", "seed", "crop_pad", "flip", "eval_batch_sizes",
                                 "eval_policy"});
            c.epochs = get(s, name, "epochs", c.epochs);
            c.batch_size = get(s, name, "batch_size", c.batch_size);
            c.base_lr = get(s, name, "base_lr", c.base_lr);
            c.reference_batch = get(s, name, "reference_batch", c.reference_batch);
            if (auto v = s.get_optional<std::string>("decay_epochs")) c.decay_epochs = parse_list(name, "decay_epochs", *v);
            c.decay_factor = get(s, name, "decay_factor", c.decay_factor);
            c.momentum = get(s, name, "momentum", c.momentum);
            c.weight_decay = get(s, name, "weight_decay", c.weight_decay);
            c.seed = get(s, name, "seed", c.seed);
            c.crop_pad = get(s, name, "crop_pad", c.crop_pad);
            if (auto v = s.get_optional<std::string>("flip")) c.flip = parse_flag(name, "flip", *v);
            if (auto v = s.get_optional<std::string>("eval_batch_sizes"))
                c.eval_batch_sizes = parse_list(name, "eval_batch_sizes", *v);
            if (auto v = s.get_optional<std::string>("eval_policy")) c.eval_policy = parse_policy(*v);
        } else if (name == "network") {
            check_keys(s, name, {"spec", "placement", "reduction", "branches", "scale_by_n"});
            if (auto v = s.get_optional<std::string>("spec")) c.spec_path = resolve(*v);
            try {
                if (auto v = s.get_optional<std::string>("placement")) c.placement = parse_placement(*v);
            } catch (const SpecError& e) {
                throw ConfigError(std::string("[network] ") + e.what());
            }
            if (s.get_optional<std::string>("reduction")) c.reduction = get<std::size_t>(s, name, "reduction", 0);
            if (auto v = s.get_optional<std::string>("branches")) c.branches = BranchSet::parse(*v);
            if (auto v = s.get_optional<std::string>("scale_by_n")) c.scale_by_n = parse_flag(name, "scale_by_n", *v);
        } else if (name == "data") {
            check_keys(s, name, {"source", "classes", "train_per_class", "val_per_class", "image_size", "seed", "noise",
                                 "cifar_train", "cifar_val"});
            c.data_source = get(s, name, "source", c.data_source);
            c.classes = get(s, name, "classes", c.classes);
            c.train_per_class = get(s, name, "train_per_class", c.train_per_class);
            c.val_per_class = get(s, name, "val_per_class", c.val_per_class);
            c.image_size = get(s, name, "image_size", c.image_size);
            c.data_seed = get(s, name, "seed", c.data_seed);
            c.noise = get(s, name, "noise", c.noise);
            c.cifar_train = resolve(get<std::string>(s, name, "cifar_train", ""));
            c.cifar_val = resolve(get<std::string>(s, name, "cifar_val", ""));
        } else if (name == "output") {
            check_keys(s, name, {"dir"});
            c.output_dir = resolve(get(s, name, "dir", c.output_dir));
        } else {
            throw ConfigError("unknown section [" + name + "]");
        }
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open train config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str(), path.parent_path());
}

std::string to_text(const TrainConfig& c) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "[train]\nepochs = " << c.epochs << "\nbatch_size = " << c.batch_size << "\nbase_lr = " << c.base_lr
        << "\nreference_batch = " << c.reference_batch << "\ndecay_epochs = " << join(c.decay_epochs)
        << "\ndecay_factor = " << c.decay_factor << "\nmomentum = " << c.momentum
        << "\nweight_decay = " << c.weight_decay << "\nseed = " << c.seed << "\ncrop_pad = " << c.crop_pad
        << "\nflip = " << (c.flip ? "true" : "false") << "\neval_batch_sizes = " << join(c.eval_batch_sizes)
        << "\neval_policy = " << to_string(c.eval_policy) << "\n";
    out << "\n[network]\n";
    if (!c.spec_path.empty()) out << "spec = " << c.spec_path << "\n";
    if (c.placement) out << "placement = " << ba2m::to_string(*c.placement) << "\n";
    if (c.reduction) out << "reduction = " << *c.reduction << "\n";
    if (c.branches) out << "branches = " << c.branches->to_string() << "\n";
    if (c.scale_by_n) out << "scale_by_n = " << (*c.scale_by_n ? "true" : "false") << "\n";
    out << "\n[data]\nsource = " << c.data_source << "\nclasses = " << c.classes
        << "\ntrain_per_class = " << c.train_per_class << "\nval_per_class = " << c.val_per_class
        << "\nimage_size = " << c.image_size << "\nseed = " << c.data_seed << "\nnoise = " << c.noise << "\n";
    if (!c.cifar_train.empty()) out << "cifar_train = " << c.cifar_train << "\n";
    if (!c.cifar_val.empty()) out << "cifar_val = " << c.cifar_val << "\n";
    out << "\n[output]\ndir = " << c.output_dir << "\n";
    return out.str();
}

DataSplits load_data(const TrainConfig& c) {
    c.validate();
    if (c.data_source == "cifar100")
        return {data::read_cifar100(c.cifar_train, data::Split::train), data::read_cifar100(c.cifar_val, data::Split::val)};
    data::SynthOptions opts;
    opts.noise = c.noise;
    // Val images come from a different stream of the same class families.
    return {data::synth_generate(c.classes, c.train_per_class, c.image_size, c.data_seed, opts, data::Split::train),
            data::synth_generate(c.classes, c.val_per_class, c.image_size, c.data_seed ^ 0x5eed0fa1ull, opts,
                                 data::Split::val)};
}

Sgd::Sgd(std::vector<Parameter<float>*> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto* p : params_) velocity_.emplace_back(p->numel(), 0.f);
}

void Sgd::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

void Sgd::step(double lr) {
    const float m = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), a = static_cast<float>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& value = params_[k]->value.storage();
        const auto& grad = params_[k]->grad.storage();
        auto& v = velocity_[k];
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = m * v[i] + grad[i] + wd * value[i];
            value[i] -= a * v[i];
        }
    }
}

std::string MetricLog::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(9);
    std::size_t placements = records.empty() ? 0 : records.front().weight_stats.size();
    out << "epoch,lr,train_loss,train_acc,val_loss,val_acc,wallclock_s";
    for (std::size_t i = 0; i < placements; ++i) {
        const std::string b = "block" + std::to_string(records.front().weight_stats[i].block);
        out << "," << b << "_w_min," << b << "_w_max," << b << "_entropy_min," << b << "_entropy_max," << b
            << "_entropy_mean";
    }
    out << "\n";
    for (const auto& r : records) {
        out << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.train_acc << "," << r.val_loss << ","
            << r.val_acc << "," << r.wallclock_s;
        for (const auto& w : r.weight_stats)
            out << "," << w.min << "," << w.max << "," << w.entropy_min << "," << w.entropy_max << "," << w.entropy_mean;
        out << "\n";
    }
    return out.str();
}

std::string MetricLog::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json ws = nlohmann::json::array();
        for (const auto& w : r.weight_stats)
            ws.push_back({{"block", w.block},
                          {"min", w.min},
                          {"max", w.max},
                          {"entropy_min", w.entropy_min},
                          {"entropy_max", w.entropy_max},
                          {"entropy_mean", w.entropy_mean}});
        j.push_back({{"epoch", r.epoch},
                     {"lr", r.lr},
                     {"train_loss", r.train_loss},
                     {"train_acc", r.train_acc},
                     {"val_loss", r.val_loss},
                     {"val_acc", r.val_acc},
                     {"wallclock_s", r.wallclock_s},
                     {"weight_stats", ws}});
    }
    return j.dump(2);
}

void MetricLog::write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    write_text(dir / "metrics.csv", to_csv());
    write_text(dir / "metrics.json", to_json() + "\n");
}

void save_training_checkpoint(const std::filesystem::path& path, Network<float>& net, const data::Normalization& n) {
    auto entries = net.state();
    entries.push_back({"data.norm_mean", Tensor<float>(Shape{3}, std::vector<float>(n.mean.begin(), n.mean.end()))});
    entries.push_back({"data.norm_std", Tensor<float>(Shape{3}, std::vector<float>(n.stddev.begin(), n.stddev.end()))});
    save_checkpoint(path, entries);
}

data::Normalization load_training_checkpoint(const std::filesystem::path& path, Network<float>& net) {
    auto entries = load_checkpoint(path);
    data::Normalization n;
    bool mean = false, stddev = false;
    std::vector<NamedTensor> state;
    for (auto& e : entries) {
        if (e.name == "data.norm_mean" || e.name == "data.norm_std") {
            const auto v = e.as_double();
            if (v.size() != 3) throw FormatError(path.string() + ": " + e.name + " must hold 3 values");
            auto& dst = e.name == "data.norm_mean" ? n.mean : n.stddev;
            for (std::size_t c = 0; c < 3; ++c) dst[c] = static_cast<float>(v[c]);
            (e.name == "data.norm_mean" ? mean : stddev) = true;
        } else {
            state.push_back(std::move(e));
        }
    }
    if (!mean || !stddev) throw FormatError(path.string() + ": missing input normalisation entries");
    net.load_state(state);
    return n;
}

Evaluation evaluate(Network<float>& net, const data::Dataset& d, std::size_t batch_size, const data::Normalization& n,
                    const ForwardOptions& options, std::size_t threads) {
    data::BatchIterator probe(d, batch_size, Mode::eval, 0, {}, n);
    const std::size_t batches = probe.batches_per_epoch();
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batches));

    struct Part {
        std::vector<double> losses;
        std::size_t correct = 0;
        std::vector<int> predictions;
    };
    std::vector<Part> parts(workers);
    // Worker w handles a contiguous range of batches, so concatenating parts keeps dataset order.
    auto run = [&](std::size_t w, Network<float>& model) {
        const std::size_t first = batches * w / workers, last = batches * (w + 1) / workers;
        data::BatchIterator it(d, batch_size, Mode::eval, 0, {}, n);
        for (std::size_t b = 0; b < last; ++b) {
            auto batch = it.next();
            if (b < first) continue;
            accumulate_logits(model.logits(batch->images, options), batch->labels, parts[w].predictions,
                              parts[w].losses, parts[w].correct);
        }
    };
    if (workers == 1) {
        run(0, net);
    } else {
        std::vector<Network<float>> copies(workers, net);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, std::ref(copies[w]));
        for (auto& t : pool) t.join();
    }
    Evaluation e;
    std::size_t correct = 0;
    for (auto& p : parts) {
        // Summed image by image in dataset order, so the worker count cannot change the result.
        for (double l : p.losses) e.loss += l;
        correct += p.correct;
        e.predictions.insert(e.predictions.end(), p.predictions.begin(), p.predictions.end());
    }
    e.loss /= static_cast<double>(d.size());
    e.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
    return e;
}

std::vector<BatchSizeResult> evaluate_batch_sizes(Network<float>& net, const data::Dataset& d,
                                                  const std::vector<std::size_t>& batch_sizes,
                                                  const data::Normalization& n, const ForwardOptions& options,
                                                  std::size_t threads) {
    if (batch_sizes.empty()) throw InputError("evaluate_batch_sizes needs at least one batch size");
    std::vector<BatchSizeResult> out;
    std::vector<int> reference;
    for (std::size_t b : batch_sizes) {
        const Evaluation e = evaluate(net, d, b, n, options, threads);
        if (out.empty()) {
            reference = e.predictions;
        } else {
            for (std::size_t i = 0; i < reference.size(); ++i)
                if (reference[i] != e.predictions[i])
                    throw InvariantViolation("image " + std::to_string(i) + " predicted " + std::to_string(reference[i]) +
                                             " at batch size " + std::to_string(batch_sizes.front()) + " but " +
                                             std::to_string(e.predictions[i]) + " at batch size " + std::to_string(b));
        }
        out.push_back({b, e.accuracy});
    }
    return out;
}

TrainResult run_training(const TrainConfig& config, const DataSplits& data, Network<float>& net, bool write_outputs) {
    config.validate();
    const std::filesystem::path out_dir = config.output_dir;
    if (write_outputs) {
        std::filesystem::create_directories(out_dir);
        write_text(out_dir / "network.ini", ba2m::to_text(net.spec()));
        write_text(out_dir / "train.ini", to_text(config));
    }
    TrainResult result;
    result.normalization = data::Normalization::from(data.train);
    data::Augmentation aug;
    aug.random_crop_pad = config.crop_pad;
    aug.horizontal_flip = config.flip;
    data::BatchIterator it(data.train, config.batch_size, Mode::train, config.seed, aug, result.normalization);
    Sgd sgd(net.parameters(), config.momentum, config.weight_decay);
    std::vector<NamedTensor> last_good = net.state();
    ForwardOptions eval_options;
    eval_options.eval_policy = config.eval_policy;

    auto fail = [&](const std::string& why, const std::vector<PlacementTrace<float>>& trace) {
        spdlog::error("non-finite value during training: {}", why);
        if (write_outputs) {
            auto entries = last_good;
            Network<float> restored = net;
            restored.load_state(entries);
            save_training_checkpoint(out_dir / "last_good.ckpt", restored, result.normalization);
            nlohmann::json dump = {{"reason", why}, {"placements", nlohmann::json::array()}};
            for (const auto& t : trace) {
                std::vector<double> sar(t.batch.sar.begin(), t.batch.sar.end());
                std::vector<double> w(t.batch.weights.begin(), t.batch.weights.end());
                dump["placements"].push_back({{"block", t.block}, {"sar", sar}, {"weights", w}});
            }
            write_text(out_dir / "nan_dump.json", dump.dump(2) + "\n");
        }
        throw NumericError("training aborted: " + why);
    };

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const double lr = config.learning_rate(epoch);
        it.start_epoch(epoch);
        std::vector<WeightAccumulator> acc;
        double loss_sum = 0;
        std::size_t correct = 0, seen = 0, step = 0;
        while (auto batch = it.next()) {
            sgd.zero_grad();
            Tape<float> tape;
            std::vector<PlacementTrace<float>> trace;
            Var<float> loss;
            Var<float> logits;
            try {
                logits = net.forward(tape.constant(batch->images), Mode::train, {}, &trace);
                loss = ops::cross_entropy(logits, std::span<const int>(batch->labels));
            } catch (const NumericError& e) {
                fail(std::string("epoch ") + std::to_string(epoch + 1) + ": " + e.what(), trace);
            }
            const double value = loss.value()[0];
            if (!std::isfinite(value))
                fail("loss " + std::to_string(value) + " at epoch " + std::to_string(epoch + 1) + " step " +
                         std::to_string(step),
                     trace);
            if (epoch == 0 && step == 0) result.initial_train_loss = value;
            tape.backward(loss);
            sgd.step(lr);

            if (acc.empty())
                for (const auto& t : trace) acc.push_back({.block = t.block});
            for (std::size_t k = 0; k < trace.size() && k < acc.size(); ++k) acc[k].add(trace[k].batch.weights);
            const auto pred = argmax_rows(logits.value());
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch->labels[i];
            loss_sum += value * static_cast<double>(pred.size());
            seen += pred.size();
            ++step;
        }
        last_good = net.state();

        const Evaluation val = evaluate(net, data.val, config.eval_batch_sizes.back(), result.normalization,
                                        eval_options, thread_count_from_env());
        EpochRecord r;
        r.epoch = epoch + 1;
        r.lr = lr;
        r.train_loss = loss_sum / static_cast<double>(seen);
        r.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        r.val_loss = val.loss;
        r.val_acc = val.accuracy;
        for (const auto& a : acc) r.weight_stats.push_back(a.stats());
        r.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.records.push_back(r);
        spdlog::info("epoch {:>3} lr {:.4g} train loss {:.4f} acc {:.4f} | val loss {:.4f} acc {:.4f} | {:.2f}s",
                     r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wallclock_s);

        if (r.val_acc > result.best_val_acc || result.best_epoch == 0) {
            result.best_val_acc = r.val_acc;
            result.best_epoch = r.epoch;
            if (write_outputs) save_training_checkpoint(out_dir / "best.ckpt", net, result.normalization);
        }
        if (write_outputs) result.log.write(out_dir);
    }
    if (write_outputs) save_training_checkpoint(out_dir / "final.ckpt", net, result.normalization);
    return result;
}

std::size_t thread_count_from_env() {
    const char* v = std::getenv("BA2M_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) {
        spdlog::warn("ignoring BA2M_THREADS='{}' (expected a positive integer)", v);
        return 1;
    }
    return static_cast<std::size_t>(n);
}

}  // namespace ba2m::train

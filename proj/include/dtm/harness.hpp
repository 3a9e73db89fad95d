#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "dtm/data.hpp"
#include "dtm/metrics.hpp"
#include "dtm/model.hpp"
#include "dtm/optim.hpp"
#include "dtm/supervision.hpp"

namespace dtm {

struct TrainConfig {
  HeadMode head = HeadMode::DtmMixed;
  bool awk = true;
  double alpha = 1.0;
  double beta = 1.0;
  double lambda = 1.0;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 64;
  int epochs = 20;
  std::vector<double> lr_decay_at = {0.6, 0.85};  // fractions of the epoch budget
  double lr_decay_factor = 0.1;
  double eval_threshold = 0.5;
  bool augment = true;
  int crop_pad = 10;
  std::uint64_t seed = 1;
  std::string precision = "f32";  // f32 | f64
  bool head_bn = true;
  bool bn_affine = true;
  BackboneConfig backbone;

  void validate() const {
    if (awk && head == HeadMode::FcBaseline)
      throw ConfigError("keypoint supervision needs a template head; fc_baseline has no heatmaps");
    if (awk && head == HeadMode::DtmGap)
      throw ConfigError("keypoint supervision targets the max-pooled branch; dtm_gap has none");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for batch statistics");
    if (epochs < 1) throw ConfigError("epochs must be positive");
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["head"] = head_mode_name(cfg.head);
  j["awk"] = cfg.awk;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  j["lambda"] = cfg.lambda;
  j["lr"] = cfg.lr;
  j["momentum"] = cfg.momentum;
  j["weight_decay"] = cfg.weight_decay;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["lr_decay_at"] = cfg.lr_decay_at;
  j["lr_decay_factor"] = cfg.lr_decay_factor;
  j["eval_threshold"] = cfg.eval_threshold;
  j["augment"] = cfg.augment;
  j["crop_pad"] = cfg.crop_pad;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  j["head_bn"] = cfg.head_bn;
  j["bn_affine"] = cfg.bn_affine;
  j["backbone"] = {{"widths", cfg.backbone.widths},
                   {"strides", cfg.backbone.strides},
                   {"kernel_size", cfg.backbone.kernel_size},
                   {"in_channels", cfg.backbone.in_channels}};
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  static const std::vector<std::string> known = {
      "head",       "awk",         "alpha",          "beta",           "lambda",  "lr",
      "momentum",   "weight_decay", "batch_size",    "epochs",         "lr_decay_at",
      "lr_decay_factor", "eval_threshold", "augment", "crop_pad",      "seed",
      "precision",  "head_bn",     "bn_affine",      "backbone"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config key '" + key + "'");
  if (j.contains("head")) cfg.head = head_mode_from_name(j.at("head").get<std::string>());
  if (j.contains("awk")) cfg.awk = j.at("awk").get<bool>();
  if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
  if (j.contains("beta")) cfg.beta = j.at("beta").get<double>();
  if (j.contains("lambda")) cfg.lambda = j.at("lambda").get<double>();
  if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
  if (j.contains("momentum")) cfg.momentum = j.at("momentum").get<double>();
  if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
  if (j.contains("lr_decay_at")) cfg.lr_decay_at = j.at("lr_decay_at").get<std::vector<double>>();
  if (j.contains("lr_decay_factor")) cfg.lr_decay_factor = j.at("lr_decay_factor").get<double>();
  if (j.contains("eval_threshold")) cfg.eval_threshold = j.at("eval_threshold").get<double>();
  if (j.contains("augment")) cfg.augment = j.at("augment").get<bool>();
  if (j.contains("crop_pad")) cfg.crop_pad = j.at("crop_pad").get<int>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("precision")) cfg.precision = j.at("precision").get<std::string>();
  if (j.contains("head_bn")) cfg.head_bn = j.at("head_bn").get<bool>();
  if (j.contains("bn_affine")) cfg.bn_affine = j.at("bn_affine").get<bool>();
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    for (const auto& [key, _] : b.items())
      if (key != "widths" && key != "strides" && key != "kernel_size" && key != "in_channels")
        throw ConfigError("unknown config key 'backbone." + key + "'");
    if (b.contains("widths")) cfg.backbone.widths = b.at("widths").get<std::vector<int>>();
    if (b.contains("strides")) cfg.backbone.strides = b.at("strides").get<std::vector<int>>();
    if (b.contains("kernel_size")) cfg.backbone.kernel_size = b.at("kernel_size").get<int>();
    if (b.contains("in_channels")) cfg.backbone.in_channels = b.at("in_channels").get<int>();
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  try {
    return train_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

inline void save_train_config(const TrainConfig& cfg, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write config '" + path + "'");
  os << train_config_to_json(cfg).dump(2) << "\n";
}

// ---- batch assembly ----

namespace detail {

// Every batch rebuilds the whole autodiff graph, so tens of megabytes of
// buffers are freed and reallocated per step. glibc hands allocations this
// large straight back to the kernel, which makes the next batch soft-fault
// every page again; raising the mmap/trim thresholds keeps the pages in the
// arena. No-op on other C libraries.
inline void retain_malloc_pages() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

template <typename T>
TensorPtr<T> images_to_tensor(const std::vector<const Sample*>& batch) {
  const int n = static_cast<int>(batch.size());
  const ImageU8& first = batch.front()->image;
  auto t = TensorT<T>::create({n, first.channels, first.height, first.width}, false);
  const T inv = static_cast<T>(1) / static_cast<T>(255);
  std::size_t pos = 0;
  for (const Sample* s : batch) {
    if (s->image.channels != first.channels || s->image.height != first.height || s->image.width != first.width)
      throw ShapeError("batch mixes image sizes: sample '" + s->id + "'");
    for (std::uint8_t px : s->image.pixels) t->data[pos++] = static_cast<T>(px) * inv;
  }
  return t;
}

inline LabelMatrix batch_labels(const std::vector<const Sample*>& batch, int num_attrs) {
  LabelMatrix m = LabelMatrix::make(static_cast<int>(batch.size()), num_attrs);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (static_cast<int>(batch[i]->labels.size()) != num_attrs)
      throw ShapeError("sample '" + batch[i]->id + "' has " + std::to_string(batch[i]->labels.size()) +
                       " labels, schema has " + std::to_string(num_attrs));
    for (int a = 0; a < num_attrs; ++a) m.at(static_cast<int>(i), a) = batch[i]->labels[static_cast<std::size_t>(a)];
  }
  return m;
}

inline LabelMatrix select_columns(const LabelMatrix& m, const std::vector<int>& cols) {
  LabelMatrix out = LabelMatrix::make(m.rows, static_cast<int>(cols.size()));
  for (int i = 0; i < m.rows; ++i)
    for (std::size_t c = 0; c < cols.size(); ++c) out.at(i, static_cast<int>(c)) = m.at(i, cols[c]);
  return out;
}

inline std::string schema_names(const AttributeSchema& schema) {
  std::string out;
  for (const auto& a : schema.attributes) out += (out.empty() ? "" : ", ") + a.name;
  return out;
}

template <typename T>
void check_schema(const Model<T>& model, const AttributeSchema& data_schema) {
  if (model.schema == data_schema) return;
  throw ConfigError("model schema [" + schema_names(model.schema) + "] does not match dataset schema [" +
                    schema_names(data_schema) + "]");
}

/// Heatmap tensor holding the local attributes in schema-local order, plus
/// each local attribute's channel there. All locals live in one branch.
template <typename T>
TensorPtr<T> local_heatmaps(const Model<T>& model, const ModelForward<T>& fwd) {
  const std::vector<int> locals = model.schema.local_indices();
  if (locals.empty()) return nullptr;
  std::vector<int> channels;
  char branch = 0;
  for (int a : locals) {
    auto [b, c] = heatmap_location(model, a);
    if (branch == 0) branch = b;
    if (b != branch) throw ConfigError("local attributes are split across pooling branches");
    channels.push_back(c);
  }
  const TensorPtr<T>& source = branch == 'm' ? fwd.heatmaps_gmp : fwd.heatmaps_gap;
  bool identity = source->dim(1) == static_cast<int>(channels.size());
  for (std::size_t i = 0; identity && i < channels.size(); ++i) identity = channels[i] == static_cast<int>(i);
  return identity ? source : select_channels(source, channels);
}

}  // namespace detail

// ---- evaluation ----

struct EvalResult {
  MetricsReport metrics;
  std::vector<double> probs;  // row-major (n_samples, n_attributes)
  int rows = 0;
  int cols = 0;
};

/// Runs the model over `samples` in eval mode and scores the sigmoid outputs.
/// Work is split into fixed batches whose results land at fixed offsets, so
/// the thread count cannot change the result.
template <typename T>
EvalResult evaluate(Model<T>& model, const AttributeSchema& data_schema, const std::vector<Sample>& samples,
                    double threshold = 0.5, int batch_size = 64, int threads = 1) {
  detail::retain_malloc_pages();
  detail::check_schema(model, data_schema);
  model.set_mode(BnMode::Eval);
  const int n = static_cast<int>(samples.size());
  const int cols = model.schema.total();
  EvalResult result;
  result.rows = n;
  result.cols = cols;
  result.probs.assign(static_cast<std::size_t>(n) * cols, 0.0);
  if (n == 0) throw ConfigError("evaluate: no samples");

  std::vector<std::pair<int, int>> batches;
  for (int start = 0; start < n; start += batch_size) batches.emplace_back(start, std::min(n, start + batch_size));

  std::exception_ptr error;
  std::mutex error_mu;
  auto run_range = [&](std::size_t first, std::size_t last) {
    try {
      NoGradGuard guard;
      for (std::size_t b = first; b < last; ++b) {
        const auto [start, stop] = batches[b];
        std::vector<const Sample*> batch;
        for (int i = start; i < stop; ++i) batch.push_back(&samples[static_cast<std::size_t>(i)]);
        auto images = detail::images_to_tensor<T>(batch);
        auto fwd = forward_model(model, images);
        auto probs = sigmoid(fwd.logits);
        for (int i = start; i < stop; ++i)
          for (int a = 0; a < cols; ++a)
            result.probs[static_cast<std::size_t>(i) * cols + a] =
                static_cast<double>(probs->data[static_cast<std::size_t>(i - start) * cols + a]);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mu);
      if (!error) error = std::current_exception();
    }
  };

  threads = std::max(1, std::min<int>(threads, static_cast<int>(batches.size())));
  if (threads == 1) {
    run_range(0, batches.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (batches.size() + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const std::size_t first = static_cast<std::size_t>(t) * per;
      const std::size_t last = std::min(batches.size(), first + per);
      if (first < last) pool.emplace_back(run_range, first, last);
    }
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);

  const LabelMatrix labels = [&] {
    std::vector<const Sample*> all;
    for (const auto& s : samples) all.push_back(&s);
    return detail::batch_labels(all, cols);
  }();
  result.metrics = compute_metrics(binarize(result.probs, n, cols, threshold), labels, threshold);
  return result;
}

/// Fraction of positive local-attribute instances whose heatmap argmax falls
/// within Chebyshev distance `radius` of one of the sample's target cells.
/// Instances with no visible assigned joint are skipped.
template <typename T>
double localization_rate(Model<T>& model, const AttributeSchema& data_schema, const std::vector<Sample>& samples,
                         int radius = 1, int batch_size = 64) {
  detail::check_schema(model, data_schema);
  if (model.mode == HeadMode::FcBaseline) throw ConfigError("fc_baseline head has no heatmaps");
  model.set_mode(BnMode::Eval);
  const std::vector<int> locals = model.schema.local_indices();
  const int r = model.backbone.down_stride();
  long long hits = 0, total = 0;
  NoGradGuard guard;
  const int n = static_cast<int>(samples.size());
  for (int start = 0; start < n; start += batch_size) {
    const int stop = std::min(n, start + batch_size);
    std::vector<const Sample*> batch;
    for (int i = start; i < stop; ++i) batch.push_back(&samples[static_cast<std::size_t>(i)]);
    auto images = detail::images_to_tensor<T>(batch);
    auto fwd = forward_model(model, images);
    auto heat = detail::local_heatmaps(model, fwd);
    const int hh = heat->dim(2), hw = heat->dim(3);
    for (int i = 0; i < stop - start; ++i) {
      const Sample& s = *batch[static_cast<std::size_t>(i)];
      const auto targets = awk_targets(model.schema, s.keypoints, r, hh, hw);
      for (std::size_t li = 0; li < locals.size(); ++li) {
        if (!s.labels[static_cast<std::size_t>(locals[li])]) continue;
        if (targets[li].empty()) continue;
        const T* plane = heat->data.data() + (static_cast<std::size_t>(i) * locals.size() + li) * hh * hw;
        int arg = 0;
        for (int p = 1; p < hh * hw; ++p)
          if (plane[p] > plane[arg]) arg = p;
        const int ar = arg / hw, ac = arg % hw;
        bool hit = false;
        for (int cell : targets[li]) {
          const int tr = cell / hw, tc = cell % hw;
          if (std::max(std::abs(ar - tr), std::abs(ac - tc)) <= radius) hit = true;
        }
        hits += hit ? 1 : 0;
        ++total;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---- training ----

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_wce = 0.0;
  double train_awk = 0.0;
  double val_mA = 0.0;
  double seconds = 0.0;
};

template <typename T>
struct TrainResult {
  Model<T> model;  // parameters after the last completed epoch
  Checkpoint best;
  double best_val_mA = 0.0;
  int best_epoch = -1;
  std::vector<EpochStats> epochs;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

inline std::string epoch_line(const EpochStats& st, int total_epochs) {
  std::ostringstream os;
  os << std::setprecision(12);
  os << "epoch " << (st.epoch + 1) << "/" << total_epochs << " lr " << st.lr << " train_loss " << st.train_loss
     << " wce " << st.train_wce << " awk " << st.train_awk << " val_mA " << st.val_mA << " time "
     << std::setprecision(3) << st.seconds << "s";
  return os.str();
}

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (double frac : cfg.lr_decay_at)
    if (epoch >= static_cast<int>(std::floor(frac * cfg.epochs))) lr *= cfg.lr_decay_factor;
  return lr;
}

}  // namespace detail

/// One training run. Deterministic for a fixed config: shuffling and
/// augmentation draw from per-(seed, epoch, sample) streams, so restarting
/// from an epoch checkpoint continues the exact same trajectory.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir = "", int threads = 1,
                     const std::string& resume_from = "") {
  detail::retain_malloc_pages();
  cfg.validate();
  ds.schema.validate();
  if (ds.train.empty()) throw ConfigError("train: dataset has no training samples");
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  TrainResult<T> result;
  int start_epoch = 0;
  SgdOptimizer<T> opt(cfg.lr, cfg.momentum, cfg.weight_decay);

  if (resume_from.empty()) {
    result.model = make_model<T>(ds.schema, cfg.head, cfg.backbone, derive_seed(cfg.seed, "model"), cfg.head_bn,
                                 cfg.bn_affine);
    for (auto& [name, p] : result.model.params()) opt.add_param(name, p);
  } else {
    Checkpoint ckpt = load_checkpoint(resume_from);
    result.model = model_from_checkpoint<T>(ckpt);
    detail::check_schema(result.model, ds.schema);
    if (auto e = ckpt.meta_value("epoch")) start_epoch = std::stoi(*e) + 1;
    if (auto b = ckpt.meta_value("best_val_mA")) result.best_val_mA = std::stod(*b);
    if (auto b = ckpt.meta_value("best_epoch")) result.best_epoch = std::stoi(*b);
    for (auto& [name, p] : result.model.params()) opt.add_param(name, p);
    for (auto& e : opt.entries())
      if (const NamedTensor* v = ckpt.find("optim." + e.name + ".velocity"))
        for (std::size_t i = 0; i < e.velocity.size(); ++i) e.velocity[i] = static_cast<T>(v->values[i]);
  }

  const LossWeights<T> weights = [&] {
    std::vector<const Sample*> all;
    for (const auto& s : ds.train) all.push_back(&s);
    LabelMatrix train_labels = detail::batch_labels(all, ds.schema.total());
    LossWeights<T> w;
    w.alpha = static_cast<T>(cfg.alpha);
    w.beta = static_cast<T>(cfg.beta);
    w.lambda = static_cast<T>(cfg.lambda);
    w.positive_ratios = positive_ratios<T>(train_labels);
    return w;
  }();

  const int stride = result.model.backbone.down_stride();
  const std::vector<int> locals = ds.schema.local_indices();
  if (cfg.awk && locals.empty())
    throw ConfigError("keypoint supervision requires at least one local attribute in the schema");

  std::ofstream log;
  if (!out_dir.empty()) {
    log.open((fs::path(out_dir) / "train_log.txt").string(), start_epoch > 0 ? std::ios::app : std::ios::out);
    save_train_config(cfg, (fs::path(out_dir) / "config.json").string());
  }

  auto snapshot = [&](int epoch) {
    Checkpoint ckpt = model_to_checkpoint(result.model);
    ckpt.set_meta("epoch", std::to_string(epoch));
    ckpt.set_meta("best_val_mA", std::to_string(result.best_val_mA));
    ckpt.set_meta("best_epoch", std::to_string(result.best_epoch));
    ckpt.set_meta("seed", std::to_string(cfg.seed));
    for (auto& e : opt.entries()) ckpt.tensors.push_back(detail::to_named("optim." + e.name + ".velocity", e.velocity));
    return ckpt;
  };
  Checkpoint last_good;  // written on abort so a run can restart at the last epoch
  bool have_snapshot = start_epoch > 0;
  if (have_snapshot) last_good = load_checkpoint(resume_from);

  const int n_train = static_cast<int>(ds.train.size());
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    result.model.set_mode(BnMode::Train);
    opt.set_lr(static_cast<T>(detail::lr_at_epoch(cfg, epoch)));

    std::vector<int> order(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (int i = n_train - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    double loss_sum = 0.0, wce_sum = 0.0, awk_sum = 0.0;
    long long seen = 0;
    try {
      for (int start = 0; start < n_train; start += cfg.batch_size) {
        const int stop = std::min(n_train, start + cfg.batch_size);
        if (stop - start < 2) break;  // batch statistics need at least two samples

        std::vector<Sample> augmented;
        std::vector<const Sample*> batch;
        augmented.reserve(static_cast<std::size_t>(stop - start));
        for (int i = start; i < stop; ++i) {
          const Sample& raw = ds.train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
          if (cfg.augment) {
            Rng aug_rng(derive_seed(cfg.seed, "augment", static_cast<std::uint64_t>(epoch),
                                    static_cast<std::uint64_t>(order[static_cast<std::size_t>(i)])));
            augmented.push_back(augment(raw, aug_rng, cfg.crop_pad));
          } else {
            augmented.push_back(raw);
          }
        }
        for (const Sample& s : augmented) batch.push_back(&s);

        auto images = detail::images_to_tensor<T>(batch);
        auto fwd = forward_model(result.model, images);
        const LabelMatrix labels = detail::batch_labels(batch, ds.schema.total());
        auto l_wce = wce_loss(fwd.logits, labels, weights);

        TensorPtr<T> total;
        double awk_value = 0.0;
        if (cfg.awk) {
          auto heat = detail::local_heatmaps(result.model, fwd);
          const int hh = heat->dim(2), hw = heat->dim(3);
          std::vector<std::vector<std::vector<int>>> targets;
          targets.reserve(batch.size());
          for (const Sample* s : batch) targets.push_back(awk_targets(ds.schema, s->keypoints, stride, hh, hw));
          const LabelMatrix local_labels = detail::select_columns(labels, locals);
          auto l_awk = awk_loss(heat, local_labels, targets);
          awk_value = static_cast<double>(l_awk->item());
          total = total_loss(l_awk, l_wce, weights.alpha, weights.beta);
        } else {
          total = scale(l_wce, weights.beta);
        }

        opt.zero_grad();
        total->backward();
        opt.step();

        const double bsz = stop - start;
        loss_sum += static_cast<double>(total->item()) * bsz;
        wce_sum += static_cast<double>(l_wce->item()) * bsz;
        awk_sum += awk_value * bsz;
        seen += stop - start;
      }
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
      if (!out_dir.empty()) {
        if (have_snapshot) save_checkpoint(last_good, (fs::path(out_dir) / "last.ckpt").string());
        if (log) log << "aborted: " << result.abort_reason << "\n";
      }
      break;
    }

    EvalResult val = evaluate(result.model, ds.schema, ds.val.empty() ? ds.train : ds.val, cfg.eval_threshold,
                              cfg.batch_size, threads);

    EpochStats st;
    st.epoch = epoch;
    st.lr = detail::lr_at_epoch(cfg, epoch);
    st.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    st.train_wce = seen ? wce_sum / static_cast<double>(seen) : 0.0;
    st.train_awk = seen ? awk_sum / static_cast<double>(seen) : 0.0;
    st.val_mA = val.metrics.mA;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(st);

    if (st.val_mA > result.best_val_mA || result.best_epoch < 0) {
      result.best_val_mA = st.val_mA;
      result.best_epoch = epoch;
      result.best = snapshot(epoch);
      if (!out_dir.empty()) save_checkpoint(result.best, (fs::path(out_dir) / "best.ckpt").string());
    }
    last_good = snapshot(epoch);
    have_snapshot = true;
    if (!out_dir.empty()) {
      save_checkpoint(last_good, (fs::path(out_dir) / "last.ckpt").string());
      if (log) log << detail::epoch_line(st, cfg.epochs) << "\n" << std::flush;
    }
  }

  if (result.best_epoch < 0 && !result.aborted) result.best = snapshot(cfg.epochs - 1);
  return result;
}

// ---- heatmap export ----

struct ExportReport {
  int files_written = 0;
  std::vector<std::string> unknown_ids;
};

namespace detail {

inline void write_pgm(const std::vector<std::uint8_t>& gray, int h, int w, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path + "'");
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!os) throw IoError("failed writing '" + path + "'");
}

}  // namespace detail

/// Writes one 8-bit PGM per (sample, attribute) heatmap, min-max scaled; a
/// constant heatmap maps to mid-gray 128. A sidecar text file records the raw
/// range, the argmax cell, and the sample's target cells.
template <typename T>
ExportReport export_heatmaps(Model<T>& model, const Dataset& ds, const std::vector<std::string>& ids,
                             const std::string& out_dir) {
  if (model.mode == HeadMode::FcBaseline) throw ConfigError("fc_baseline head has no heatmaps");
  detail::check_schema(model, ds.schema);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  model.set_mode(BnMode::Eval);

  ExportReport report;
  const int r = model.backbone.down_stride();
  NoGradGuard guard;
  for (const std::string& id : ids) {
    const Sample* sample = nullptr;
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
      for (const auto& s : *split)
        if (s.id == id) sample = &s;
    }
    if (!sample) {
      report.unknown_ids.push_back(id);
      continue;
    }
    auto images = detail::images_to_tensor<T>({sample});
    auto fwd = forward_model(model, images);
    const auto targets_all = [&]() {
      const TensorPtr<T>& any = fwd.heatmaps_gmp ? fwd.heatmaps_gmp : fwd.heatmaps_gap;
      return awk_targets(model.schema, sample->keypoints, r, any->dim(2), any->dim(3));
    }();
    const std::vector<int> locals = model.schema.local_indices();

    for (int a = 0; a < model.schema.total(); ++a) {
      const auto [branch, channel] = heatmap_location(model, a);
      const TensorPtr<T>& heat = branch == 'm' ? fwd.heatmaps_gmp : fwd.heatmaps_gap;
      const int hh = heat->dim(2), hw = heat->dim(3);
      const T* plane = heat->data.data() + static_cast<std::size_t>(channel) * hh * hw;

      T lo = plane[0], hi = plane[0];
      int arg = 0;
      for (int p = 0; p < hh * hw; ++p) {
        if (plane[p] < lo) lo = plane[p];
        if (plane[p] > hi) hi = plane[p];
        if (plane[p] > plane[arg]) arg = p;
      }
      std::vector<std::uint8_t> gray(static_cast<std::size_t>(hh) * hw, 128);
      if (hi > lo)
        for (int p = 0; p < hh * hw; ++p)
          gray[static_cast<std::size_t>(p)] =
              static_cast<std::uint8_t>(std::round(255.0 * static_cast<double>(plane[p] - lo) /
                                                   static_cast<double>(hi - lo)));
      const std::string stem = id + "_" + model.schema.attributes[static_cast<std::size_t>(a)].name;
      detail::write_pgm(gray, hh, hw, (fs::path(out_dir) / (stem + ".pgm")).string());

      std::ofstream side((fs::path(out_dir) / (stem + ".txt")).string());
      if (!side) throw IoError("cannot write sidecar for '" + stem + "'");
      side << std::setprecision(12);
      side << "min: " << static_cast<double>(lo) << "\n";
      side << "max: " << static_cast<double>(hi) << "\n";
      side << "argmax: " << arg / hw << " " << arg % hw << "\n";
      side << "targets:";
      if (!model.schema.attributes[static_cast<std::size_t>(a)].is_global) {
        const auto it = std::find(locals.begin(), locals.end(), a);
        const auto& cells = targets_all[static_cast<std::size_t>(it - locals.begin())];
        for (int cell : cells) side << " " << cell / hw << " " << cell % hw << ";";
      }
      side << "\n";
      report.files_written += 2;
    }
  }
  return report;
}

// ---- ablation ----

struct AblateRow {
  std::string name;
  double mA = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline void write_ablation_table(const std::vector<AblateRow>& rows, std::ostream& os) {
  os << std::left << std::setw(24) << "variant" << std::right << std::setw(10) << "mA" << std::setw(10) << "acc"
     << std::setw(10) << "prec" << std::setw(10) << "recall" << std::setw(10) << "f1" << "\n";
  os << std::string(74, '-') << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    os << std::left << std::setw(24) << r.name << std::right << std::setw(10) << r.mA << std::setw(10) << r.accuracy
       << std::setw(10) << r.precision << std::setw(10) << r.recall << std::setw(10) << r.f1 << "\n";
}

namespace detail {

template <typename T>
AblateRow ablate_run(const TrainConfig& cfg, const Dataset& ds, const std::string& name, int threads) {
  TrainResult<T> tr = train<T>(cfg, ds, "", threads);
  Model<T> best = tr.best.tensors.empty() ? tr.model : model_from_checkpoint<T>(tr.best);
  EvalResult ev = evaluate(best, ds.schema, ds.test.empty() ? ds.val : ds.test, cfg.eval_threshold, cfg.batch_size,
                           threads);
  AblateRow row;
  row.name = name;
  row.mA = ev.metrics.mA;
  row.accuracy = ev.metrics.accuracy;
  row.precision = ev.metrics.precision;
  row.recall = ev.metrics.recall;
  row.f1 = ev.metrics.f1;
  return row;
}

}  // namespace detail

/// Head comparison: the four classifier variants plus keypoint supervision.
template <typename T>
std::vector<AblateRow> ablate_heads(const TrainConfig& base, const Dataset& ds, int threads = 1) {
  std::vector<AblateRow> rows;
  auto variant = [&](HeadMode head, bool awk, const std::string& name) {
    TrainConfig cfg = base;
    cfg.head = head;
    cfg.awk = awk;
    rows.push_back(detail::ablate_run<T>(cfg, ds, name, threads));
  };
  variant(HeadMode::FcBaseline, false, "fc_baseline");
  variant(HeadMode::DtmGap, false, "dtm_gap");
  variant(HeadMode::DtmGmp, false, "dtm_gmp");
  variant(HeadMode::DtmMixed, false, "dtm_mixed");
  variant(HeadMode::DtmMixed, true, "dtm_mixed+awk");
  return rows;
}

/// Batch-size sensitivity of the configured head.
template <typename T>
std::vector<AblateRow> ablate_batch_size(const TrainConfig& base, const Dataset& ds,
                                         const std::vector<int>& sizes = {16, 32, 64, 128}, int threads = 1) {
  std::vector<AblateRow> rows;
  for (int b : sizes) {
    TrainConfig cfg = base;
    cfg.batch_size = b;
    rows.push_back(detail::ablate_run<T>(cfg, ds, "batch_" + std::to_string(b), threads));
  }
  return rows;
}

}  // namespace dtm

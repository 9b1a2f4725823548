// SPDX-License-Identifier: Apache-2.0
//
// End-to-end orchestration of divide-and-conquer training:
//
//   pretrain meta -> K independent module trainings -> assemble -> fine-tune
//
// Every phase persists its result in the run directory:
//
//   <run_dir>/config.cfg          resolved configuration snapshot
//   <run_dir>/manifest.json       phases, costs, checkpoint digests, metrics
//   <run_dir>/meta.ckpt
//   <run_dir>/module_<i>.ckpt
//   <run_dir>/assembled.ckpt
//   <run_dir>/final.ckpt
//   <run_dir>/metrics/<phase>.jsonl
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "incubator/checkpoint.hpp"
#include "incubator/config.hpp"
#include "incubator/data.hpp"
#include "incubator/model.hpp"
#include "incubator/optim.hpp"
#include "incubator/train.hpp"

namespace incubator {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class ModularMethod { Incubation, Imitation };

inline const char* method_name(ModularMethod m) { return m == ModularMethod::Incubation ? "incubation" : "imitation"; }

struct DataConfig {
  std::string kind = "spirals";  // spirals | gaussians | csv | idx
  std::size_t classes = 3;
  std::size_t per_class = 300;
  std::size_t input_dim = 16;
  double noise = 0.03;
  double turns = 2.0;
  double fraction = 1.0;
  std::string train_path, test_path, label_column;
  bool header = false;
  std::string images, labels, test_images, test_labels;
  std::optional<bool> standardize;  // default: on for csv/idx, off for synthetic
};

struct PhaseBudgets {
  std::size_t meta_epochs = 0;
  std::size_t modular_epochs = 0;
  std::size_t finetune_epochs = 0;
};

/// Every key the configuration accepts, with its default.
inline const ConfigMap::Map& config_defaults() {
  static const ConfigMap::Map defaults = {
      {"run.seed", "1"},
      {"run.run_dir", "runs/default"},
      {"run.label", ""},
      {"data.kind", "spirals"},
      {"data.classes", "3"},
      {"data.per_class", "300"},
      {"data.input_dim", "16"},
      {"data.noise", "0.03"},
      {"data.turns", "2"},
      {"data.fraction", "1"},
      {"data.train_path", ""},
      {"data.test_path", ""},
      {"data.label_column", ""},
      {"data.header", "false"},
      {"data.standardize", "auto"},
      {"data.images", ""},
      {"data.labels", ""},
      {"data.test_images", ""},
      {"data.test_labels", ""},
      {"model.depth", "32"},
      {"model.width", "16"},
      {"model.ratio", "2"},
      {"model.modules", "4"},
      {"meta.depth", "1"},
      {"meta.epochs", "120"},
      {"meta.init", "pretrained"},
      {"meta.freeze", "true"},
      {"pipeline.total_epochs", "120"},
      {"pipeline.modular_proportion", "0.5"},
      {"pipeline.modular_epochs", ""},
      {"pipeline.finetune_epochs", ""},
      {"pipeline.method", "incubation"},
      {"pipeline.parallelism", "1"},
      {"pipeline.resume", "true"},
      {"train.batch_size", "32"},
      {"train.lr_max", "0.001"},
      {"train.lr_min", "0.00001"},
      {"train.warmup_epochs", "0"},
      {"train.weight_decay", "0.05"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.adam_eps", "1e-8"},
  };
  return defaults;
}

inline const std::vector<std::string>& train_phases() {
  static const std::vector<std::string> phases = {"meta", "modular", "finetune"};
  return phases;
}

inline bool is_known_key(const std::string& key) {
  if (config_defaults().count(key)) return true;
  // train.<phase>.<key> per-phase overrides
  for (const auto& phase : train_phases()) {
    const std::string prefix = "train." + phase + ".";
    if (key.rfind(prefix, 0) == 0 && config_defaults().count("train." + key.substr(prefix.size()))) return true;
  }
  return false;
}

/// Keys that do not influence numerical results.
inline bool is_operational_key(const std::string& key) {
  return key == "run.run_dir" || key == "run.label" || key == "pipeline.parallelism" || key == "pipeline.resume";
}

struct PipelineConfig {
  ConfigMap snapshot;  // fully resolved key/value view
  ModelSpec spec;
  std::size_t meta_depth = 1;
  std::size_t meta_epochs = 120;
  std::size_t total_epochs = 120;
  std::optional<double> modular_proportion = 0.5;
  std::size_t modular_epochs = 60;
  std::size_t finetune_epochs = 60;
  ModularMethod method = ModularMethod::Incubation;
  bool freeze_meta = true;
  MetaInit meta_init = MetaInit::Pretrained;
  std::size_t parallelism = 1;
  bool resume = true;
  std::uint64_t seed = 1;
  std::string run_dir = "runs/default";
  std::string label;
  DataConfig data;

  static PipelineConfig from_map(const ConfigMap& overrides) {
    for (const auto& [k, v] : overrides.values()) {
      if (!is_known_key(k)) throw ConfigError("unknown configuration key '" + k + "'");
    }
    ConfigMap m;
    for (const auto& [k, v] : config_defaults()) m.set(k, v);
    m.merge(overrides);

    PipelineConfig c;
    c.snapshot = m;
    c.seed = m.get_uint("run.seed", 1);
    c.run_dir = m.get("run.run_dir");
    if (const char* root = std::getenv("INCUBATOR_RUN_DIR"); root && *root && fs::path(c.run_dir).is_relative()) {
      c.run_dir = (fs::path(root) / c.run_dir).string();
    }
    c.label = m.get("run.label");

    c.data.kind = m.get("data.kind");
    c.data.classes = m.get_uint("data.classes", 3);
    c.data.per_class = m.get_uint("data.per_class", 300);
    c.data.input_dim = m.get_uint("data.input_dim", 16);
    c.data.noise = m.get_double("data.noise", 0.03);
    c.data.turns = m.get_double("data.turns", 2.0);
    c.data.fraction = m.get_double("data.fraction", 1.0);
    c.data.train_path = m.get("data.train_path");
    c.data.test_path = m.get("data.test_path");
    c.data.label_column = m.get("data.label_column");
    c.data.header = m.get_bool("data.header", false);
    c.data.images = m.get("data.images");
    c.data.labels = m.get("data.labels");
    c.data.test_images = m.get("data.test_images");
    c.data.test_labels = m.get("data.test_labels");
    if (m.get("data.standardize") != "auto") c.data.standardize = m.get_bool("data.standardize", false);

    c.spec.n = m.get_uint("model.depth", 32);
    c.spec.d = m.get_uint("model.width", 16);
    c.spec.r = m.get_uint("model.ratio", 2);
    c.spec.K = m.get_uint("model.modules", 4);
    c.spec.classes = c.data.classes;
    c.spec.input_dim = c.data.input_dim;

    c.meta_depth = m.get_uint("meta.depth", 1);
    c.meta_epochs = m.get_uint("meta.epochs", 120);
    const std::string init = m.get("meta.init");
    if (init == "pretrained") {
      c.meta_init = MetaInit::Pretrained;
    } else if (init == "random") {
      c.meta_init = MetaInit::Random;
    } else {
      throw ConfigError("meta.init must be 'pretrained' or 'random'");
    }
    c.freeze_meta = m.get_bool("meta.freeze", true);

    c.total_epochs = m.get_uint("pipeline.total_epochs", 120);
    const std::string method = m.get("pipeline.method");
    if (method == "incubation") {
      c.method = ModularMethod::Incubation;
    } else if (method == "imitation") {
      c.method = ModularMethod::Imitation;
    } else {
      throw ConfigError("pipeline.method must be 'incubation' or 'imitation'");
    }
    c.parallelism = std::max<std::uint64_t>(1, m.get_uint("pipeline.parallelism", 1));
    c.resume = m.get_bool("pipeline.resume", true);

    const bool explicit_split = !m.get("pipeline.modular_epochs").empty() || !m.get("pipeline.finetune_epochs").empty();
    const std::string prop = m.get("pipeline.modular_proportion");
    if (explicit_split) {
      c.modular_proportion.reset();
      auto epochs_or_zero = [&](const std::string& key) { return m.get(key).empty() ? 0 : m.get_uint(key, 0); };
      c.modular_epochs = epochs_or_zero("pipeline.modular_epochs");
      c.finetune_epochs = epochs_or_zero("pipeline.finetune_epochs");
      c.total_epochs = c.modular_epochs + c.finetune_epochs;
    } else if (prop.empty() || prop == "none") {
      throw ConfigError("set pipeline.modular_proportion or explicit pipeline.modular_epochs/finetune_epochs");
    } else {
      const double p = m.get_double("pipeline.modular_proportion", 0.5);
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("pipeline.modular_proportion must lie in [0, 1]");
      c.modular_proportion = p;
      c.modular_epochs = static_cast<std::size_t>(std::llround(p * static_cast<double>(c.total_epochs)));
      c.finetune_epochs = c.total_epochs - c.modular_epochs;
    }
    c.validate();
    return c;
  }

  void validate() const {
    if (data.kind == "spirals" || data.kind == "gaussians") spec.validate();
    if (meta_depth < 1) throw ConfigError("meta.depth must be at least 1");
    if (total_epochs < 1) throw ConfigError("the total epoch budget must be at least 1");
    if (!(data.fraction > 0.0 && data.fraction <= 1.0)) throw ConfigError("data.fraction must lie in (0, 1]");
    for (const auto& phase : {"meta", "modular", "finetune"}) train_config(phase).validate();
  }

  PhaseBudgets budgets() const { return {meta_epochs, modular_epochs, finetune_epochs}; }

  /// Base [train] settings overlaid with [train.<phase>]; epochs and seed
  /// are filled in by the caller.
  TrainConfig train_config(const std::string& phase = "") const {
    auto pick = [&](const std::string& key) {
      const std::string specific = "train." + phase + "." + key;
      return !phase.empty() && snapshot.has(specific) ? specific : "train." + key;
    };
    TrainConfig t;
    t.epochs = 1;
    t.batch_size = snapshot.get_uint(pick("batch_size"), 32);
    t.lr_max = snapshot.get_double(pick("lr_max"), 1e-3);
    t.lr_min = snapshot.get_double(pick("lr_min"), 1e-5);
    t.warmup_epochs = 0;
    t.weight_decay = snapshot.get_double(pick("weight_decay"), 0.05);
    t.beta1 = snapshot.get_double(pick("beta1"), 0.9);
    t.beta2 = snapshot.get_double(pick("beta2"), 0.999);
    t.adam_eps = snapshot.get_double(pick("adam_eps"), 1e-8);
    t.freeze_meta = freeze_meta;
    t.meta_init = meta_init;
    t.seed = seed;
    return t;
  }

  std::size_t warmup_for(const std::string& phase) const {
    const std::string specific = "train." + phase + ".warmup_epochs";
    return snapshot.get_uint(snapshot.has(specific) ? specific : "train.warmup_epochs", 0);
  }

  /// Plain end-to-end training of the target for the whole budget.
  TrainConfig e2e_config(std::size_t epochs) const {
    TrainConfig t = train_config();
    t.epochs = epochs;
    t.warmup_epochs = std::min(warmup_for(""), epochs - 1);
    return t;
  }

  TrainConfig meta_config() const {
    TrainConfig t = train_config("meta");
    t.epochs = meta_epochs;
    t.warmup_epochs = std::min(warmup_for("meta"), meta_epochs - 1);
    t.seed = derive_seed(seed, 0x6d657461ULL);
    return t;
  }

  /// Per-module seeds come from hashing (seed, slot), never from offsets.
  TrainConfig modular_config(std::size_t slot) const {
    TrainConfig t = train_config("modular");
    t.epochs = modular_epochs;
    t.warmup_epochs = std::min(warmup_for("modular"), modular_epochs - 1);
    t.seed = derive_seed(seed, 0x6d6f64756c65ULL, slot);
    return t;
  }

  /// Warmup is disabled in fine-tuning unless [train.finetune] sets it.
  TrainConfig finetune_config() const {
    TrainConfig t = train_config("finetune");
    t.epochs = finetune_epochs;
    const std::string key = "train.finetune.warmup_epochs";
    t.warmup_epochs = snapshot.has(key) ? std::min<std::size_t>(snapshot.get_uint(key, 0), finetune_epochs - 1) : 0;
    return t;
  }

  /// Digest of every result-affecting setting.
  std::string digest() const {
    std::string text;
    for (const auto& [k, v] : snapshot.values()) {
      if (!is_operational_key(k)) text += k + "=" + v + "\n";
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hash_string(text);
    return os.str();
  }

  std::string run_id(const std::string& kind) const {
    return (label.empty() ? kind : label) + "-" + digest().substr(0, 8) + "-s" + std::to_string(seed);
  }
};

// ---------------------------------------------------------------------------
// Data

inline DatasetPair split_dataset(const Dataset& all, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(all.classes);
  for (std::size_t i = 0; i < all.size(); ++i) by_class[static_cast<std::size_t>(all.labels[i])].push_back(i);
  std::vector<std::size_t> train, test;
  CounterRng rng(derive_seed(seed, 0x73706c74ULL));
  for (auto& idx : by_class) {
    if (idx.empty()) continue;
    shuffle(idx, rng);
    const std::size_t n_test = idx.size() < 2 ? 0 : std::max<std::size_t>(1, idx.size() / 5);
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  if (test.empty()) throw EmptyInputError("dataset too small to hold out a test split");
  DatasetPair p{all.select(train), all.select(test)};
  p.train.split = Split::Train;
  p.test.split = Split::Test;
  return p;
}

/// Materializes the configured train/test data; the train split is then
/// subsampled to data.fraction.
inline DatasetPair load_data(const DataConfig& dc, std::uint64_t seed) {
  DatasetPair pair;
  bool standardize_default = true;
  if (dc.kind == "spirals" || dc.kind == "gaussians") {
    pair = gen_synthetic(parse_synthetic_kind(dc.kind), dc.classes, dc.per_class, dc.input_dim, dc.noise, seed,
                         dc.turns);
    standardize_default = false;
  } else if (dc.kind == "csv") {
    if (dc.train_path.empty()) throw ConfigError("data.train_path is required for csv data");
    CsvOptions opt{dc.header, dc.classes};
    const std::string column = dc.label_column.empty() ? "0" : dc.label_column;
    Dataset train = load_csv(dc.train_path, column, opt);
    if (dc.test_path.empty()) {
      pair = split_dataset(train, seed);
    } else {
      pair.train = std::move(train);
      pair.test = load_csv(dc.test_path, column, opt);
      pair.test.split = Split::Test;
    }
  } else if (dc.kind == "idx") {
    if (dc.images.empty() || dc.labels.empty()) throw ConfigError("data.images and data.labels are required for idx");
    Dataset train = load_idx(dc.images, dc.labels, dc.classes);
    if (dc.test_images.empty()) {
      pair = split_dataset(train, seed);
    } else {
      pair.train = std::move(train);
      pair.test = load_idx(dc.test_images, dc.test_labels, dc.classes);
      pair.test.split = Split::Test;
    }
  } else {
    throw ConfigError("unknown data.kind '" + dc.kind + "'");
  }
  if (dc.standardize.value_or(standardize_default)) standardize(pair.train, pair.test);
  if (dc.fraction < 1.0) pair.train = subsample(pair.train, dc.fraction, derive_seed(seed, 0x66726163ULL));
  pair.train.validate();
  pair.test.validate();
  return pair;
}

/// Aligns the model spec with the loaded data (input width and classes).
inline void bind_data(PipelineConfig& cfg, const DatasetPair& data) {
  cfg.spec.input_dim = data.train.input_dim();
  cfg.spec.classes = std::max(data.train.classes, data.test.classes);
  cfg.spec.validate();
}

// ---------------------------------------------------------------------------
// Metrics and manifest

struct MetricsRecord {
  std::string run_id;
  std::string phase;
  std::size_t epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
  double wall_ms = 0;
  double core_seconds = 0;
};

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const MetricsRecord& r) {
  return json{{"run_id", r.run_id},     {"phase", r.phase},  {"epoch", r.epoch},
              {"split", r.split},       {"loss", finite_or_null(r.loss)},
              {"accuracy", finite_or_null(r.accuracy)},    {"lr", r.lr},
              {"wall_ms", r.wall_ms},   {"core_seconds", r.core_seconds}};
}

/// Append-only line-delimited JSON records, one file per phase.
class MetricsLog {
 public:
  MetricsLog(const fs::path& path, std::string run_id, std::string phase)
      : out_(path, std::ios::trunc), run_id_(std::move(run_id)), phase_(std::move(phase)),
        cpu0_(detail::cpu_now()) {
    if (!out_) throw IoError("cannot write " + path.string());
  }

  void write(const MetricsRecord& r) {
    out_ << to_json(r).dump() << '\n';
    out_.flush();
  }

  /// Logs the train and test records of one epoch.
  void epoch(const EpochRecord& e) {
    const double core = detail::cpu_now() - cpu0_;
    write({run_id_, phase_, e.epoch, "train", e.train_loss, e.train_accuracy, e.lr, e.wall_ms, core});
    if (std::isfinite(e.test_accuracy)) {
      write({run_id_, phase_, e.epoch, "test", e.test_loss, e.test_accuracy, e.lr, e.wall_ms, core});
    }
  }

  EpochCallback callback() {
    return [this](const EpochRecord& e) { epoch(e); };
  }

 private:
  std::ofstream out_;
  std::string run_id_;
  std::string phase_;
  double cpu0_;
};

struct PhaseRecord {
  std::string name;
  std::string status = "complete";
  double wall_seconds = 0;
  double core_seconds = 0;
  bool resumed = false;
};

struct RunManifest {
  std::string run_id;
  std::string kind;
  std::string status = "running";
  std::string failed_phase;
  std::string error;
  std::uint64_t seed = 0;
  std::string config_digest;
  ConfigMap config;
  std::vector<PhaseRecord> phases;
  std::map<std::string, std::string> checkpoints;  // file name -> digest
  std::map<std::string, double> metrics;

  json to_json() const {
    json phases_json = json::array();
    for (const auto& p : phases) {
      phases_json.push_back({{"name", p.name},
                             {"status", p.status},
                             {"wall_seconds", p.wall_seconds},
                             {"core_seconds", p.core_seconds},
                             {"resumed", p.resumed}});
    }
    json metrics_json = json::object();
    for (const auto& [k, v] : metrics) metrics_json[k] = finite_or_null(v);
    return json{{"run_id", run_id},
                {"kind", kind},
                {"status", status},
                {"failed_phase", failed_phase},
                {"error", error},
                {"seed", seed},
                {"config_digest", config_digest},
                {"config", config.values()},
                {"phases", phases_json},
                {"checkpoints", checkpoints},
                {"metrics", metrics_json}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.kind = j.at("kind").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.failed_phase = j.value("failed_phase", "");
    m.error = j.value("error", "");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_digest = j.value("config_digest", "");
    for (const auto& [k, v] : j.at("config").items()) m.config.set(k, v.get<std::string>());
    for (const auto& p : j.at("phases")) {
      m.phases.push_back({p.at("name").get<std::string>(), p.at("status").get<std::string>(),
                          p.at("wall_seconds").get<double>(), p.at("core_seconds").get<double>(),
                          p.value("resumed", false)});
    }
    m.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
    for (const auto& [k, v] : j.at("metrics").items()) {
      m.metrics[k] = v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    }
    return m;
  }

  double metric(const std::string& key) const {
    auto it = metrics.find(key);
    return it == metrics.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
  }

  void save(const fs::path& run_dir) const { write_bytes_atomic((run_dir / "manifest.json").string(), to_json().dump(2) + "\n"); }

  static RunManifest load(const fs::path& run_dir) {
    const fs::path path = run_dir / "manifest.json";
    try {
      return from_json(json::parse(read_bytes(path.string())));
    } catch (const json::exception& e) {
      throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
  }
};

/// Every referenced checkpoint exists, decodes, and matches its digest.
inline bool verify_manifest(const fs::path& run_dir, std::string* why = nullptr) {
  RunManifest m;
  try {
    m = RunManifest::load(run_dir);
  } catch (const Error& e) {
    if (why) *why = e.what();
    return false;
  }
  for (const auto& [name, digest] : m.checkpoints) {
    const fs::path p = run_dir / name;
    try {
      if (file_digest(p.string()) != digest) {
        if (why) *why = name + ": digest mismatch";
        return false;
      }
      (void)load_checkpoint(p.string());
    } catch (const Error& e) {
      if (why) *why = name + ": " + e.what();
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Orchestration

/// Test hooks into the incubation phase.
struct PipelineHooks {
  /// Called on the worker thread before slot `i` starts; may throw.
  std::function<void(std::size_t)> before_task;
};

class RunContext {
 public:
  /// With `append`, an existing manifest of the same configuration is
  /// extended instead of replaced (staged command-line runs).
  RunContext(const PipelineConfig& cfg, std::string kind, bool append = false) : cfg_(cfg), dir_(cfg.run_dir) {
    fs::create_directories(dir_ / "metrics");
    if (append && fs::exists(dir_ / "manifest.json")) {
      RunManifest old = RunManifest::load(dir_);
      if (old.config_digest == cfg.digest()) {
        manifest_.phases = std::move(old.phases);
        manifest_.checkpoints = std::move(old.checkpoints);
        manifest_.metrics = std::move(old.metrics);
      }
    }
    manifest_.kind = std::move(kind);
    manifest_.run_id = cfg.run_id(manifest_.kind);
    manifest_.seed = cfg.seed;
    manifest_.config = cfg.snapshot;
    manifest_.config_digest = cfg.digest();
    write_bytes_atomic((dir_ / "config.cfg").string(), cfg.snapshot.to_text());
  }

  const fs::path& dir() const { return dir_; }
  const std::string& run_id() const { return manifest_.run_id; }
  RunManifest& manifest() { return manifest_; }

  std::string path(const std::string& file) const { return (dir_ / file).string(); }

  MetricsLog metrics(const std::string& phase) { return MetricsLog(dir_ / "metrics" / (phase + ".jsonl"), run_id(), phase); }

  /// Phase tag stored in checkpoint headers; ties a file to this config.
  std::string tag(const std::string& phase) const { return phase + " cfg=" + cfg_.digest(); }

  void save(const std::string& file, const Checkpoint& ckpt) {
    std::lock_guard lock(mu_);
    save_checkpoint(path(file), ckpt);
    manifest_.checkpoints[file] = file_digest(path(file));
  }

  void record_phase(PhaseRecord p) {
    std::lock_guard lock(mu_);
    manifest_.phases.push_back(std::move(p));
  }

  void set_metric(const std::string& key, double v) {
    std::lock_guard lock(mu_);
    manifest_.metrics[key] = v;
  }

  void flush() {
    std::lock_guard lock(mu_);
    manifest_.save(dir_);
  }

  void fail(const std::string& phase, const std::string& what) {
    {
      std::lock_guard lock(mu_);
      manifest_.status = "failed";
      manifest_.failed_phase = phase;
      manifest_.error = what;
    }
    flush();
  }

  void complete() {
    {
      std::lock_guard lock(mu_);
      manifest_.status = "complete";
    }
    flush();
  }

 private:
  const PipelineConfig& cfg_;
  fs::path dir_;
  RunManifest manifest_;
  std::mutex mu_;
};

namespace detail {

/// Loads `file` into `skeleton` when it exists and carries `tag`.
template <typename M>
bool try_resume(const RunContext& ctx, const std::string& file, const std::string& tag, std::uint64_t seed,
                M& skeleton) {
  if (!fs::exists(ctx.path(file))) return false;
  try {
    Checkpoint c = load_checkpoint(ctx.path(file));
    if (c.phase != tag || c.seed != seed) return false;
    restore(skeleton, c);
    return true;
  } catch (const Error&) {
    return false;
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

struct MetaResult {
  Model meta;
  double test_accuracy = 0;
  bool resumed = false;
};

/// Trains (or, for meta.init = random, only initializes) the meta model and
/// persists meta.ckpt.
inline MetaResult pretrain_meta(const PipelineConfig& cfg, const DatasetPair& data, RunContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const double c0 = detail::cpu_now();
  Model meta(build_meta(cfg.spec, cfg.meta_depth, cfg.seed));
  const bool pretrain = cfg.meta_init == MetaInit::Pretrained && cfg.meta_epochs > 0;
  const std::string tag = ctx.tag(pretrain ? "meta" : "meta_random");
  const TrainConfig mc = pretrain ? cfg.meta_config() : TrainConfig{};
  MetaResult out{std::move(meta), 0, false};
  if (cfg.resume && detail::try_resume(ctx, "meta.ckpt", tag, mc.seed, out.meta)) {
    out.resumed = true;
  } else if (pretrain) {
    MetricsLog log = ctx.metrics("meta");
    train_e2e(out.meta, data.train, &data.test, mc, log.callback(), "meta");
  }
  out.test_accuracy = accuracy(out.meta, data.test);
  ctx.save("meta.ckpt", to_checkpoint(out.meta, tag, mc.seed));
  ctx.set_metric("meta_accuracy", out.test_accuracy);
  ctx.record_phase({"meta", "complete", detail::seconds_since(t0), detail::cpu_now() - c0, out.resumed});
  return out;
}

struct IncubationOutcome {
  std::vector<ModelModule> modules;   // slot order
  std::vector<bool> computed;         // false when resumed from a checkpoint
  std::vector<TrainReport> reports;   // empty report for resumed slots
  double wall_seconds = 0;
};

/// Trains the K target modules independently, up to cfg.parallelism at once.
/// Each task owns its copy of the frozen meta context, its data order and
/// its tape; results do not depend on scheduling. A failing task aborts the
/// phase after the others finish, leaving their checkpoints for resume.
inline IncubationOutcome run_incubation_phase(const PipelineConfig& cfg, const DatasetPair& data, const Model& meta,
                                              RunContext& ctx, const PipelineHooks& hooks = {}) {
  const std::size_t K = cfg.spec.K;
  if (meta.size() != K) throw StitchError("meta model has " + std::to_string(meta.size()) + " modules, expected " + std::to_string(K));
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<ModelModule> target = build_target(cfg.spec, cfg.seed);
  IncubationOutcome out;
  out.modules.resize(K);
  out.computed.assign(K, false);
  out.reports.resize(K);
  std::vector<std::exception_ptr> errors(K);
  std::vector<PhaseRecord> records(K);

  auto task = [&](std::size_t slot) {
    const std::size_t i = slot + 1;
    const auto ts = std::chrono::steady_clock::now();
    const double cs = detail::cpu_now();
    const TrainConfig tc = cfg.modular_config(i);
    const std::string file = "module_" + std::to_string(i) + ".ckpt";
    const std::string phase = "module_" + std::to_string(i);
    const std::string tag = ctx.tag(phase);
    ModelModule module = target[slot];
    if (cfg.resume && detail::try_resume(ctx, file, tag, tc.seed, module)) {
      out.modules[slot] = std::move(module);
      records[slot] = {phase, "complete", detail::seconds_since(ts), detail::cpu_now() - cs, true};
      return;
    }
    if (hooks.before_task) hooks.before_task(i);
    MetricsLog log = ctx.metrics(phase);
    const std::vector<ModelModule>& context = meta.modules();
    ModuleResult r = cfg.method == ModularMethod::Incubation
                         ? incubate_module(context, std::move(module), i, data.train, &data.test, tc, log.callback())
                         : imitate_module(context, std::move(module), i, data.train, &data.test, tc, log.callback());
    ctx.save(file, to_checkpoint(r.module, tag, tc.seed));
    out.modules[slot] = std::move(r.module);
    out.reports[slot] = std::move(r.report);
    out.computed[slot] = true;
    records[slot] = {phase, "complete", detail::seconds_since(ts), detail::cpu_now() - cs, false};
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t slot = next++; slot < K; slot = next++) {
      try {
        task(slot);
      } catch (...) {
        errors[slot] = std::current_exception();
        records[slot] = {"module_" + std::to_string(slot + 1), "failed", 0, 0, false};
      }
    }
  };
  const std::size_t workers = std::min(cfg.parallelism, K);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  out.wall_seconds = detail::seconds_since(t0);

  double core_sum = 0, wall_max = 0;
  for (auto& rec : records) {
    core_sum += rec.core_seconds;
    wall_max = std::max(wall_max, rec.wall_seconds);
    ctx.record_phase(rec);
  }
  ctx.set_metric("modular_core_seconds_sum", core_sum);
  ctx.set_metric("modular_wall_seconds_max", wall_max);
  ctx.set_metric("modular_wall_seconds", out.wall_seconds);
  for (std::size_t slot = 0; slot < K; ++slot) {
    if (errors[slot]) std::rethrow_exception(errors[slot]);
  }
  for (std::size_t slot = 0; slot < K; ++slot) {
    ctx.set_metric("hybrid_accuracy_" + std::to_string(slot + 1),
                   accuracy(stitch_hybrid(meta.modules(), out.modules[slot], slot + 1).network(), data.test));
  }
  return out;
}

namespace detail {

inline void log_single_eval(RunContext& ctx, const std::string& phase, const Model& model, const DatasetPair& data) {
  MetricsLog log = ctx.metrics(phase);
  const Evaluation tr = evaluate(model, data.train);
  const Evaluation te = evaluate(model, data.test);
  log.write({ctx.run_id(), phase, 0, "train", tr.loss, tr.accuracy, 0, 0, 0});
  log.write({ctx.run_id(), phase, 0, "test", te.loss, te.accuracy, 0, 0, 0});
}

/// Runs `body` as phase `name`, marking the manifest failed on error.
template <typename F>
auto run_phase(RunContext& ctx, const std::string& name, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    ctx.fail(name, e.what());
    throw;
  }
}

inline void finish_run(RunContext& ctx, const Model& final_model, const DatasetPair& data) {
  ctx.set_metric("final_accuracy", accuracy(final_model, data.test));
  ctx.set_metric("final_train_accuracy", accuracy(final_model, data.train));
  double total_core = 0;
  for (const auto& p : ctx.manifest().phases) total_core += p.core_seconds;
  ctx.set_metric("total_core_seconds", total_core);
  ctx.complete();
}

}  // namespace detail

/// Trains the freshly initialized target end to end for `epochs`.
inline Model train_target_e2e(const PipelineConfig& cfg, const DatasetPair& data, RunContext& ctx, std::size_t epochs,
                              const std::string& phase) {
  const auto t0 = std::chrono::steady_clock::now();
  const double c0 = detail::cpu_now();
  Model model(build_target(cfg.spec, cfg.seed));
  MetricsLog log = ctx.metrics(phase);
  train_e2e(model, data.train, &data.test, cfg.e2e_config(epochs), log.callback(), phase);
  ctx.record_phase({phase, "complete", detail::seconds_since(t0), detail::cpu_now() - c0, false});
  return model;
}

struct PipelineResult {
  RunManifest manifest;
  Model final_model;
};

/// Meta pre-training, modular training, assembly, fine-tuning. With a
/// modular budget of zero this is literally the end-to-end procedure.
inline PipelineResult run_full_pipeline(PipelineConfig cfg, const PipelineHooks& hooks = {}) {
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);
  RunContext ctx(cfg, "pipeline");
  ctx.set_metric("init_accuracy", accuracy(Model(build_target(cfg.spec, cfg.seed)), data.test));
  ctx.set_metric("modular_epochs", static_cast<double>(cfg.modular_epochs));
  ctx.set_metric("finetune_epochs", static_cast<double>(cfg.finetune_epochs));
  ctx.flush();

  Model final_model;
  if (cfg.modular_epochs == 0) {
    final_model = detail::run_phase(ctx, "finetune", [&] {
      Model untouched(build_target(cfg.spec, cfg.seed));
      ctx.save("assembled.ckpt", to_checkpoint(untouched, ctx.tag("assembled"), cfg.seed));
      ctx.set_metric("assembled_accuracy", accuracy(untouched, data.test));
      return train_target_e2e(cfg, data, ctx, cfg.total_epochs, "finetune");
    });
  } else {
    MetaResult meta = detail::run_phase(ctx, "meta", [&] { return pretrain_meta(cfg, data, ctx); });
    ctx.flush();
    IncubationOutcome inc =
        detail::run_phase(ctx, "modular", [&] { return run_incubation_phase(cfg, data, meta.meta, ctx, hooks); });
    ctx.flush();
    final_model = detail::run_phase(ctx, "assemble", [&] {
      Model assembled = assemble(std::move(inc.modules));
      ctx.save("assembled.ckpt", to_checkpoint(assembled, ctx.tag("assembled"), cfg.seed));
      ctx.set_metric("assembled_accuracy", accuracy(assembled, data.test));
      detail::log_single_eval(ctx, "assembled", assembled, data);
      return assembled;
    });
    if (cfg.finetune_epochs > 0) {
      detail::run_phase(ctx, "finetune", [&] {
        const auto t0 = std::chrono::steady_clock::now();
        const double c0 = detail::cpu_now();
        MetricsLog log = ctx.metrics("finetune");
        fine_tune(final_model, data.train, &data.test, cfg.finetune_config(), log.callback());
        ctx.record_phase({"finetune", "complete", detail::seconds_since(t0), detail::cpu_now() - c0, false});
        return 0;
      });
    }
  }
  ctx.save("final.ckpt", to_checkpoint(final_model, ctx.tag("final"), cfg.seed));
  detail::finish_run(ctx, final_model, data);
  return {ctx.manifest(), std::move(final_model)};
}

/// Standalone end-to-end baseline over the same total budget.
inline PipelineResult run_e2e(PipelineConfig cfg) {
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);
  RunContext ctx(cfg, "e2e");
  ctx.set_metric("init_accuracy", accuracy(Model(build_target(cfg.spec, cfg.seed)), data.test));
  Model model = detail::run_phase(ctx, "e2e", [&] { return train_target_e2e(cfg, data, ctx, cfg.total_epochs, "e2e"); });
  ctx.save("final.ckpt", to_checkpoint(model, ctx.tag("final"), cfg.seed));
  detail::finish_run(ctx, model, data);
  return {ctx.manifest(), std::move(model)};
}

/// Staged end-to-end training: E2E for the modular budget, then a restarted
/// fine-tuning schedule for the fine-tuning budget.
inline PipelineResult run_e2e_plus_tuning(PipelineConfig cfg) {
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);
  RunContext ctx(cfg, "e2e_plus_tuning");
  ctx.set_metric("init_accuracy", accuracy(Model(build_target(cfg.spec, cfg.seed)), data.test));
  Model model;
  if (cfg.modular_epochs == 0 || cfg.finetune_epochs == 0) {
    model = detail::run_phase(ctx, "e2e", [&] { return train_target_e2e(cfg, data, ctx, cfg.total_epochs, "e2e"); });
  } else {
    model = detail::run_phase(ctx, "e2e", [&] { return train_target_e2e(cfg, data, ctx, cfg.modular_epochs, "e2e"); });
    detail::run_phase(ctx, "finetune", [&] {
      const auto t0 = std::chrono::steady_clock::now();
      const double c0 = detail::cpu_now();
      MetricsLog log = ctx.metrics("finetune");
      fine_tune(model, data.train, &data.test, cfg.finetune_config(), log.callback());
      ctx.record_phase({"finetune", "complete", detail::seconds_since(t0), detail::cpu_now() - c0, false});
      return 0;
    });
  }
  ctx.save("final.ckpt", to_checkpoint(model, ctx.tag("final"), cfg.seed));
  detail::finish_run(ctx, model, data);
  return {ctx.manifest(), std::move(model)};
}

}  // namespace incubator

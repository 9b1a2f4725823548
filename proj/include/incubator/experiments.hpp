// SPDX-License-Identifier: Apache-2.0
//
// Replacement probe, sweeps over one configuration axis, and summary tables.
#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "incubator/pipeline.hpp"

namespace incubator {

struct SlotGain {
  std::size_t slot = 0;
  double meta_accuracy = 0;
  double hybrid_accuracy = 0;
  double gain = 0;  // hybrid - meta, never clamped
};

/// accuracy(meta with slot i replaced by modules[i]) - accuracy(meta).
inline std::vector<SlotGain> probe_replacement(const Model& meta, const std::vector<ModelModule>& modules,
                                               const Dataset& eval) {
  const double base = accuracy(meta, eval);
  std::vector<SlotGain> out;
  for (const ModelModule& m : modules) {
    const double acc = accuracy(stitch_hybrid(meta.modules(), m, m.index).network(), eval);
    out.push_back({m.index, base, acc, acc - base});
  }
  return out;
}

inline double mean_gain(const std::vector<SlotGain>& gains) {
  double s = 0;
  for (const auto& g : gains) s += g.gain;
  return gains.empty() ? 0.0 : s / static_cast<double>(gains.size());
}

/// Reads the meta and module checkpoints of a finished pipeline run.
inline std::vector<SlotGain> probe_run_dir(const fs::path& run_dir, const Dataset& eval, const PipelineConfig& cfg) {
  Model meta(build_meta(cfg.spec, cfg.meta_depth, cfg.seed));
  restore(meta, load_checkpoint((run_dir / "meta.ckpt").string()));
  std::vector<ModelModule> modules = build_target(cfg.spec, cfg.seed);
  for (auto& m : modules) restore(m, load_checkpoint((run_dir / ("module_" + std::to_string(m.index) + ".ckpt")).string()));
  return probe_replacement(meta, modules, eval);
}

// ---------------------------------------------------------------------------
// Sweeps

enum class RunKind { Pipeline, E2E, E2EPlusTuning };

inline const char* run_kind_name(RunKind k) {
  switch (k) {
    case RunKind::Pipeline: return "pipeline";
    case RunKind::E2E: return "e2e";
    case RunKind::E2EPlusTuning: return "e2e_plus_tuning";
  }
  return "?";
}

inline PipelineResult run_kind(RunKind kind, const PipelineConfig& cfg) {
  switch (kind) {
    case RunKind::Pipeline: return run_full_pipeline(cfg);
    case RunKind::E2E: return run_e2e(cfg);
    case RunKind::E2EPlusTuning: return run_e2e_plus_tuning(cfg);
  }
  throw ConfigError("unknown run kind");
}

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"meta_depth", "K", "proportion", "data_fraction", "model_depth",
                                                "method"};
  return axes;
}

struct SweepPoint {
  std::string axis;
  std::string value;
  ConfigMap overrides;
  RunKind kind = RunKind::Pipeline;
};

/// Translates one axis value into configuration overrides on top of `base`.
/// data_fraction scales every epoch budget by 1/fraction so the number of
/// optimizer steps stays equal.
inline SweepPoint sweep_point(const ConfigMap& base, const std::string& axis, const std::string& value) {
  SweepPoint p{axis, value, base, RunKind::Pipeline};
  if (axis == "meta_depth") {
    p.overrides.set("meta.depth", value);
  } else if (axis == "K") {
    p.overrides.set("model.modules", value);
  } else if (axis == "proportion") {
    p.overrides.set("pipeline.modular_proportion", value);
  } else if (axis == "model_depth") {
    p.overrides.set("model.depth", value);
  } else if (axis == "data_fraction") {
    ConfigMap probe;
    probe.set("data.fraction", value);
    const double f = probe.get_double("data.fraction", 1.0);
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("data_fraction values must lie in (0, 1]");
    p.overrides.set("data.fraction", value);
    const PipelineConfig resolved = PipelineConfig::from_map(base);
    auto scaled = [&](std::size_t epochs) { return std::to_string(static_cast<std::size_t>(std::llround(epochs / f))); };
    p.overrides.set("pipeline.total_epochs", scaled(resolved.total_epochs));
    p.overrides.set("meta.epochs", scaled(resolved.meta_epochs));
    if (!resolved.modular_proportion) {
      p.overrides.set("pipeline.modular_epochs", scaled(resolved.modular_epochs));
      p.overrides.set("pipeline.finetune_epochs", scaled(resolved.finetune_epochs));
    }
  } else if (axis == "method") {
    if (value == "incubation" || value == "imitation") {
      p.overrides.set("pipeline.method", value);
    } else if (value == "e2e") {
      p.kind = RunKind::E2E;
    } else if (value == "e2e_plus_tuning") {
      p.kind = RunKind::E2EPlusTuning;
    } else {
      throw ConfigError("method values are incubation, imitation, e2e, e2e_plus_tuning");
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "'");
  }
  (void)PipelineConfig::from_map(p.overrides);  // reject invalid values before any run starts
  return p;
}

struct SweepRun {
  SweepPoint point;
  std::uint64_t seed = 0;
  std::string run_dir;
};

/// Enumerates |values| x |seeds| runs under `root`.
inline std::vector<SweepRun> plan_sweep(const ConfigMap& base, const std::string& axis,
                                        const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds,
                                        const fs::path& root) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (seeds.empty()) throw ConfigError("sweep needs at least one repetition");
  std::vector<SweepRun> runs;
  for (const auto& v : values) {
    SweepPoint p = sweep_point(base, axis, v);
    for (std::uint64_t s : seeds) {
      SweepRun r{p, s, (root / (axis + "=" + v) / ("seed" + std::to_string(s))).string()};
      r.point.overrides.set("run.seed", std::to_string(s));
      r.point.overrides.set("run.run_dir", r.run_dir);
      r.point.overrides.set("run.label", axis + "=" + v);
      runs.push_back(std::move(r));
    }
  }
  return runs;
}

inline std::vector<std::string> run_sweep(const std::vector<SweepRun>& runs) {
  std::vector<std::string> dirs;
  for (const auto& r : runs) {
    PipelineConfig cfg = PipelineConfig::from_map(r.point.overrides);
    cfg.run_dir = r.run_dir;
    run_kind(r.point.kind, cfg);
    dirs.push_back(r.run_dir);
  }
  return dirs;
}

// ---------------------------------------------------------------------------
// Summary

struct RunSummary {
  std::string run_dir;
  std::string group;
  std::string kind;
  std::string proportion;
  std::uint64_t seed = 0;
  double final_accuracy = 0;
  double assembled_accuracy = 0;
  double init_accuracy = 0;
  double meta_seconds = 0;
  double modular_core_sum = 0;
  double modular_wall_max = 0;
  double finetune_seconds = 0;
  double e2e_seconds = 0;
};

inline RunSummary read_run_summary(const fs::path& run_dir) {
  std::string why;
  if (!verify_manifest(run_dir, &why)) throw SummaryError("run " + run_dir.string() + " does not verify: " + why);
  const RunManifest m = RunManifest::load(run_dir);
  if (m.status != "complete") throw SummaryError("run " + run_dir.string() + " did not complete");
  RunSummary s;
  s.run_dir = run_dir.string();
  s.kind = m.kind;
  const std::string label = m.config.get("run.label");
  s.group = label.empty() ? m.kind : label;
  if (m.kind == "pipeline") {
    const double mod = m.metric("modular_epochs");
    const double ft = m.metric("finetune_epochs");
    s.proportion = m.config.get("pipeline.modular_proportion");
    if (s.proportion.empty()) {
      std::ostringstream os;
      os << mod / (mod + ft);
      s.proportion = os.str();
    }
  } else {
    s.proportion = "0";
  }
  s.seed = m.seed;
  s.final_accuracy = m.metric("final_accuracy");
  if (!std::isfinite(s.final_accuracy)) throw SummaryError("run " + run_dir.string() + " has no final_accuracy");
  s.assembled_accuracy = m.metric("assembled_accuracy");
  s.init_accuracy = m.metric("init_accuracy");
  s.modular_core_sum = m.metric("modular_core_seconds_sum");
  s.modular_wall_max = m.metric("modular_wall_seconds_max");
  for (const auto& p : m.phases) {
    if (p.name == "meta") s.meta_seconds += p.wall_seconds;
    if (p.name == "finetune") s.finetune_seconds += p.wall_seconds;
    if (p.name == "e2e") s.e2e_seconds += p.wall_seconds;
  }
  return s;
}

struct Aggregate {
  double mean = 0;
  double stddev = 0;  // population
};

inline Aggregate aggregate(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / n)};
}

inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

/// Comma-separated table: one row per run, then one aggregate row per group
/// (mean and population std of final accuracy over seeds).
inline std::string summarize(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw SummaryError("nothing to summarize");
  std::vector<RunSummary> rows;
  for (const auto& d : run_dirs) rows.push_back(read_run_summary(d));
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunSummary*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.group)) order.push_back(r.group);
    groups[r.group].push_back(&r);
  }
  std::ostringstream os;
  os << "# proportion = modular epochs / (modular + fine-tuning epochs); meta pre-training time is excluded\n";
  os << "row,group,kind,proportion,seed,runs,final_accuracy,final_accuracy_std,assembled_accuracy,init_accuracy,"
        "meta_s,modular_core_s_sum,modular_wall_s_max,finetune_s,e2e_s\n";
  for (const auto& g : order) {
    const auto& members = groups[g];
    std::vector<double> finals, assembled;
    for (const RunSummary* r : members) {
      os << "run," << r->group << "," << r->kind << "," << r->proportion << "," << r->seed << ",1,"
         << format_number(r->final_accuracy) << ",," << format_number(r->assembled_accuracy) << ","
         << format_number(r->init_accuracy) << "," << format_number(r->meta_seconds) << ","
         << format_number(r->modular_core_sum) << "," << format_number(r->modular_wall_max) << ","
         << format_number(r->finetune_seconds) << "," << format_number(r->e2e_seconds) << "\n";
      finals.push_back(r->final_accuracy);
      if (std::isfinite(r->assembled_accuracy)) assembled.push_back(r->assembled_accuracy);
    }
    const Aggregate a = aggregate(finals);
    const RunSummary& first = *members.front();
    os << "aggregate," << g << "," << first.kind << "," << first.proportion << ",," << members.size() << ","
       << format_number(a.mean) << "," << format_number(a.stddev) << ","
       << (assembled.empty() ? "" : format_number(aggregate(assembled).mean)) << ",,,,,,\n";
  }
  return os.str();
}

}  // namespace incubator

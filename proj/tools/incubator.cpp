// SPDX-License-Identifier: Apache-2.0
//
// incubator: command-line front end for divide-and-conquer training.
//
// Exit status: 0 ok, 1 gradient check failed or internal error, 2 usage or
// configuration error, 3 training aborted, 4 I/O or format error.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "incubator/experiments.hpp"
#include "incubator/gradcheck.hpp"

using namespace incubator;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kAbort = 3, kIo = 4 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "configuration file ([section] key = value)");
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--run-dir", c.run_dir, "output directory");
  app->allow_extras();
}

/// Turns leftover `--section.key value` / `--section.key=value` arguments
/// into configuration overrides.
ConfigMap parse_overrides(const std::vector<std::string>& extras) {
  ConfigMap m;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("flag --" + key + " needs a value");
      value = extras[++i];
    }
    if (!is_known_key(key)) throw ConfigError("unknown flag --" + key);
    m.set(key, value);
  }
  return m;
}

ConfigMap resolve_map(const Common& c, CLI::App* app) {
  ConfigMap m;
  if (!c.config_path.empty()) m = ConfigMap::load(c.config_path);
  m.merge(parse_overrides(app->remaining()));
  if (c.seed) m.set("run.seed", std::to_string(*c.seed));
  if (!c.run_dir.empty()) m.set("run.run_dir", c.run_dir);
  return m;
}

PipelineConfig resolve(const Common& c, CLI::App* app) { return PipelineConfig::from_map(resolve_map(c, app)); }

void print_manifest_metrics(const RunManifest& m) {
  for (const auto& [k, v] : m.metrics) std::printf("%s = %.6g\n", k.c_str(), v);
}

Model load_model_skeleton(const PipelineConfig& cfg, const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  Model target(build_target(cfg.spec, cfg.seed));
  if (ckpt.spec_hash == spec_hash(target)) {
    restore(target, ckpt);
    return target;
  }
  Model meta(build_meta(cfg.spec, cfg.meta_depth, cfg.seed));
  restore(meta, ckpt);
  return meta;
}

int run(int argc, char** argv) {
  CLI::App app{"Divide-and-conquer training of deep residual MLPs"};
  app.require_subcommand(1);

  Common common;
  std::vector<CLI::App*> with_config;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    with_config.push_back(s);
    return s;
  };
  CLI::App* pretrain = sub("pretrain-meta", "pre-train the meta model (meta.ckpt)");
  CLI::App* incubate = sub("incubate", "train the K target modules against meta.ckpt");
  CLI::App* assemble_cmd = sub("assemble", "assemble module checkpoints into assembled.ckpt");
  CLI::App* finetune = sub("finetune", "fine-tune assembled.ckpt into final.ckpt");
  CLI::App* e2e = sub("e2e", "end-to-end baseline");
  CLI::App* pipeline = sub("pipeline", "meta pre-training, incubation, assembly and fine-tuning");
  CLI::App* sweep = sub("sweep", "run one configuration axis over several values and seeds");
  CLI::App* eval = sub("eval", "evaluate a checkpoint on the test split");
  CLI::App* probe = sub("probe-replacement", "accuracy gain of each trained module inside the meta model");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and a 4-block model");
  CLI::App* summarize_cmd = app.add_subcommand("summarize", "comparison table over finished run directories");

  std::string axis, values_text, seeds_text = "1,2,3";
  std::size_t repetitions = 0;
  sweep->add_option("--axis", axis, "meta_depth | K | proportion | data_fraction | model_depth | method")->required();
  sweep->add_option("--values", values_text, "comma-separated axis values")->required();
  sweep->add_option("--seeds", seeds_text, "comma-separated seeds");
  sweep->add_option("--repetitions", repetitions, "use seeds 1..N");

  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <run_dir>/final.ckpt)");

  std::uint64_t gc_seed = 7;
  gradcheck->add_option("--seed", gc_seed, "seed for random points");

  std::vector<std::string> summary_dirs;
  summarize_cmd->add_option("run_dirs", summary_dirs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (gradcheck->parsed()) {
    bool ok = true;
    double worst_op = 0, worst_model = 0;
    for (const auto& r : run_gradcheck_suite(gc_seed)) {
      std::printf("%-32s max_rel_error=%.3e tol=%.0e %s\n", r.name.c_str(), r.max_error, r.tolerance,
                  r.passed() ? "ok" : "FAIL");
      ok = ok && r.passed();
      (r.tolerance == kModelTolerance ? worst_model : worst_op) =
          std::max(r.tolerance == kModelTolerance ? worst_model : worst_op, r.max_error);
    }
    std::printf("max relative error: ops %.3e, model %.3e\n", worst_op, worst_model);
    return ok ? kOk : kFailed;
  }
  if (summarize_cmd->parsed()) {
    std::cout << summarize(summary_dirs);
    return kOk;
  }

  CLI::App* active = nullptr;
  for (CLI::App* s : with_config) {
    if (s->parsed()) active = s;
  }

  if (active == sweep) {
    ConfigMap base = resolve_map(common, sweep);
    const fs::path root = PipelineConfig::from_map(base).run_dir;
    std::vector<std::string> values;
    std::stringstream vs(values_text);
    for (std::string v; std::getline(vs, v, ',');) {
      if (!v.empty()) values.push_back(v);
    }
    std::vector<std::uint64_t> seeds;
    if (repetitions > 0) {
      for (std::size_t s = 1; s <= repetitions; ++s) seeds.push_back(s);
    } else {
      std::stringstream ss(seeds_text);
      for (std::string v; std::getline(ss, v, ',');) {
        try {
          seeds.push_back(std::stoull(v));
        } catch (const std::exception&) {
          throw ConfigError("bad seed '" + v + "'");
        }
      }
    }
    base.erase("run.run_dir");
    const auto runs = plan_sweep(base, axis, values, seeds, root);
    for (const auto& r : runs) {
      std::fprintf(stderr, "[sweep] %s=%s seed %llu (%s)\n", axis.c_str(), r.point.value.c_str(),
                   static_cast<unsigned long long>(r.seed), run_kind_name(r.point.kind));
    }
    const std::string table = summarize(run_sweep(runs));
    write_bytes_atomic((root / "summary.csv").string(), table);
    std::cout << table;
    return kOk;
  }

  PipelineConfig cfg = resolve(common, active);
  if (active == pipeline) {
    print_manifest_metrics(run_full_pipeline(cfg).manifest);
    return kOk;
  }
  if (active == e2e) {
    print_manifest_metrics(run_e2e(cfg).manifest);
    return kOk;
  }

  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);

  if (active == eval) {
    const std::string path = checkpoint.empty() ? (fs::path(cfg.run_dir) / "final.ckpt").string() : checkpoint;
    const Model model = load_model_skeleton(cfg, path);
    const Evaluation e = evaluate(model, data.test);
    std::printf("checkpoint = %s\ntest_loss = %.6f\ntest_accuracy = %.6f\n", path.c_str(), e.loss, e.accuracy);
    return kOk;
  }
  if (active == probe) {
    const auto gains = probe_run_dir(cfg.run_dir, data.test, cfg);
    std::printf("slot,meta_accuracy,hybrid_accuracy,gain\n");
    for (const auto& g : gains) std::printf("%zu,%.6f,%.6f,%+.6f\n", g.slot, g.meta_accuracy, g.hybrid_accuracy, g.gain);
    std::printf("mean_gain = %+.6f\n", mean_gain(gains));
    return kOk;
  }

  RunContext ctx(cfg, active->get_name(), /*append=*/true);
  try {
    if (active == pretrain) {
      const MetaResult r = pretrain_meta(cfg, data, ctx);
      std::printf("meta_accuracy = %.6f%s\n", r.test_accuracy, r.resumed ? " (resumed)" : "");
    } else if (active == incubate) {
      Model meta(build_meta(cfg.spec, cfg.meta_depth, cfg.seed));
      restore(meta, load_checkpoint(ctx.path("meta.ckpt")));
      const IncubationOutcome r = run_incubation_phase(cfg, data, meta, ctx);
      for (std::size_t i = 0; i < r.modules.size(); ++i) {
        std::printf("module_%zu %s hybrid_accuracy = %.6f\n", i + 1, r.computed[i] ? "trained" : "resumed",
                    ctx.manifest().metric("hybrid_accuracy_" + std::to_string(i + 1)));
      }
    } else if (active == assemble_cmd) {
      std::vector<ModelModule> modules = build_target(cfg.spec, cfg.seed);
      for (auto& m : modules) restore(m, load_checkpoint(ctx.path("module_" + std::to_string(m.index) + ".ckpt")));
      Model assembled = assemble(std::move(modules));
      ctx.save("assembled.ckpt", to_checkpoint(assembled, ctx.tag("assembled"), cfg.seed));
      ctx.set_metric("assembled_accuracy", accuracy(assembled, data.test));
      std::printf("assembled_accuracy = %.6f\n", ctx.manifest().metric("assembled_accuracy"));
    } else if (active == finetune) {
      Model model(build_target(cfg.spec, cfg.seed));
      restore(model, load_checkpoint(ctx.path("assembled.ckpt")));
      MetricsLog log = ctx.metrics("finetune");
      const TrainReport rep = fine_tune(model, data.train, &data.test, cfg.finetune_config(), log.callback());
      ctx.record_phase({"finetune", "complete", rep.wall_ms / 1000.0, rep.cpu_seconds, false});
      ctx.save("final.ckpt", to_checkpoint(model, ctx.tag("final"), cfg.seed));
      ctx.set_metric("final_accuracy", accuracy(model, data.test));
      std::printf("final_accuracy = %.6f\n", ctx.manifest().metric("final_accuracy"));
    }
  } catch (const std::exception& e) {
    ctx.fail(active->get_name(), e.what());
    throw;
  }
  ctx.complete();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const DivisionError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const TrainingAbort& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return kAbort;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailed;
  }
}

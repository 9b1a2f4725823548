// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "incubator/pipeline.hpp"

using namespace incubator;
namespace fs = std::filesystem;

namespace {

ConfigMap tiny(const std::string& run_dir) {
  std::istringstream in(R"(
[data]
per_class = 40
input_dim = 6
[model]
depth = 8
width = 8
modules = 4
[meta]
epochs = 4
[pipeline]
total_epochs = 6
[train]
lr_max = 0.005
)");
  ConfigMap m = ConfigMap::parse(in);
  const fs::path root = fs::temp_directory_path() / "incubator_pipeline_test";
  m.set("run.run_dir", (root / run_dir).string());
  fs::remove_all(root / run_dir);
  return m;
}

std::string bytes_of(const fs::path& p) { return read_bytes(p.string()); }

}  // namespace

TEST_CASE("full pipeline writes the run directory layout") {
  const PipelineConfig cfg = PipelineConfig::from_map(tiny("layout"));
  const PipelineResult r = run_full_pipeline(cfg);
  const fs::path dir = cfg.run_dir;
  for (const char* f : {"manifest.json", "config.cfg", "meta.ckpt", "module_1.ckpt", "module_2.ckpt", "module_3.ckpt",
                        "module_4.ckpt", "assembled.ckpt", "final.ckpt"}) {
    INFO(f);
    CHECK(fs::exists(dir / f));
  }
  for (const char* f : {"meta", "module_1", "module_4", "assembled", "finetune"}) {
    INFO(f);
    CHECK(fs::exists(dir / "metrics" / (std::string(f) + ".jsonl")));
  }
  CHECK(r.manifest.status == "complete");
  CHECK(r.manifest.checkpoints.size() == 7);
  CHECK(verify_manifest(dir));
  for (const char* k : {"init_accuracy", "meta_accuracy", "assembled_accuracy", "final_accuracy",
                        "modular_core_seconds_sum", "modular_wall_seconds_max"}) {
    INFO(k);
    CHECK(std::isfinite(r.manifest.metric(k)));
  }
  const RunManifest loaded = RunManifest::load(dir);
  CHECK(loaded.config.values() == cfg.snapshot.values());
  CHECK(loaded.seed == cfg.seed);

  // the stored config alone reproduces the run
  const ConfigMap snapshot = ConfigMap::load((dir / "config.cfg").string());
  ConfigMap again = snapshot;
  again.set("run.run_dir", (dir.parent_path() / "layout_again").string());
  fs::remove_all(dir.parent_path() / "layout_again");
  run_full_pipeline(PipelineConfig::from_map(again));
  CHECK(bytes_of(dir / "final.ckpt") == bytes_of(dir.parent_path() / "layout_again" / "final.ckpt"));
}

TEST_CASE("metrics records are well formed and epochs are monotone") {
  const PipelineConfig cfg = PipelineConfig::from_map(tiny("metrics"));
  run_full_pipeline(cfg);
  std::ifstream in(fs::path(cfg.run_dir) / "metrics" / "finetune.jsonl");
  std::string line;
  long last = -1;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    CHECK(j.at("phase") == "finetune");
    for (const char* k : {"run_id", "epoch", "split", "loss", "accuracy", "lr", "wall_ms", "core_seconds"}) CHECK(j.contains(k));
    const long e = j.at("epoch").get<long>();
    CHECK(e >= last);
    last = e;
    ++n;
  }
  CHECK(n == 2 * cfg.finetune_epochs);
}

TEST_CASE("proportion zero reduces to end-to-end training") {
  ConfigMap a = tiny("p0_pipeline");
  a.set("pipeline.modular_proportion", "0");
  ConfigMap b = tiny("p0_e2e");
  b.set("pipeline.modular_proportion", "0");
  const PipelineConfig pa = PipelineConfig::from_map(a), pb = PipelineConfig::from_map(b);
  run_full_pipeline(pa);
  run_e2e(pb);
  CHECK(bytes_of(fs::path(pa.run_dir) / "final.ckpt") == bytes_of(fs::path(pb.run_dir) / "final.ckpt"));
  CHECK_FALSE(fs::exists(fs::path(pa.run_dir) / "meta.ckpt"));
  CHECK(verify_manifest(pa.run_dir));
}

TEST_CASE("parallel and sequential incubation agree bitwise") {
  ConfigMap seq = tiny("seq");
  ConfigMap par = tiny("par");
  par.set("pipeline.parallelism", "4");
  const PipelineConfig s = PipelineConfig::from_map(seq), p = PipelineConfig::from_map(par);
  run_full_pipeline(s);
  run_full_pipeline(p);
  for (const char* f : {"module_1.ckpt", "module_2.ckpt", "module_3.ckpt", "module_4.ckpt", "final.ckpt"}) {
    INFO(f);
    CHECK(bytes_of(fs::path(s.run_dir) / f) == bytes_of(fs::path(p.run_dir) / f));
  }
}

TEST_CASE("a failed task aborts the phase and resume recomputes only that task") {
  const PipelineConfig cfg = PipelineConfig::from_map(tiny("resume"));
  PipelineHooks kill3;
  kill3.before_task = [](std::size_t i) {
    if (i == 3) throw TrainingAbort("injected failure in module 3");
  };
  CHECK_THROWS_AS(run_full_pipeline(cfg, kill3), TrainingAbort);
  const fs::path dir = cfg.run_dir;
  const RunManifest failed = RunManifest::load(dir);
  CHECK(failed.status == "failed");
  CHECK(failed.failed_phase == "modular");
  CHECK(fs::exists(dir / "module_1.ckpt"));
  CHECK(fs::exists(dir / "module_2.ckpt"));
  CHECK_FALSE(fs::exists(dir / "module_3.ckpt"));
  CHECK(fs::exists(dir / "module_4.ckpt"));
  const std::string m1 = bytes_of(dir / "module_1.ckpt");

  std::vector<std::size_t> started;
  PipelineHooks record;
  record.before_task = [&](std::size_t i) { started.push_back(i); };
  const PipelineResult r = run_full_pipeline(cfg, record);
  CHECK(started == std::vector<std::size_t>{3});
  CHECK(r.manifest.status == "complete");
  CHECK(bytes_of(dir / "module_1.ckpt") == m1);

  // identical to an uninterrupted run
  ConfigMap clean = tiny("resume_clean");
  const PipelineConfig cc = PipelineConfig::from_map(clean);
  run_full_pipeline(cc);
  CHECK(bytes_of(dir / "final.ckpt") == bytes_of(fs::path(cc.run_dir) / "final.ckpt"));
}

TEST_CASE("resume ignores checkpoints of a different configuration") {
  ConfigMap a = tiny("reconfig");
  const PipelineConfig first = PipelineConfig::from_map(a);
  run_full_pipeline(first);
  const std::string before = bytes_of(fs::path(first.run_dir) / "module_2.ckpt");
  ConfigMap b = a;
  b.set("train.lr_max", "0.002");
  std::vector<std::size_t> started;
  PipelineHooks record;
  record.before_task = [&](std::size_t i) { started.push_back(i); };
  run_full_pipeline(PipelineConfig::from_map(b), record);
  CHECK(started.size() == 4);
  CHECK(bytes_of(fs::path(first.run_dir) / "module_2.ckpt") != before);
}

TEST_CASE("meta checkpoint reload reproduces its accuracy") {
  PipelineConfig cfg = PipelineConfig::from_map(tiny("meta_reload"));
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);
  RunContext ctx(cfg, "test");
  const MetaResult r = pretrain_meta(cfg, data, ctx);
  Model reloaded(build_meta(cfg.spec, cfg.meta_depth, 12345));
  restore(reloaded, load_checkpoint(ctx.path("meta.ckpt")));
  CHECK(reloaded.logits(data.test.features).bitwise_equal(r.meta.logits(data.test.features)));
  CHECK(accuracy(reloaded, data.test) == r.test_accuracy);
}

TEST_CASE("frozen meta model is untouched by the incubation phase") {
  PipelineConfig cfg = PipelineConfig::from_map(tiny("frozen"));
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);
  RunContext ctx(cfg, "test");
  const MetaResult meta = pretrain_meta(cfg, data, ctx);
  const std::string before = encode_checkpoint(to_checkpoint(meta.meta, "m", 0));
  run_incubation_phase(cfg, data, meta.meta, ctx);
  CHECK(encode_checkpoint(to_checkpoint(meta.meta, "m", 0)) == before);
}

TEST_CASE("tampered checkpoints fail manifest verification") {
  const PipelineConfig cfg = PipelineConfig::from_map(tiny("tamper"));
  run_full_pipeline(cfg);
  const fs::path dir = cfg.run_dir;
  REQUIRE(verify_manifest(dir));
  std::string b = bytes_of(dir / "module_2.ckpt");
  b[b.size() - 1] ^= 0x01;
  write_bytes_atomic((dir / "module_2.ckpt").string(), b);
  std::string why;
  CHECK_FALSE(verify_manifest(dir, &why));
  CHECK_THAT(why, Catch::Matchers::ContainsSubstring("module_2"));
  fs::remove(dir / "final.ckpt");
  CHECK_FALSE(verify_manifest(dir));
}

TEST_CASE("imitation method and random meta run through the pipeline") {
  ConfigMap im = tiny("imitation");
  im.set("pipeline.method", "imitation");
  CHECK(run_full_pipeline(PipelineConfig::from_map(im)).manifest.status == "complete");
  ConfigMap rnd = tiny("random_meta");
  rnd.set("meta.init", "random");
  rnd.set("meta.freeze", "false");
  CHECK(run_full_pipeline(PipelineConfig::from_map(rnd)).manifest.status == "complete");
}

TEST_CASE("csv data source with standardization and held-out split") {
  const fs::path dir = fs::temp_directory_path() / "incubator_pipeline_test";
  fs::create_directories(dir);
  const auto d = gen_synthetic(SyntheticKind::Gaussians, 2, 30, 3, 0.4, 1);
  save_csv((dir / "train.csv").string(), d.train, true);
  ConfigMap m = tiny("csv");
  m.set("data.kind", "csv");
  m.set("data.train_path", (dir / "train.csv").string());
  m.set("data.header", "true");
  m.set("data.label_column", "label");
  m.set("data.classes", "2");
  PipelineConfig cfg = PipelineConfig::from_map(m);
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  CHECK(data.train.size() + data.test.size() == d.train.size());
  CHECK(data.test.class_counts() == std::vector<std::size_t>{4, 4});
  bind_data(cfg, data);
  CHECK(cfg.spec.input_dim == 3);
  CHECK(run_e2e(cfg).manifest.status == "complete");
}

TEST_CASE("data fraction subsamples the train split only") {
  ConfigMap m = tiny("fraction");
  m.set("data.fraction", "0.5");
  const PipelineConfig half = PipelineConfig::from_map(m);
  const PipelineConfig full = PipelineConfig::from_map(tiny("fraction_full"));
  const DatasetPair a = load_data(half.data, half.seed), b = load_data(full.data, full.seed);
  CHECK(a.train.size() == b.train.size() / 2);
  CHECK(a.test.features.bitwise_equal(b.test.features));
}

TEST_CASE("relative run directories resolve under INCUBATOR_RUN_DIR") {
  const fs::path root = fs::temp_directory_path() / "incubator_env_root";
  ::setenv("INCUBATOR_RUN_DIR", root.string().c_str(), 1);
  ConfigMap m;
  m.set("run.run_dir", "rel/run");
  CHECK(fs::path(PipelineConfig::from_map(m).run_dir) == root / "rel/run");
  m.set("run.run_dir", "/abs/run");
  CHECK(PipelineConfig::from_map(m).run_dir == "/abs/run");
  ::unsetenv("INCUBATOR_RUN_DIR");
}

static double last_test_loss(const fs::path& jsonl) {
  std::ifstream in(jsonl);
  double loss = std::numeric_limits<double>::quiet_NaN();
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j["split"] == "test") loss = j["loss"].get<double>();
  }
  return loss;
}

TEST_CASE("one epoch of fine-tuning lowers the test loss of the assembled reference model") {
  for (std::uint64_t seed : {1, 2, 3}) {
    ConfigMap m;
    const fs::path dir = fs::temp_directory_path() / "incubator_pipeline_test" / ("one_epoch_" + std::to_string(seed));
    m.set("run.run_dir", dir.string());
    m.set("run.seed", std::to_string(seed));
    m.set("pipeline.modular_epochs", "60");
    m.set("pipeline.finetune_epochs", "1");
    run_full_pipeline(PipelineConfig::from_map(m));
    CHECK(last_test_loss(dir / "metrics" / "finetune.jsonl") < last_test_loss(dir / "metrics" / "assembled.jsonl"));
  }
}

// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: twelve criteria on the reference toy configuration, one
// PASS/FAIL line each. Usage: acceptance <work_dir> <toy.cfg>
//
// Runs are cached under <work_dir> through the pipeline's resume logic, so a
// second invocation only re-evaluates.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "incubator/experiments.hpp"
#include "incubator/gradcheck.hpp"

using namespace incubator;

namespace {

// Tolerances, in accuracy fractions unless noted.
constexpr double kGradOpTol = 1e-5;
constexpr double kGradModelTol = 1e-4;
constexpr double kGradSeconds = 60;
constexpr double kE2EMargin = 0.02;
constexpr double kHeadStartOverInit = 0.10;
constexpr double kHeadStartOverChance = 0.15;
constexpr double kAblationMargin = 0.02;
constexpr double kDepthSlack = 0.01;
constexpr std::size_t kSeeds5 = 5;
constexpr std::size_t kSeeds3 = 3;
constexpr std::size_t kDeterminismTrials = 5;

fs::path g_root;
ConfigMap g_base;
int g_failed = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] %2d %-28s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failed;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean(const std::vector<double>& xs) { return aggregate(xs).mean; }

/// Cached run keyed by (name, seed).
std::map<std::string, RunManifest> g_runs;

RunManifest run(const std::string& name, RunKind kind, ConfigMap m, std::uint64_t seed) {
  const std::string key = name + "/seed" + std::to_string(seed);
  if (auto it = g_runs.find(key); it != g_runs.end()) return it->second;
  m.set("run.seed", std::to_string(seed));
  m.set("run.run_dir", (g_root / name / ("seed" + std::to_string(seed))).string());
  m.set("run.label", name);
  m.set("pipeline.parallelism", "1");
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest r = run_kind(kind, PipelineConfig::from_map(m)).manifest;
  std::fprintf(stderr, "  %-24s seed %llu final %.4f (%.1fs)\n", name.c_str(), static_cast<unsigned long long>(seed),
               r.metric("final_accuracy"), detail::seconds_since(t0));
  return g_runs[key] = r;
}

ConfigMap with(ConfigMap m, const std::string& key, const std::string& value) {
  m.set(key, value);
  return m;
}

std::vector<double> metric_over(const std::string& name, RunKind kind, const ConfigMap& m, std::size_t seeds,
                                const std::string& metric) {
  std::vector<double> out;
  for (std::uint64_t s = 1; s <= seeds; ++s) out.push_back(run(name, kind, m, s).metric(metric));
  return out;
}

std::string array_bytes(const Checkpoint& c) {
  std::string out;
  for (const auto& a : c.arrays) {
    out += a.name;
    out.append(reinterpret_cast<const char*>(a.value.data().data()), a.value.size() * sizeof(double));
  }
  return out;
}

std::string module_bytes(const ModelModule& m) { return array_bytes(to_checkpoint(m, "", 0)); }

// ---------------------------------------------------------------------------

void c1_gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite();
  const double secs = detail::seconds_since(t0);
  double op = 0, model = 0;
  for (const auto& r : results) {
    double& worst = r.tolerance == kModelTolerance ? model : op;
    worst = std::max(worst, r.max_error);
  }
  report(1, "gradient correctness", op < kGradOpTol && model < kGradModelTol && secs < kGradSeconds,
         fmt("ops %.2e (<%.0e), model %.2e (<%.0e), %.2fs", op, kGradOpTol, model, kGradModelTol, secs));
}

void c2_frozen_meta() {
  PipelineConfig cfg = PipelineConfig::from_map(with(g_base, "run.seed", "1"));
  const DatasetPair data = load_data(cfg.data, cfg.seed);
  bind_data(cfg, data);
  run("incubation", RunKind::Pipeline, g_base, 1);
  Model meta(build_meta(cfg.spec, cfg.meta_depth, cfg.seed));
  restore(meta, load_checkpoint((g_root / "incubation" / "seed1" / "meta.ckpt").string()));
  std::vector<std::string> before;
  for (const auto& m : meta.modules()) before.push_back(module_bytes(m));
  const std::vector<ModelModule> target = build_target(cfg.spec, cfg.seed);
  bool same = true;
  std::size_t checked = 0;
  for (std::size_t i = 1; i <= cfg.spec.K; ++i) {
    TrainConfig tc = cfg.modular_config(i);
    HybridNetwork hybrid = stitch_hybrid(meta.modules(), target[i - 1], i);
    detail::run_training("incubate", detail::collect_trainable(hybrid.network()), data.train, nullptr, nullptr, tc,
                         detail::cross_entropy_loss(hybrid.network()), {});
    for (std::size_t j = 1; j <= cfg.spec.K; ++j) {
      if (j == i) continue;
      same = same && module_bytes(hybrid.network().module(j)) == before[j - 1];
      ++checked;
    }
    for (std::size_t j = 1; j <= cfg.spec.K; ++j) same = same && module_bytes(meta.module(j)) == before[j - 1];
  }
  report(2, "frozen meta invariant", same,
         fmt("%zu frozen modules byte-compared after %zu-epoch incubation of each slot", checked,
             cfg.modular_config(1).epochs));
}

void c3_reduction() {
  run("proportion0", RunKind::Pipeline, with(g_base, "pipeline.modular_proportion", "0"), 1);
  run("e2e", RunKind::E2E, g_base, 1);
  const Checkpoint a = load_checkpoint((g_root / "proportion0" / "seed1" / "final.ckpt").string());
  const Checkpoint b = load_checkpoint((g_root / "e2e" / "seed1" / "final.ckpt").string());
  const bool same = a.spec_hash == b.spec_hash && array_bytes(a) == array_bytes(b);
  report(3, "reduction to end-to-end", same, fmt("%zu parameter arrays compared bitwise", a.arrays.size()));
}

void c4_parallel() {
  bool same = true;
  std::size_t compared = 0;
  const std::size_t K = PipelineConfig::from_map(g_base).spec.K;
  for (std::size_t t = 1; t <= kDeterminismTrials; ++t) {
    std::vector<std::string> digests[2];
    for (int par = 0; par < 2; ++par) {
      ConfigMap m = g_base;
      const fs::path dir = g_root / "determinism" / ("trial" + std::to_string(t)) / (par ? "parallel" : "sequential");
      fs::remove_all(dir);
      m.set("run.seed", std::to_string(t));
      m.set("run.run_dir", dir.string());
      m.set("pipeline.resume", "false");
      m.set("pipeline.parallelism", par ? std::to_string(K) : "1");
      m.set("pipeline.finetune_epochs", "0");
      m.set("pipeline.modular_epochs", std::to_string(PipelineConfig::from_map(g_base).modular_epochs));
      run_full_pipeline(PipelineConfig::from_map(m));
      for (std::size_t i = 1; i <= K; ++i) {
        digests[par].push_back(read_bytes((dir / ("module_" + std::to_string(i) + ".ckpt")).string()));
      }
    }
    for (std::size_t i = 0; i < K; ++i) {
      same = same && digests[0][i] == digests[1][i];
      ++compared;
    }
  }
  report(4, "parallel determinism", same,
         fmt("%zu module checkpoints, %zu trials, parallelism 1 vs %zu (%u hardware threads)", compared,
             kDeterminismTrials, K, std::thread::hardware_concurrency()));
}

void c5_to_c8() {
  const auto inc = metric_over("incubation", RunKind::Pipeline, g_base, kSeeds5, "final_accuracy");
  const auto e2e = metric_over("e2e", RunKind::E2E, g_base, kSeeds5, "final_accuracy");
  const double mi = mean(inc), me = mean(e2e);
  report(5, "incubation beats end-to-end", mi - me >= kE2EMargin,
         fmt("incubation %.4f vs e2e %.4f, margin %+.4f (need >= %.2f), 5 seeds", mi, me, mi - me, kE2EMargin));

  const auto assembled = metric_over("incubation", RunKind::Pipeline, g_base, kSeeds5, "assembled_accuracy");
  const auto init = metric_over("incubation", RunKind::Pipeline, g_base, kSeeds5, "init_accuracy");
  const double chance = 1.0 / static_cast<double>(std::stoul(g_base.get("data.classes", "3")));
  const double ma = mean(assembled), m0 = mean(init);
  report(6, "assembled head start", ma - m0 >= kHeadStartOverInit && ma - chance >= kHeadStartOverChance,
         fmt("assembled %.4f, random init %.4f (%+.4f, need >= %.2f), chance %.4f (%+.4f, need >= %.2f)", ma, m0,
             ma - m0, kHeadStartOverInit, chance, ma - chance, kHeadStartOverChance));

  const auto imi = metric_over("imitation", RunKind::Pipeline, with(g_base, "pipeline.method", "imitation"), kSeeds5,
                               "final_accuracy");
  const double mim = mean(imi);
  report(7, "incubation vs imitation", mi >= mim,
         fmt("incubation %.4f vs imitation %.4f, margin %+.4f, 5 paired seeds", mi, mim, mi - mim));

  const ConfigMap tunable = with(g_base, "meta.freeze", "false");
  const auto tun = metric_over("meta_tunable", RunKind::Pipeline, tunable, kSeeds5, "final_accuracy");
  const auto rnd = metric_over("meta_random_tunable", RunKind::Pipeline, with(tunable, "meta.init", "random"), kSeeds5,
                               "final_accuracy");
  const double mt = mean(tun), mr = mean(rnd);
  report(8, "meta ablation ordering", mi >= mt && mt >= mr && mi - mr >= kAblationMargin,
         fmt("pretrained+fixed %.4f >= pretrained+tunable %.4f >= random+tunable %.4f; first-last %+.4f (need >= %.2f)",
             mi, mt, mr, mi - mr, kAblationMargin));
}

void c9_replacement() {
  std::vector<double> gains;
  std::vector<double> hybrid_inc, hybrid_imi;
  for (std::uint64_t s = 1; s <= kSeeds3; ++s) {
    PipelineConfig cfg = PipelineConfig::from_map(with(g_base, "run.seed", std::to_string(s)));
    const DatasetPair data = load_data(cfg.data, cfg.seed);
    bind_data(cfg, data);
    run("incubation", RunKind::Pipeline, g_base, s);
    run("imitation", RunKind::Pipeline, with(g_base, "pipeline.method", "imitation"), s);
    for (const auto& g : probe_run_dir(g_root / "incubation" / ("seed" + std::to_string(s)), data.test, cfg)) {
      gains.push_back(g.gain);
      hybrid_inc.push_back(g.hybrid_accuracy);
    }
    for (const auto& g : probe_run_dir(g_root / "imitation" / ("seed" + std::to_string(s)), data.test, cfg)) {
      hybrid_imi.push_back(g.hybrid_accuracy);
    }
  }
  const double mg = mean(gains), hi = mean(hybrid_inc), hm = mean(hybrid_imi);
  report(9, "replacement gain", mg >= 0 && hi >= hm,
         fmt("mean gain %+.4f over %zu slot-seeds; hybrid incubated %.4f vs imitated %.4f", mg, gains.size(), hi, hm));
}

void c10_data_fraction() {
  std::vector<double> margins;
  std::string detail;
  for (const std::string f : {"1", "0.5", "0.25"}) {
    const SweepPoint p = sweep_point(g_base, "data_fraction", f);
    const std::string prefix = f == "1" ? "" : "fraction" + f + "/";
    const double mi = mean(metric_over(prefix + "incubation", RunKind::Pipeline, f == "1" ? g_base : p.overrides,
                                       kSeeds3, "final_accuracy"));
    const double me =
        mean(metric_over(prefix + "e2e", RunKind::E2E, f == "1" ? g_base : p.overrides, kSeeds3, "final_accuracy"));
    margins.push_back(mi - me);
    detail += fmt("f=%s: %.4f-%.4f=%+.4f; ", f.c_str(), mi, me, mi - me);
  }
  const bool pass = margins[1] >= margins[0] && margins[2] >= margins[1];
  report(10, "data-efficiency trend", pass, detail + "3 seeds, equal iterations");
}

void c11_depth() {
  std::map<std::string, double> inc, e2e;
  std::string detail;
  for (const std::string d : {"8", "32", "64"}) {
    const ConfigMap m = with(g_base, "model.depth", d);
    const std::string prefix = d == "32" ? "" : "depth" + d + "/";
    inc[d] = mean(metric_over(prefix + "incubation", RunKind::Pipeline, m, kSeeds3, "final_accuracy"));
    e2e[d] = mean(metric_over(prefix + "e2e", RunKind::E2E, m, kSeeds3, "final_accuracy"));
    detail += fmt("n=%s inc %.4f e2e %.4f; ", d.c_str(), inc[d], e2e[d]);
  }
  const bool pass = e2e["64"] <= e2e["32"] && inc["64"] >= inc["32"] - kDepthSlack;
  report(11, "depth-scaling trend", pass, detail + "3 seeds");
}

void c12_checkpoint() {
  const fs::path dir = g_root / "roundtrip";
  fs::create_directories(dir);
  ModelSpec spec = PipelineConfig::from_map(g_base).spec;
  spec.input_dim = 16;
  spec.classes = 3;
  Model model(build_target(spec, 11));
  const std::string p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
  save_checkpoint(p1, to_checkpoint(model, "roundtrip", 11));
  Model reloaded(build_target(spec, 12));
  restore(reloaded, load_checkpoint(p1));
  save_checkpoint(p2, to_checkpoint(reloaded, "roundtrip", 11));
  const std::string bytes = read_bytes(p1);
  const bool round = bytes == read_bytes(p2);

  auto refuses = [&](std::string b) {
    try {
      Model target(build_target(spec, 12));
      restore(target, decode_checkpoint(b));
      return false;
    } catch (const FormatError&) {
      return true;
    }
  };
  std::string bad_magic = bytes, bad_version = bytes, bad_hash = bytes;
  bad_magic[0] = 'X';
  bad_version[4] ^= 0x7f;
  bad_hash[8] ^= 0x01;
  const bool m = refuses(bad_magic), v = refuses(bad_version), h = refuses(bad_hash);
  report(12, "checkpoint round trip", round && m && v && h,
         fmt("%zu bytes identical: %s; refuses bad magic %s, version %s, spec hash %s", bytes.size(),
             round ? "yes" : "no", m ? "yes" : "no", v ? "yes" : "no", h ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: acceptance <work_dir> <toy.cfg>\n");
    return 2;
  }
  g_root = argv[1];
  g_base = ConfigMap::load(argv[2]);
  fs::create_directories(g_root);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::function<void()>> criteria = {c1_gradcheck, c12_checkpoint, c2_frozen_meta, c3_reduction,
                                                       c4_parallel,  c5_to_c8,       c9_replacement, c10_data_fraction,
                                                       c11_depth};
  for (const auto& c : criteria) {
    try {
      c();
    } catch (const std::exception& e) {
      std::printf("[FAIL] criterion aborted: %s\n", e.what());
      ++g_failed;
    }
  }
  std::printf("%d criteria failed; %.0fs\n", g_failed, detail::seconds_since(t0));
  return g_failed == 0 ? 0 : 1;
}

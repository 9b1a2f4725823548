// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "incubator/gradcheck.hpp"
#include "incubator/train.hpp"

using namespace incubator;

namespace {

ModelSpec spec_for(const Dataset& d, std::size_t n, std::size_t K) {
  ModelSpec s;
  s.n = n;
  s.K = K;
  s.d = 8;
  s.r = 2;
  s.input_dim = d.input_dim();
  s.classes = d.classes;
  return s;
}

DatasetPair separable() { return gen_synthetic(SyntheticKind::Gaussians, 2, 40, 4, 0.2, 3); }
DatasetPair spirals() { return gen_synthetic(SyntheticKind::Spirals, 3, 60, 8, 0.03, 2, 1.0); }

TrainConfig quick(std::size_t epochs, std::uint64_t seed = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr_max = 1e-2;
  c.lr_min = 1e-4;
  c.seed = seed;
  return c;
}

std::vector<Tensor> snapshot(const std::vector<ModelModule>& ms) {
  std::vector<Tensor> out;
  for (const auto& m : ms) m.for_each_param([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

bool same_bytes(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].bitwise_equal(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("linear probe separates noise-free gaussians") {
  const auto d = gen_synthetic(SyntheticKind::Gaussians, 2, 20, 3, 0.0, 1);
  Tensor w({3, 2}), b({2});
  ParamSet ps{{&w, &b}, {"w", "b"}};
  OptimizerState st;
  TrainConfig c = quick(30);
  c.weight_decay = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    for (const Batch& batch : batches(d.train, 8, epoch, 1)) {
      Tape tape;
      Var logits = linear(tape.constant_ref(batch.features), tape.parameter(w), tape.parameter(b));
      const Gradients g = tape.backward(softmax_cross_entropy(logits, batch.labels));
      opt_step(ps, g, st, 1e-1, c);
    }
  }
  Tape tape(false);
  const Tensor logits = linear(tape.constant_ref(d.test.features), tape.constant_ref(w), tape.constant_ref(b)).value();
  CHECK(count_correct(logits, d.test.labels) == d.test.size());
}

TEST_CASE("e2e reaches full train accuracy on separable data within 20 epochs") {
  const auto d = separable();
  Model m(build_target(spec_for(d.train, 2, 1), 1));
  const TrainReport r = train_e2e(m, d.train, &d.test, quick(20));
  CHECK(r.epochs.size() == 20);
  CHECK(r.epochs.back().train_accuracy == 1.0);
  CHECK(accuracy(m, d.train) == 1.0);
  for (const auto& e : r.epochs) CHECK(std::isfinite(e.train_loss));
}

TEST_CASE("e2e loss does not increase over the first epochs on separable data") {
  const auto d = separable();
  Model m(build_target(spec_for(d.train, 2, 1), 2));
  const TrainReport r = train_e2e(m, d.train, nullptr, quick(3));
  CHECK(r.epochs[1].train_loss <= r.epochs[0].train_loss + 1e-6);
  CHECK(r.epochs[2].train_loss <= r.epochs[1].train_loss + 1e-6);
}

TEST_CASE("zero epochs are rejected") {
  const auto d = separable();
  Model m(build_target(spec_for(d.train, 2, 1), 1));
  CHECK_THROWS_AS(train_e2e(m, d.train, nullptr, quick(0)), ConfigError);
}

TEST_CASE("training is bitwise reproducible") {
  const auto d = spirals();
  auto run = [&] {
    Model m(build_target(spec_for(d.train, 4, 2), 5));
    train_e2e(m, d.train, nullptr, quick(3, 9));
    return snapshot(m.modules());
  };
  CHECK(same_bytes(run(), run()));
  Model other(build_target(spec_for(d.train, 4, 2), 5));
  train_e2e(other, d.train, nullptr, quick(3, 10));
  CHECK_FALSE(same_bytes(run(), snapshot(other.modules())));
}

TEST_CASE("incubation with frozen meta leaves meta bytes untouched") {
  const auto d = spirals();
  const ModelSpec s = spec_for(d.train, 6, 3);
  const auto meta = build_meta(s, 1, 1);
  const auto before = snapshot(meta);
  const auto target = build_target(s, 1);
  for (std::size_t slot = 1; slot <= 3; ++slot) {
    const ModuleResult r = incubate_module(meta, target[slot - 1], slot, d.train, &d.test, quick(2));
    CHECK(r.report.trainable_scalars == target[slot - 1].parameter_count());
    CHECK(r.module.index == slot);
    CHECK(r.module.role == Role::Target);
    CHECK_FALSE(same_bytes(snapshot({r.module}), snapshot({target[slot - 1]})));
  }
  CHECK(same_bytes(before, snapshot(meta)));
}

TEST_CASE("tunable meta co-trains a private copy only") {
  const auto d = spirals();
  const ModelSpec s = spec_for(d.train, 6, 3);
  const auto meta = build_meta(s, 1, 1);
  const auto before = snapshot(meta);
  TrainConfig c = quick(1);
  c.freeze_meta = false;
  const ModuleResult r = incubate_module(meta, build_target(s, 1)[1], 2, d.train, nullptr, c);
  CHECK(r.report.trainable_scalars == Model(meta).trainable_count() - meta[1].parameter_count() +
                                          build_target(s, 1)[1].parameter_count());
  CHECK(same_bytes(before, snapshot(meta)));
}

TEST_CASE("imitation loss is zero for a copied module and non-negative otherwise") {
  const auto d = spirals();
  const ModelSpec s = spec_for(d.train, 3, 3);
  const auto meta = build_meta(s, 1, 4);
  for (std::size_t slot = 1; slot <= 3; ++slot) {
    ModelModule copy = build_target(s, 2)[slot - 1];
    copy_parameters(meta[slot - 1], copy);
    Tape tape(false);
    CHECK(imitation_loss(tape, meta, copy, slot, d.train.features).value().item() == 0.0);
    Tape t2(false);
    CHECK(imitation_loss(t2, meta, build_target(s, 2)[slot - 1], slot, d.train.features).value().item() > 0.0);
  }
}

TEST_CASE("imitation trains only the target module and ignores labels") {
  const auto d = spirals();
  const ModelSpec s = spec_for(d.train, 6, 3);
  const auto meta = build_meta(s, 1, 1);
  const auto before = snapshot(meta);
  const auto target = build_target(s, 3);
  Dataset relabeled = d.train;
  for (auto& y : relabeled.labels) y = (y + 1) % 3;
  const ModuleResult a = imitate_module(meta, target[1], 2, d.train, nullptr, quick(2));
  const ModuleResult b = imitate_module(meta, target[1], 2, relabeled, nullptr, quick(2));
  CHECK(same_bytes(snapshot({a.module}), snapshot({b.module})));
  CHECK(a.report.trainable_scalars == target[1].parameter_count());
  CHECK(std::isnan(a.report.epochs.back().train_accuracy));
  CHECK(same_bytes(before, snapshot(meta)));
  TrainConfig tunable = quick(1);
  tunable.freeze_meta = false;
  CHECK(imitate_module(meta, target[1], 2, d.train, nullptr, tunable).report.trainable_scalars ==
        target[1].parameter_count());
}

TEST_CASE("fine-tuning with zero learning rate is a null step") {
  const auto d = spirals();
  Model m(build_target(spec_for(d.train, 4, 2), 1));
  const auto before = snapshot(m.modules());
  TrainConfig c = quick(2);
  c.lr_max = 0;
  c.lr_min = 0;
  fine_tune(m, d.train, nullptr, c);
  CHECK(same_bytes(before, snapshot(m.modules())));
}

TEST_CASE("fine-tuning makes every parameter trainable and is deterministic") {
  const auto d = spirals();
  auto run = [&] {
    auto ms = build_target(spec_for(d.train, 4, 2), 1);
    for (auto& mm : ms) mm.frozen = true;
    Model m(ms);
    const TrainReport r = fine_tune(m, d.train, nullptr, quick(1, 4));
    CHECK(r.trainable_scalars == m.trainable_count());
    return snapshot(m.modules());
  };
  CHECK(same_bytes(run(), run()));
}

TEST_CASE("divergence aborts training") {
  const auto d = separable();
  Model m(build_target(spec_for(d.train, 2, 1), 1));
  TrainConfig c = quick(5);
  c.lr_max = 1e300;
  c.lr_min = 1e300;
  CHECK_THROWS_AS(train_e2e(m, d.train, nullptr, c), TrainingAbort);
}

TEST_CASE("per-epoch records carry test metrics and schedule") {
  const auto d = separable();
  Model m(build_target(spec_for(d.train, 2, 1), 1));
  std::vector<EpochRecord> seen;
  const TrainReport r = train_e2e(m, d.train, &d.test, quick(4), [&](const EpochRecord& e) { seen.push_back(e); });
  REQUIRE(seen.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(seen[k].epoch == k);
    CHECK(std::isfinite(seen[k].test_accuracy));
    CHECK(std::isfinite(seen[k].test_loss));
  }
  CHECK(seen[3].lr < seen[0].lr);
  CHECK(r.steps == 4 * batches_per_epoch(d.train.size(), 16));
}

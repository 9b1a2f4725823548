// SPDX-License-Identifier: Apache-2.0
//
// Training procedures: end-to-end, module incubation, module imitation and
// fine-tuning. All four share one mini-batch loop; they differ only in which
// parameters are trainable and which loss is minimized.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "incubator/autodiff.hpp"
#include "incubator/data.hpp"
#include "incubator/model.hpp"
#include "incubator/optim.hpp"

namespace incubator {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN when not measured
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;
  double wall_ms = 0;
};

struct TrainReport {
  std::string phase;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  std::size_t trainable_scalars = 0;
  double wall_ms = 0;
  double cpu_seconds = 0;

  double final_test_accuracy() const { return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().test_accuracy; }
};

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
};

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  auto r = logits.row(row);
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax_row(logits, i) == static_cast<std::size_t>(labels[i])) ++correct;
  }
  return correct;
}

/// Mean cross-entropy and accuracy of `model` over `data`.
inline Evaluation evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 256) {
  data.validate();
  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    Dataset part = data.select(std::span<const std::size_t>(idx).subspan(start, end - start));
    Tape tape(false);
    Var logits = model.forward(tape, part.features);
    loss += softmax_cross_entropy(logits, part.labels).value().item() * static_cast<double>(end - start);
    correct += count_correct(logits.value(), part.labels);
  }
  return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

inline double accuracy(const Model& model, const Dataset& data) { return evaluate(model, data).accuracy; }

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Loss for one batch, plus the logits used for running train accuracy
/// (nullopt when the loss has no class logits).
struct StepOutput {
  Var loss;
  std::optional<Var> logits;
};
using BatchLoss = std::function<StepOutput(Tape&, const Batch&)>;

namespace detail {

// CPU time of the calling thread, so concurrent tasks account separately.
inline double cpu_now() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

inline ParamSet collect_trainable(Model& model) {
  ParamSet ps;
  for (auto& m : model.modules()) {
    if (m.frozen) continue;
    const std::string prefix = std::string(role_name(m.role)) + ".m" + std::to_string(m.index) + ".";
    m.for_each_param([&](const std::string& name, Tensor& t) {
      ps.tensors.push_back(&t);
      ps.names.push_back(prefix + name);
    });
  }
  return ps;
}

/// Shared mini-batch loop. `eval_model` is scored on `test` after every
/// epoch when both are given.
inline TrainReport run_training(const std::string& phase, ParamSet params, const Dataset& train, const Dataset* test,
                                const Model* eval_model, const TrainConfig& config, const BatchLoss& batch_loss,
                                const EpochCallback& on_epoch) {
  config.validate();
  train.validate();
  TrainReport report;
  report.phase = phase;
  report.trainable_scalars = params.scalar_count();
  const auto t0 = std::chrono::steady_clock::now();
  const double c0 = cpu_now();
  const std::size_t per_epoch = batches_per_epoch(train.size(), config.batch_size);
  const std::size_t total_steps = per_epoch * config.epochs;
  OptimizerState state;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    bool have_logits = false;
    double lr = 0;
    for (const Batch& batch : batches(train, config.batch_size, epoch, config.seed)) {
      lr = lr_at(config, step, total_steps);
      Gradients grads;
      double loss_value = 0;
      try {
        Tape tape;
        StepOutput out = batch_loss(tape, batch);
        loss_value = out.loss.value().item();
        if (out.logits) {
          correct += count_correct(out.logits->value(), batch.labels);
          have_logits = true;
        }
        grads = tape.backward(out.loss);
      } catch (const NumericError& e) {
        throw TrainingAbort(phase + ": diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      opt_step(params, grads, state, lr, config);
      loss_sum += loss_value * static_cast<double>(batch.labels.size());
      seen += batch.labels.size();
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    if (!std::isfinite(rec.train_loss)) throw TrainingAbort(phase + ": non-finite loss at epoch " + std::to_string(epoch));
    if (have_logits) rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (test && eval_model) {
      const Evaluation ev = evaluate(*eval_model, *test);
      rec.test_loss = ev.loss;
      rec.test_accuracy = ev.accuracy;
    }
    rec.lr = lr;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - e0).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  report.steps = step;
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  report.cpu_seconds = cpu_now() - c0;
  return report;
}

inline BatchLoss cross_entropy_loss(const Model& model) {
  return [&model](Tape& tape, const Batch& b) {
    Var logits = model.forward(tape, b.features);
    return StepOutput{softmax_cross_entropy(logits, b.labels), logits};
  };
}

}  // namespace detail

/// Trains every non-frozen parameter of `model` on the task loss.
inline TrainReport train_e2e(Model& model, const Dataset& train, const Dataset* test, const TrainConfig& config,
                             const EpochCallback& on_epoch = {}, const std::string& phase = "e2e") {
  return detail::run_training(phase, detail::collect_trainable(model), train, test, &model, config,
                              detail::cross_entropy_loss(model), on_epoch);
}

/// Restarted-schedule training of an assembled model; every parameter is
/// trainable.
inline TrainReport fine_tune(Model& model, const Dataset& train, const Dataset* test, const TrainConfig& config,
                             const EpochCallback& on_epoch = {}) {
  model.set_frozen(false);
  return train_e2e(model, train, test, config, on_epoch, "finetune");
}

struct ModuleResult {
  ModelModule module;
  TrainReport report;
};

/// Trains target module `slot` inside the hybrid built from `meta`, against
/// the task loss. With config.freeze_meta the meta modules are constants on
/// the tape; otherwise they are co-trained (on a private copy).
inline ModuleResult incubate_module(const std::vector<ModelModule>& meta, ModelModule target_module, std::size_t slot,
                                    const Dataset& train, const Dataset* test, const TrainConfig& config,
                                    const EpochCallback& on_epoch = {}) {
  HybridNetwork hybrid = stitch_hybrid(meta, std::move(target_module), slot);
  if (!config.freeze_meta) hybrid.unfreeze_context();
  TrainReport report = detail::run_training("incubate_" + std::to_string(slot),
                                            detail::collect_trainable(hybrid.network()), train, test,
                                            &hybrid.network(), config, detail::cross_entropy_loss(hybrid.network()),
                                            on_epoch);
  ModelModule trained = std::move(hybrid.trainable());
  trained.frozen = false;
  return {std::move(trained), std::move(report)};
}

/// L1 imitation loss between `target_module` and meta module `slot` on the
/// features produced by frozen meta modules 1..slot-1.
inline Var imitation_loss(Tape& tape, const std::vector<ModelModule>& meta, const ModelModule& target_module,
                          std::size_t slot, const Tensor& features) {
  Var h = tape.constant_ref(features);
  for (std::size_t j = 0; j + 1 < slot; ++j) h = meta[j].forward(tape, h);
  Var teacher = meta[slot - 1].forward(tape, h);
  Var student = target_module.forward(tape, h);
  return l1_distance(student, teacher);
}

/// Module imitation baseline. The meta model is always frozen and labels
/// are unused; test accuracy is that of the hybrid network.
inline ModuleResult imitate_module(const std::vector<ModelModule>& meta, ModelModule target_module, std::size_t slot,
                                   const Dataset& train, const Dataset* test, const TrainConfig& config,
                                   const EpochCallback& on_epoch = {}) {
  HybridNetwork hybrid = stitch_hybrid(meta, std::move(target_module), slot);
  std::vector<ModelModule> frozen_meta = meta;
  for (auto& m : frozen_meta) m.frozen = true;
  const ModelModule& student = hybrid.trainable();
  BatchLoss loss = [&](Tape& tape, const Batch& b) {
    return StepOutput{imitation_loss(tape, frozen_meta, student, slot, b.features), std::nullopt};
  };
  TrainReport report = detail::run_training("imitate_" + std::to_string(slot),
                                            detail::collect_trainable(hybrid.network()), train, test,
                                            &hybrid.network(), config, loss, on_epoch);
  ModelModule trained = std::move(hybrid.trainable());
  return {std::move(trained), std::move(report)};
}

}  // namespace incubator

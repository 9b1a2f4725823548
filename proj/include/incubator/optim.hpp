// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "incubator/autodiff.hpp"
#include "incubator/error.hpp"
#include "incubator/tensor.hpp"

namespace incubator {

enum class MetaInit { Pretrained, Random };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  std::size_t warmup_epochs = 0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool freeze_meta = true;
  MetaInit meta_init = MetaInit::Pretrained;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (lr_min > lr_max) throw ConfigError("lr_min must not exceed lr_max");
    if (lr_min < 0 || weight_decay < 0) throw ConfigError("learning rates and weight decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  }
};

/// Linear warmup from 0 to lr_max, then cosine decay reaching lr_min at
/// `total_steps`. Warmup length is warmup_epochs/epochs of the run.
inline double lr_at(const TrainConfig& config, std::size_t global_step, std::size_t total_steps) {
  const std::size_t warmup = total_steps * config.warmup_epochs / config.epochs;
  if (global_step < warmup) {
    return config.lr_max * static_cast<double>(global_step) / static_cast<double>(warmup);
  }
  const double progress =
      static_cast<double>(global_step - warmup) / static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
  return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Trainable tensors with their display names, in a fixed order.
struct ParamSet {
  std::vector<Tensor*> tensors;
  std::vector<std::string> names;

  std::size_t size() const { return tensors.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Tensor* t : tensors) n += t->size();
    return n;
  }
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// Adam with decoupled weight decay. Decay p <- p * (1 - lr * wd) is
/// applied before the bias-corrected moment step. Missing gradients count
/// as zero.
inline void opt_step(ParamSet& params, const Gradients& grads, OptimizerState& state, double lr,
                     const TrainConfig& config) {
  if (state.m.empty()) {
    for (const Tensor* p : params.tensors) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw Error("optimizer state does not match parameter set");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor* g = grads.find(*params.tensors[k]);
    if (g && !g->all_finite()) {
      const std::string name = k < params.names.size() ? params.names[k] : "#" + std::to_string(k);
      throw TrainingAbort("non-finite gradient for parameter " + name + " at step " + std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params.tensors[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const Tensor* g = grads.find(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      p[i] *= decay;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

}  // namespace incubator

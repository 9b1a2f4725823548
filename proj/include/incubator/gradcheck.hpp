// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every differentiable op and of a full model.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "incubator/autodiff.hpp"
#include "incubator/model.hpp"
#include "incubator/rng.hpp"

namespace incubator {

struct GradCheckResult {
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  bool passed() const { return max_error < tolerance; }
};

constexpr double kOpTolerance = 1e-5;
constexpr double kModelTolerance = 1e-4;

namespace detail {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Tensor t(std::move(shape));
  CounterRng rng(seed);
  for (auto& v : t.storage()) v = stddev * rng.normal();
  return t;
}

/// Pushes entries out of (-margin, margin) so relu kinks are not straddled.
inline Tensor away_from_zero(Tensor t, double margin = 0.1) {
  for (auto& v : t.storage()) {
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return t;
}

/// Every weight ~ N(0, stddev), gains ~ 1 + N(0, stddev).
inline void randomize(std::vector<ModelModule>& modules, std::uint64_t seed, double stddev) {
  std::uint64_t k = 0;
  for (auto& m : modules) {
    m.for_each_param([&](const std::string& name, Tensor& t) {
      CounterRng rng(derive_seed(seed, k++));
      const bool gain = name.find("ln_gain") != std::string::npos;
      for (auto& v : t.storage()) v = (gain ? 1.0 : 0.0) + stddev * rng.normal();
    });
  }
}

}  // namespace detail

/// Checks each op in isolation, one residual block, and a 4-block model
/// with cross-entropy loss. Deterministic for a given seed.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 7, double eps = 1e-5) {
  using detail::random_tensor;
  std::vector<GradCheckResult> out;
  auto op = [&](const std::string& name, const ScalarFn& f, const Tensor& point) {
    out.push_back({name, grad_check(f, point, eps, 64, derive_seed(seed, hash_string(name))), kOpTolerance});
  };
  const Tensor A = random_tensor({4, 3}, derive_seed(seed, 1));
  const Tensor B = random_tensor({3, 5}, derive_seed(seed, 2));
  const Tensor C = random_tensor({4, 3}, derive_seed(seed, 3));
  const Tensor W = random_tensor({4, 5}, derive_seed(seed, 4));
  const Tensor bias = random_tensor({3}, derive_seed(seed, 5));
  const std::vector<int> labels = {0, 2, 1, 2};
  // Weighted sums keep the scalar loss sensitive to every coordinate.
  auto weighted = [](Tape& t, Var v, const Tensor& w) { return sum(mul(v, t.constant_ref(w))); };
  const Tensor W43 = random_tensor({4, 3}, derive_seed(seed, 6));

  op("matmul.a", [&](Tape& t, Var a) { return weighted(t, matmul(a, t.constant_ref(B)), W); }, A);
  op("matmul.b", [&](Tape& t, Var b) { return weighted(t, matmul(t.constant_ref(A), b), W); }, B);
  op("add", [&](Tape& t, Var a) { return weighted(t, add(a, mul(a, a)), W43); }, A);
  op("sub", [&](Tape& t, Var a) { return weighted(t, sub(t.constant_ref(C), mul(a, a)), W43); }, A);
  op("mul", [&](Tape& t, Var a) { return weighted(t, mul(a, t.constant_ref(C)), W43); }, A);
  op("scale", [&](Tape& t, Var a) { return weighted(t, scale(mul(a, a), -1.7), W43); }, A);
  op("add_bias.x", [&](Tape& t, Var a) { return weighted(t, mul(add_bias(a, t.constant_ref(bias)), a), W43); }, A);
  op("add_bias.bias", [&](Tape& t, Var b) { return weighted(t, mul(add_bias(t.constant_ref(C), b), t.constant_ref(C)), W43); },
     bias);
  op("relu", [&](Tape& t, Var a) { return weighted(t, relu(a), W43); }, detail::away_from_zero(A));
  const Tensor gain = random_tensor({3}, derive_seed(seed, 7));
  op("layer_norm.x",
     [&](Tape& t, Var a) { return weighted(t, layer_norm(a, t.constant_ref(gain), t.constant_ref(bias)), W43); }, A);
  op("layer_norm.gain",
     [&](Tape& t, Var g) { return weighted(t, layer_norm(t.constant_ref(A), g, t.constant_ref(bias)), W43); }, gain);
  op("layer_norm.bias",
     [&](Tape& t, Var b) { return weighted(t, layer_norm(t.constant_ref(A), t.constant_ref(gain), b), W43); }, bias);
  op("softmax_cross_entropy", [&](Tape&, Var a) { return softmax_cross_entropy(a, labels); }, A);
  op("l1_distance", [&](Tape& t, Var a) { return l1_distance(a, t.constant_ref(C)); }, A);
  op("sum", [&](Tape&, Var a) { return sum(mul(a, a)); }, A);
  op("mean", [&](Tape&, Var a) { return mean(mul(a, mul(a, a))); }, A);

  {
    ModelSpec spec;
    spec.n = 1;
    spec.K = 1;
    spec.d = 6;
    spec.r = 2;
    spec.input_dim = 6;
    spec.classes = 3;
    std::vector<ModelModule> mods = build_target(spec, seed);
    detail::randomize(mods, derive_seed(seed, 8), 0.5);
    const ResidualBlock& blk = mods.front().blocks.front();
    ModelModule block_only;
    block_only.index = 1;
    block_only.count = 1;
    block_only.width = spec.d;
    block_only.blocks = {blk};
    const Tensor x = random_tensor({5, 6}, derive_seed(seed, 9));
    const Tensor w = random_tensor({5, 6}, derive_seed(seed, 10));
    op("residual_block.x", [&](Tape& t, Var a) { return weighted(t, block_only.forward(t, a), w); }, x);
    std::vector<Tensor*> params = block_only.parameters();
    out.push_back({"residual_block.params",
                   grad_check_params(params, [&](Tape& t) { return weighted(t, block_only.forward(t, t.constant_ref(x)), w); },
                                     eps, 64, derive_seed(seed, 11)),
                   kOpTolerance});
  }
  {
    ModelSpec spec;
    spec.n = 4;
    spec.K = 2;
    spec.d = 8;
    spec.r = 2;
    spec.input_dim = 5;
    spec.classes = 3;
    Model model(build_target(spec, seed));
    detail::randomize(model.modules(), derive_seed(seed, 12), 0.3);
    const Tensor x = random_tensor({6, 5}, derive_seed(seed, 13));
    const std::vector<int> y = {0, 1, 2, 1, 0, 2};
    std::vector<Tensor*> params = model.trainable_parameters();
    out.push_back({"model.4_blocks.cross_entropy",
                   grad_check_params(params, [&](Tape& t) { return softmax_cross_entropy(model.forward(t, x), y); }, eps,
                                     20, derive_seed(seed, 14)),
                   kModelTolerance});
  }
  return out;
}

}  // namespace incubator

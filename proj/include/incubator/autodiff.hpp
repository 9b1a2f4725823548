// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense Tensors.
//
// A Tape records one forward evaluation. Parameters enter as leaves that
// borrow the caller's tensors; frozen tensors enter as constants and never
// receive a gradient. Gradients still flow *through* constants into earlier
// leaves, which is what lets a hybrid network train one slot while the
// modules around it stay fixed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "incubator/error.hpp"
#include "incubator/rng.hpp"
#include "incubator/tensor.hpp"

namespace incubator {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Gradient map produced by Tape::backward, keyed by parameter address.
class Gradients {
 public:
  bool contains(const Tensor& param) const { return grads_.count(&param) != 0; }

  const Tensor& at(const Tensor& param) const {
    auto it = grads_.find(&param);
    if (it == grads_.end()) throw Error("no gradient recorded for parameter");
    return it->second;
  }

  const Tensor* find(const Tensor& param) const {
    auto it = grads_.find(&param);
    return it == grads_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return grads_.size(); }

  void insert(const Tensor* param, Tensor grad) { grads_.insert_or_assign(param, std::move(grad)); }

 private:
  std::unordered_map<const Tensor*, Tensor> grads_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  /// With record=false the tape only evaluates; nothing requires a gradient.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, false, {}, nullptr, {}});
    return Var{this, nodes_.size() - 1};
  }

  /// Constant that borrows `value`; it must outlive the tape.
  Var constant_ref(const Tensor& value) {
    nodes_.push_back(Node{{}, &value, false, {}, nullptr, {}});
    return Var{this, nodes_.size() - 1};
  }

  /// Trainable leaf borrowing `param`; it must outlive the tape and stay
  /// unmodified until backward() returns.
  Var parameter(const Tensor& param) {
    if (!record_) return constant_ref(param);
    nodes_.push_back(Node{{}, &param, true, {}, nullptr, {}});
    leaves_.push_back(nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
  }

  /// Appends an op result. `op` names the op in non-finite diagnostics.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.tape != this) throw Error(std::string(op) + ": input belongs to another tape");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{std::move(value), nullptr, needs, std::move(ids), std::move(backward), {}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }

  /// Gradient accumulator for `v`, or nullptr when `v` needs no gradient.
  /// Only valid inside a BackwardFn.
  Tensor* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(value(v.id).shape());
    return &n.grad;
  }

  /// Propagates d(loss)/d(node) to every leaf. Leaves that do not reach
  /// `loss` receive zeros. A recording supports exactly one backward pass.
  Gradients backward(Var loss) {
    if (loss.tape != this) throw Error("backward: loss belongs to another tape");
    if (consumed_) throw StaleTapeError("backward called twice on one recording");
    consumed_ = true;
    if (value(loss).size() != 1) {
      throw DimensionError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
    }
    if (nodes_[loss.id].requires_grad) {
      nodes_[loss.id].grad = Tensor(value(loss).shape(), 1.0);
      for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.backward || n.grad.empty()) continue;
        n.backward(*this, n.grad);
      }
    }
    Gradients out;
    for (std::size_t id : leaves_) {
      Node& n = nodes_[id];
      out.insert(n.external, n.grad.empty() ? Tensor(n.external->shape()) : std::move(n.grad));
    }
    return out;
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
  };

  bool record_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<std::size_t> leaves_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error(std::string(op) + ": operands on different tapes");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out({m, n});
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) detail::gemm_nt(g.data().data(), b.value().data().data(), ga->data().data(), m, k, n);
    if (Tensor* gb = t.grad_buffer(b)) detail::gemm_tn(a.value().data().data(), g.data().data(), gb->data().data(), m, k, n);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  detail::axpy(out, b.value());
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) detail::axpy(*ga, g);
    if (Tensor* gb = t.grad_buffer(b)) detail::axpy(*gb, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  detail::axpy(out, b.value(), -1.0);
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) detail::axpy(*ga, g);
    if (Tensor* gb = t.grad_buffer(b)) detail::axpy(*gb, g, -1.0);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) detail::axpy(*ga, g, s);
  });
}

/// x[m,n] + bias[n] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_tape(x, bias, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_matrix(xv, "add_bias");
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t m = xv.rows(), n = xv.cols();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  return x.tape->record("add_bias", std::move(out), {x, bias}, [x, bias, m, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x)) detail::axpy(*gx, g);
    if (Tensor* gb = t.grad_buffer(bias)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
      }
    }
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape->record("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) (*ga)[i] += g[i];
      }
    }
  });
}

constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis, then applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  detail::require_same_tape(x, gain, "layer_norm");
  detail::require_same_tape(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().shape() != Shape{n} || bias.value().shape() != Shape{n}) {
    throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out({m, n});
  Tensor xhat({m, n});
  std::vector<double> rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = xv.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mu) * rstd[i];
      xhat[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Tensor& g) {
        const Tensor& gv = gain.value();
        if (Tensor* gg = t.grad_buffer(gain)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[i * n + j] * xhat[i * n + j];
          }
        }
        if (Tensor* gb = t.grad_buffer(bias)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
          }
        }
        if (Tensor* gx = t.grad_buffer(x)) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              sum_d += d;
              sum_dx += d * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              (*gx)[i * n + j] += rstd[i] * (d - inv_n * sum_d - xhat[i * n + j] * inv_n * sum_dx);
            }
          }
        }
      });
}

/// Mean over the batch of -log softmax(logits)[label].
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  detail::require_matrix(z, "softmax_cross_entropy");
  const std::size_t m = z.rows(), c = z.cols();
  if (labels.empty() || m == 0) throw EmptyInputError("softmax_cross_entropy: empty batch");
  if (labels.size() != m) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
  }
  Tensor probs({m, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const double* zi = z.data().data() + i * c;
    const double zmax = *std::max_element(zi, zi + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(zi[j] - zmax);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(zi[j] - zmax) / denom;
    loss += std::log(denom) - (zi[y] - zmax);
  }
  loss /= static_cast<double>(m);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(
      "softmax_cross_entropy", Tensor::scalar(loss), {logits},
      [logits, m, c, probs = std::move(probs), ys = std::move(ys)](Tape& t, const Tensor& g) {
        if (Tensor* gz = t.grad_buffer(logits)) {
          const double s = g[0] / static_cast<double>(m);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              const double target = static_cast<int>(j) == ys[i] ? 1.0 : 0.0;
              (*gz)[i * c + j] += s * (probs[i * c + j] - target);
            }
          }
        }
      });
}

/// Mean absolute difference over all elements.
inline Var l1_distance(Var a, Var b) {
  detail::require_same_tape(a, b, "l1_distance");
  detail::require_same_shape(a.value(), b.value(), "l1_distance");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
  const double inv = 1.0 / static_cast<double>(av.size());
  return a.tape->record("l1_distance", Tensor::scalar(acc * inv), {a, b}, [a, b, inv](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor* ga = t.grad_buffer(a);
    Tensor* gb = t.grad_buffer(b);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double diff = av[i] - bv[i];
      const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      if (ga) (*ga)[i] += g[0] * inv * s;
      if (gb) (*gb)[i] -= g[0] * inv * s;
    }
  });
}

inline Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return a.tape->record("sum", Tensor::scalar(acc), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (double& v : ga->data()) v += g[0];
    }
  });
}

inline Var mean(Var a) {
  if (a.value().empty()) throw EmptyInputError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

inline Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

// ---------------------------------------------------------------------------
// Finite-difference checking

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

namespace detail {

inline std::vector<std::size_t> sample_coordinates(std::size_t n, std::size_t max_coords, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n > max_coords) {
    CounterRng rng(seed);
    shuffle(idx, rng);
    idx.resize(max_coords);
  }
  return idx;
}

}  // namespace detail

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max relative error between the tape gradient of `f` at `point` and
/// central differences, over up to `max_coords` sampled coordinates.
inline double grad_check(const ScalarFn& f, const Tensor& point, double eps = 1e-5, std::size_t max_coords = 64,
                         std::uint64_t seed = 0) {
  Tensor x = point;
  Gradients grads;
  {
    Tape tape;
    Var xv = tape.parameter(x);
    grads = tape.backward(f(tape, xv));
  }
  const Tensor& analytic = grads.at(x);
  auto eval = [&](const Tensor& at) {
    Tape tape(false);
    return f(tape, tape.constant_ref(at)).value().item();
  };
  double worst = 0.0;
  for (std::size_t i : detail::sample_coordinates(x.size(), max_coords, seed)) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = eval(x);
    x[i] = orig - eps;
    const double fm = eval(x);
    x[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

/// Same check over a set of parameter tensors that `loss` registers on the
/// tape itself. Parameters are perturbed in place and restored.
inline double grad_check_params(std::span<Tensor* const> params, const std::function<Var(Tape&)>& loss,
                                double eps = 1e-5, std::size_t max_coords = 20, std::uint64_t seed = 0) {
  Gradients grads;
  {
    Tape tape;
    grads = tape.backward(loss(tape));
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->size(); ++i) coords.emplace_back(p, i);
  }
  auto eval = [&] {
    Tape tape(false);
    return loss(tape).value().item();
  };
  double worst = 0.0;
  for (std::size_t c : detail::sample_coordinates(coords.size(), max_coords, seed)) {
    auto [p, i] = coords[c];
    Tensor& t = *params[p];
    const double analytic = grads.at(t)[i];
    const double orig = t[i];
    t[i] = orig + eps;
    const double fp = eval();
    t[i] = orig - eps;
    const double fm = eval();
    t[i] = orig;
    worst = std::max(worst, relative_error(analytic, (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

}  // namespace incubator

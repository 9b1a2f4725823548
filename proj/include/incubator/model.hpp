// SPDX-License-Identifier: Apache-2.0
//
// Target/meta model family: pre-norm residual MLP blocks divided along depth
// into K modules. Module 1 owns the input stem and module K owns the
// classification head, in both the target and the meta model.
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "incubator/autodiff.hpp"
#include "incubator/error.hpp"
#include "incubator/rng.hpp"
#include "incubator/tensor.hpp"

namespace incubator {

struct ModelSpec {
  std::size_t n = 32;          // residual blocks in the target model
  std::size_t d = 16;          // hidden width
  std::size_t r = 2;           // MLP expansion ratio
  std::size_t K = 4;           // module count
  std::size_t input_dim = 16;
  std::size_t classes = 3;

  void validate() const {
    if (K < 1) throw DivisionError("module count K must be at least 1");
    if (K > n) {
      throw DivisionError("cannot divide " + std::to_string(n) + " blocks into " + std::to_string(K) + " modules");
    }
    if (d < 1 || r < 1 || input_dim < 1) throw ConfigError("width, expansion ratio and input_dim must be positive");
    if (classes < 2) throw ConfigError("at least two classes are required");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "n=" << n << " d=" << d << " r=" << r << " K=" << K << " input_dim=" << input_dim
       << " classes=" << classes;
    return os.str();
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Blocks per module: floor(n/K) each, with the remainder going one extra
/// block apiece to the deepest modules.
inline std::vector<std::size_t> module_depths(std::size_t n, std::size_t K) {
  if (K < 1 || K > n) {
    throw DivisionError("cannot divide " + std::to_string(n) + " blocks into " + std::to_string(K) + " modules");
  }
  std::vector<std::size_t> depths(K, n / K);
  const std::size_t extra = n % K;
  for (std::size_t i = K - extra; i < K; ++i) ++depths[i];
  return depths;
}

enum class Role { Target, Meta };

inline const char* role_name(Role r) { return r == Role::Target ? "target" : "meta"; }

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

/// Final norm followed by the classifier.
struct Head {
  Tensor ln_gain, ln_bias;  // [d]
  Tensor weight;            // [d, classes]
  Tensor bias;              // [classes]
};

struct ResidualBlock {
  Tensor ln_gain, ln_bias;  // [d]
  Tensor w1;                // [d, r*d]
  Tensor b1;                // [r*d]
  Tensor w2;                // [r*d, d]
  Tensor b2;                // [d]
};

constexpr double kInitStd = 0.02;

namespace detail {

inline Tensor normal_tensor(Shape shape, std::uint64_t key, double stddev) {
  Tensor t(std::move(shape));
  CounterRng rng(key);
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

enum InitTag : std::uint64_t { kStemTag = 101, kHeadTag = 102, kBlockTag = 103 };

inline Linear init_linear(std::size_t in, std::size_t out, std::uint64_t key) {
  return Linear{normal_tensor({in, out}, key, kInitStd), Tensor({out})};
}

inline Head init_head(std::size_t d, std::size_t classes, std::uint64_t key) {
  return Head{Tensor({d}, 1.0), Tensor({d}), normal_tensor({d, classes}, key, kInitStd), Tensor({classes})};
}

inline ResidualBlock init_block(std::size_t d, std::size_t r, std::uint64_t key) {
  return ResidualBlock{Tensor({d}, 1.0), Tensor({d}), normal_tensor({d, r * d}, derive_seed(key, 1), kInitStd),
                       Tensor({r * d}), normal_tensor({r * d, d}, derive_seed(key, 2), kInitStd), Tensor({d})};
}

}  // namespace detail

/// One depth slice of a target or meta model (houses M_i or the meta M_i).
class ModelModule {
 public:
  std::size_t index = 1;  // 1-based slot
  std::size_t count = 1;  // K
  Role role = Role::Target;
  std::size_t width = 0;
  std::optional<Linear> stem;
  std::optional<Head> head;
  std::vector<ResidualBlock> blocks;
  bool frozen = false;

  std::size_t depth() const { return blocks.size(); }
  std::size_t in_width() const { return stem ? stem->weight.shape()[0] : width; }
  std::size_t out_width() const { return head ? head->weight.shape()[1] : width; }

  template <typename F>
  void for_each_param(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for_each_param([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  /// Structural description: role, slot, and every parameter name and shape.
  std::string signature() const {
    std::ostringstream os;
    os << role_name(role) << " module " << index << "/" << count << " width " << width << ";";
    for_each_param([&](const std::string& name, const Tensor& t) { os << name << shape_str(t.shape()) << ";"; });
    return os.str();
  }

  Var forward(Tape& tape, Var x) const {
    auto bind = [&](const Tensor& t) { return frozen ? tape.constant_ref(t) : tape.parameter(t); };
    if (x.value().rank() != 2 || x.value().cols() != in_width()) {
      throw DimensionError("module " + std::to_string(index) + " expects width " + std::to_string(in_width()) +
                           ", got " + shape_str(x.value().shape()));
    }
    if (stem) x = linear(x, bind(stem->weight), bind(stem->bias));
    for (const ResidualBlock& b : blocks) {
      Var h = layer_norm(x, bind(b.ln_gain), bind(b.ln_bias));
      h = relu(linear(h, bind(b.w1), bind(b.b1)));
      h = linear(h, bind(b.w2), bind(b.b2));
      x = add(x, h);
    }
    if (head) {
      x = layer_norm(x, bind(head->ln_gain), bind(head->ln_bias));
      x = linear(x, bind(head->weight), bind(head->bias));
    }
    return x;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    if (self.stem) {
      f(std::string("stem.weight"), self.stem->weight);
      f(std::string("stem.bias"), self.stem->bias);
    }
    for (std::size_t j = 0; j < self.blocks.size(); ++j) {
      auto& b = self.blocks[j];
      const std::string p = "block" + std::to_string(j) + ".";
      f(p + "ln_gain", b.ln_gain);
      f(p + "ln_bias", b.ln_bias);
      f(p + "w1", b.w1);
      f(p + "b1", b.b1);
      f(p + "w2", b.w2);
      f(p + "b2", b.b2);
    }
    if (self.head) {
      f(std::string("head.ln_gain"), self.head->ln_gain);
      f(std::string("head.ln_bias"), self.head->ln_bias);
      f(std::string("head.weight"), self.head->weight);
      f(std::string("head.bias"), self.head->bias);
    }
  }
};

/// Copies every parameter of `src` into `dst`; shapes must line up.
inline void copy_parameters(const ModelModule& src, ModelModule& dst) {
  std::vector<const Tensor*> from;
  src.for_each_param([&](const std::string&, const Tensor& t) { from.push_back(&t); });
  std::size_t k = 0;
  dst.for_each_param([&](const std::string& name, Tensor& t) {
    if (k >= from.size() || from[k]->shape() != t.shape()) {
      throw StitchError("cannot copy parameters: layout differs at " + name);
    }
    t = *from[k++];
  });
  if (k != from.size()) throw StitchError("cannot copy parameters: parameter counts differ");
}

namespace detail {

inline std::vector<ModelModule> build_modules(const ModelSpec& spec, const std::vector<std::size_t>& depths, Role role,
                                              std::uint64_t seed) {
  const std::uint64_t base = derive_seed(seed, role == Role::Target ? 0x7461726765ULL : 0x6d657461ULL);
  std::vector<ModelModule> modules;
  std::size_t global_block = 0;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    ModelModule m;
    m.index = i + 1;
    m.count = depths.size();
    m.role = role;
    m.width = spec.d;
    if (i == 0) m.stem = init_linear(spec.input_dim, spec.d, derive_seed(base, kStemTag));
    for (std::size_t j = 0; j < depths[i]; ++j, ++global_block) {
      m.blocks.push_back(init_block(spec.d, spec.r, derive_seed(base, kBlockTag, global_block)));
    }
    if (i + 1 == depths.size()) m.head = init_head(spec.d, spec.classes, derive_seed(base, kHeadTag));
    modules.push_back(std::move(m));
  }
  return modules;
}

}  // namespace detail

/// Target model divided into spec.K modules. Block initialization depends
/// only on (seed, global block position), so the same seed yields the same
/// parameters for every K.
inline std::vector<ModelModule> build_target(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  return detail::build_modules(spec, module_depths(spec.n, spec.K), Role::Target, seed);
}

/// Meta model with `depth_per_module` blocks in each of spec.K modules.
/// `width` defaults to the target width; any other value cannot be stitched.
inline std::vector<ModelModule> build_meta(const ModelSpec& spec, std::size_t depth_per_module, std::uint64_t seed,
                                           std::optional<std::size_t> width = std::nullopt) {
  spec.validate();
  if (width && *width != spec.d) {
    throw StitchError("meta width " + std::to_string(*width) + " differs from target width " + std::to_string(spec.d));
  }
  if (depth_per_module < 1) throw ConfigError("meta depth per module must be at least 1");
  return detail::build_modules(spec, std::vector<std::size_t>(spec.K, depth_per_module), Role::Meta, seed);
}

/// Sequential composition of modules 1..K (module 1 applied first).
class Model {
 public:
  Model() = default;
  explicit Model(std::vector<ModelModule> modules) : modules_(std::move(modules)) {}

  std::vector<ModelModule>& modules() { return modules_; }
  const std::vector<ModelModule>& modules() const { return modules_; }
  std::size_t size() const { return modules_.size(); }
  ModelModule& module(std::size_t index) { return modules_.at(index - 1); }
  const ModelModule& module(std::size_t index) const { return modules_.at(index - 1); }

  std::size_t input_dim() const { return modules_.front().in_width(); }
  std::size_t classes() const { return modules_.back().out_width(); }
  std::size_t body_depth() const {
    std::size_t n = 0;
    for (const auto& m : modules_) n += m.depth();
    return n;
  }

  Var forward(Tape& tape, Var x) const {
    if (x.value().rank() != 2 || x.value().cols() != input_dim()) {
      throw DimensionError("model expects feature width " + std::to_string(input_dim()) + ", got " +
                           shape_str(x.value().shape()));
    }
    for (const ModelModule& m : modules_) x = m.forward(tape, x);
    return x;
  }

  Var forward(Tape& tape, const Tensor& features) const { return forward(tape, tape.constant_ref(features)); }

  /// Logits without recording gradients.
  Tensor logits(const Tensor& features) const {
    Tape tape(false);
    return forward(tape, features).value();
  }

  /// Parameters of every non-frozen module, in module order.
  std::vector<Tensor*> trainable_parameters() {
    std::vector<Tensor*> out;
    for (auto& m : modules_) {
      if (m.frozen) continue;
      for (Tensor* t : m.parameters()) out.push_back(t);
    }
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& m : modules_) {
      if (!m.frozen) n += m.parameter_count();
    }
    return n;
  }

  template <typename F>
  void for_each_param(F&& f) const {
    for (const auto& m : modules_) {
      const std::string prefix = "m" + std::to_string(m.index) + ".";
      m.for_each_param([&](const std::string& name, const Tensor& t) { f(prefix + name, t); });
    }
  }
  template <typename F>
  void for_each_param(F&& f) {
    for (auto& m : modules_) {
      const std::string prefix = "m" + std::to_string(m.index) + ".";
      m.for_each_param([&](const std::string& name, Tensor& t) { f(prefix + name, t); });
    }
  }

  std::string signature() const {
    std::string s;
    for (const auto& m : modules_) s += m.signature() + "|";
    return s;
  }

  void set_frozen(bool frozen) {
    for (auto& m : modules_) m.frozen = frozen;
  }

 private:
  std::vector<ModelModule> modules_;
};

/// Meta model with slot `slot` replaced by a target module. Every other
/// module is frozen.
class HybridNetwork {
 public:
  HybridNetwork(Model net, std::size_t slot) : net_(std::move(net)), slot_(slot) {}

  std::size_t slot() const { return slot_; }
  ModelModule& trainable() { return net_.module(slot_); }
  const ModelModule& trainable() const { return net_.module(slot_); }
  Model& network() { return net_; }
  const Model& network() const { return net_; }

  Var forward(Tape& tape, const Tensor& features) const { return net_.forward(tape, features); }
  Tensor logits(const Tensor& features) const { return net_.logits(features); }

  /// Makes the meta context trainable too (tunable-meta ablation).
  void unfreeze_context() { net_.set_frozen(false); }

 private:
  Model net_;
  std::size_t slot_;
};

namespace detail {

inline void require_compatible(const ModelModule& a, const ModelModule& b, const char* what) {
  if (a.width != b.width) {
    throw StitchError(std::string(what) + ": width " + std::to_string(a.width) + " vs " + std::to_string(b.width));
  }
}

}  // namespace detail

inline HybridNetwork stitch_hybrid(const std::vector<ModelModule>& meta, ModelModule target_module, std::size_t slot) {
  if (meta.empty()) throw StitchError("stitch_hybrid: empty meta model");
  if (slot < 1 || slot > meta.size()) {
    throw StitchError("stitch_hybrid: slot " + std::to_string(slot) + " outside [1, " + std::to_string(meta.size()) +
                      "]");
  }
  if (target_module.index != slot) {
    throw StitchError("stitch_hybrid: module index " + std::to_string(target_module.index) + " collides with slot " +
                      std::to_string(slot));
  }
  if (target_module.count != meta.size()) {
    throw StitchError("stitch_hybrid: target module belongs to a " + std::to_string(target_module.count) +
                      "-module model, meta has " + std::to_string(meta.size()));
  }
  std::vector<ModelModule> modules;
  modules.reserve(meta.size());
  for (std::size_t j = 0; j < meta.size(); ++j) {
    if (meta[j].index != j + 1) throw StitchError("stitch_hybrid: meta modules out of order");
    detail::require_compatible(meta[j], target_module, "stitch_hybrid");
    if (j + 1 == slot) {
      const ModelModule& replaced = meta[j];
      if (target_module.in_width() != replaced.in_width() || target_module.out_width() != replaced.out_width()) {
        throw StitchError("stitch_hybrid: target module I/O widths do not match meta slot " + std::to_string(slot));
      }
      target_module.frozen = false;
      modules.push_back(std::move(target_module));
    } else {
      ModelModule m = meta[j];
      m.frozen = true;
      modules.push_back(std::move(m));
    }
  }
  return HybridNetwork(Model(std::move(modules)), slot);
}

/// Concatenates independently trained modules; accepts any order.
inline Model assemble(std::vector<ModelModule> modules) {
  const std::size_t K = modules.size();
  if (K == 0) throw AssemblyError("assemble: no modules");
  std::vector<std::optional<ModelModule>> slots(K);
  for (auto& m : modules) {
    if (m.index < 1 || m.index > K) throw AssemblyError("assemble: module index " + std::to_string(m.index) + " out of range");
    if (slots[m.index - 1]) throw AssemblyError("assemble: duplicate module index " + std::to_string(m.index));
    if (m.count != K) throw AssemblyError("assemble: module " + std::to_string(m.index) + " belongs to a different division");
    if (m.width != modules.front().width) throw AssemblyError("assemble: module widths differ");
    slots[m.index - 1] = std::move(m);
  }
  std::vector<ModelModule> ordered;
  for (std::size_t i = 0; i < K; ++i) {
    if (!slots[i]) throw AssemblyError("assemble: missing module index " + std::to_string(i + 1));
    ordered.push_back(std::move(*slots[i]));
    ordered.back().frozen = false;
  }
  if (!ordered.front().stem || !ordered.back().head) throw AssemblyError("assemble: stem or head missing");
  return Model(std::move(ordered));
}

/// Re-splits a model's blocks into K modules using the division rule.
inline std::vector<ModelModule> divide(const Model& model, std::size_t K) {
  std::vector<ResidualBlock> blocks;
  for (const auto& m : model.modules()) blocks.insert(blocks.end(), m.blocks.begin(), m.blocks.end());
  const auto depths = module_depths(blocks.size(), K);
  std::vector<ModelModule> out;
  std::size_t next = 0;
  for (std::size_t i = 0; i < K; ++i) {
    ModelModule m;
    m.index = i + 1;
    m.count = K;
    m.role = model.modules().front().role;
    m.width = model.modules().front().width;
    if (i == 0) m.stem = model.modules().front().stem;
    for (std::size_t j = 0; j < depths[i]; ++j) m.blocks.push_back(blocks[next++]);
    if (i + 1 == K) m.head = model.modules().back().head;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace incubator

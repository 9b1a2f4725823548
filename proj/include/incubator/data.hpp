// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "incubator/error.hpp"
#include "incubator/rng.hpp"
#include "incubator/tensor.hpp"

namespace incubator {

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct Dataset {
  Tensor features;  // [N, input_dim]
  std::vector<int> labels;
  std::size_t classes = 0;
  Split split = Split::Train;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return features.cols(); }

  void validate() const {
    if (labels.empty()) throw EmptyInputError("dataset has no examples");
    if (features.rank() != 2 || features.rows() != labels.size()) {
      throw DimensionError("dataset features " + shape_str(features.shape()) + " do not match " +
                           std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
    if (!features.all_finite()) throw NumericError("dataset contains non-finite features");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  /// Rows `idx` in the given order.
  Dataset select(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw EmptyInputError("selection is empty");
    const std::size_t dim = input_dim();
    std::vector<double> data;
    data.reserve(idx.size() * dim);
    std::vector<int> ys;
    ys.reserve(idx.size());
    for (std::size_t i : idx) {
      auto r = features.row(i);
      data.insert(data.end(), r.begin(), r.end());
      ys.push_back(labels[i]);
    }
    return Dataset{Tensor({idx.size(), dim}, std::move(data)), std::move(ys), classes, split, provenance};
  }
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Synthetic generators

enum class SyntheticKind { Gaussians, Spirals };

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "gaussians") return SyntheticKind::Gaussians;
  if (s == "spirals") return SyntheticKind::Spirals;
  throw ConfigError("unknown synthetic dataset kind '" + std::string(s) + "'");
}

/// Arm revolutions of the spiral generator.
constexpr double kSpiralTurns = 1.25;

namespace detail {

// Two orthonormal directions in R^dim; maps the plane into the feature space.
inline std::vector<double> random_plane(std::size_t dim, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<double> u(dim), v(dim);
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < dim; ++i) s += a[i] * b[i];
    return s;
  };
  const double nu = std::sqrt(dot(u, u));
  for (auto& x : u) x /= nu;
  const double proj = dot(u, v);
  for (std::size_t i = 0; i < dim; ++i) v[i] -= proj * u[i];
  const double nv = std::sqrt(dot(v, v));
  for (auto& x : v) x /= nv;
  u.insert(u.end(), v.begin(), v.end());
  return u;
}

}  // namespace detail

/// Deterministic synthetic classification data with a stratified 80/20
/// train/test split.
///
/// gaussians: class c is centred on (c % 2 ? -1 : +1) * e_{c/2} with
/// isotropic noise of standard deviation `noise`.
/// spirals: interleaved 2-D arms with additive noise, embedded into
/// `input_dim` dimensions by a fixed seeded orthonormal plane.
inline DatasetPair gen_synthetic(SyntheticKind kind, std::size_t classes, std::size_t per_class,
                                 std::size_t input_dim, double noise, std::uint64_t seed,
                                 double spiral_turns = kSpiralTurns) {
  if (per_class < 2) throw ConfigError("per_class must be at least 2");
  if (classes < 2) throw ConfigError("at least two classes are required");
  if (kind == SyntheticKind::Spirals && input_dim < 2) throw ConfigError("spirals need input_dim >= 2");
  if (kind == SyntheticKind::Gaussians && (classes + 1) / 2 > input_dim) {
    throw ConfigError("gaussians need input_dim >= ceil(classes / 2)");
  }
  const std::size_t total = classes * per_class;
  std::vector<double> x(total * input_dim, 0.0);
  std::vector<int> y(total);
  CounterRng rng(derive_seed(seed, 0x73796e74ULL));
  const auto plane = detail::random_plane(input_dim, derive_seed(seed, 0x706c616eULL));
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = c * per_class + i;
      y[row] = static_cast<int>(c);
      double* xr = &x[row * input_dim];
      if (kind == SyntheticKind::Gaussians) {
        for (std::size_t j = 0; j < input_dim; ++j) xr[j] = noise * rng.normal();
        xr[c / 2] += (c % 2 == 0) ? 1.0 : -1.0;
      } else {
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(per_class);
        const double theta = 2.0 * std::numbers::pi * (static_cast<double>(c) / classes + spiral_turns * t);
        const double px = t * std::cos(theta) + noise * rng.normal();
        const double py = t * std::sin(theta) + noise * rng.normal();
        for (std::size_t j = 0; j < input_dim; ++j) xr[j] = px * plane[j] + py * plane[input_dim + j];
      }
    }
  }
  Dataset all{Tensor({total, input_dim}, std::move(x)), std::move(y), classes, Split::Train, ""};

  const std::size_t n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(per_class))), 1, per_class - 1);
  CounterRng split_rng(derive_seed(seed, 0x73706c74ULL));
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx(per_class);
    for (std::size_t i = 0; i < per_class; ++i) idx[i] = c * per_class + i;
    shuffle(idx, split_rng);
    test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  shuffle(train_idx, split_rng);
  shuffle(test_idx, split_rng);

  std::ostringstream prov;
  prov << (kind == SyntheticKind::Gaussians ? "gaussians" : "spirals") << " classes=" << classes
       << " per_class=" << per_class << " input_dim=" << input_dim << " noise=" << noise << " seed=" << seed;
  DatasetPair out{all.select(train_idx), all.select(test_idx)};
  out.train.split = Split::Train;
  out.test.split = Split::Test;
  out.train.provenance = prov.str() + " split=train";
  out.test.provenance = prov.str() + " split=test";
  return out;
}

// ---------------------------------------------------------------------------
// Standardization

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& d) {
    const std::size_t n = d.size(), dim = d.input_dim();
    Standardizer s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dim; ++j) s.mean[j] += d.features.at(i, j);
    }
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double c = d.features.at(i, j) - s.mean[j];
        s.stddev[j] += c * c;
      }
    }
    for (auto& v : s.stddev) {
      v = std::sqrt(v / static_cast<double>(n));
      if (v < 1e-12) v = 1.0;  // constant feature
    }
    return s;
  }

  void apply(Dataset& d) const {
    if (d.input_dim() != mean.size()) throw DimensionError("standardizer width mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t j = 0; j < mean.size(); ++j) {
        d.features.at(i, j) = (d.features.at(i, j) - mean[j]) / stddev[j];
      }
    }
  }
};

/// Fits on `train` and applies to both splits.
inline void standardize(Dataset& train, Dataset& test) {
  const auto s = Standardizer::fit(train);
  s.apply(train);
  s.apply(test);
}

// ---------------------------------------------------------------------------
// CSV

struct CsvOptions {
  bool has_header = false;
  /// 0 means "infer as max label + 1".
  std::size_t classes = 0;
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    cells.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.remove_prefix(1);
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t' || c.back() == '\r')) c.remove_suffix(1);
  }
  return cells;
}

inline double parse_double(std::string_view s, std::size_t line_no) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError("line " + std::to_string(line_no) + ": non-numeric cell '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

/// Parses CSV text. `label_column` is a 0-based index, or a header name
/// when options.has_header is set.
inline Dataset parse_csv(std::istream& in, const std::string& label_column, const CsvOptions& options = {},
                         const std::string& provenance = "csv") {
  std::string line;
  std::size_t line_no = 0;
  std::size_t ncols = 0;
  std::size_t label_idx = 0;
  bool label_resolved = false;

  auto resolve_index = [&](std::size_t columns) {
    std::size_t idx = 0;
    auto [ptr, ec] = std::from_chars(label_column.data(), label_column.data() + label_column.size(), idx);
    if (label_column.empty() || ec != std::errc() || ptr != label_column.data() + label_column.size()) {
      throw ParseError("label column '" + label_column + "' not found");
    }
    if (idx >= columns) {
      throw ParseError("line " + std::to_string(line_no) + ": label column " + label_column + " missing (only " +
                       std::to_string(columns) + " columns)");
    }
    return idx;
  };

  if (options.has_header) {
    if (!std::getline(in, line)) throw ParseError("line 1: missing header row");
    ++line_no;
    const auto names = detail::split_commas(line);
    ncols = names.size();
    auto it = std::find(names.begin(), names.end(), std::string_view(label_column));
    label_idx = it != names.end() ? static_cast<std::size_t>(it - names.begin()) : resolve_index(ncols);
    label_resolved = true;
  }

  std::vector<double> features;
  std::vector<int> labels;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_commas(line);
    if (ncols == 0) ncols = cells.size();
    if (!label_resolved) {
      label_idx = resolve_index(ncols);
      label_resolved = true;
    }
    if (cells.size() != ncols) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(ncols) + " cells, got " +
                       std::to_string(cells.size()));
    }
    if (ncols < 2) throw ParseError("line " + std::to_string(line_no) + ": need at least one feature column");
    for (std::size_t j = 0; j < ncols; ++j) {
      const double v = detail::parse_double(cells[j], line_no);
      if (j == label_idx) {
        if (v != std::floor(v) || v < 0 || (options.classes && v >= static_cast<double>(options.classes))) {
          throw ParseError("line " + std::to_string(line_no) + ": label '" + std::string(cells[j]) + "' out of range");
        }
        labels.push_back(static_cast<int>(v));
        max_label = std::max(max_label, labels.back());
      } else {
        features.push_back(v);
      }
    }
  }
  if (labels.empty()) throw ParseError("no data rows");
  Dataset d{Tensor({labels.size(), ncols - 1}, std::move(features)), std::move(labels),
            options.classes ? options.classes : static_cast<std::size_t>(max_label + 1), Split::Train, provenance};
  if (d.classes < 2) d.classes = 2;
  return d;
}

inline Dataset load_csv(const std::string& path, const std::string& label_column, const CsvOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_csv(in, label_column, options, "csv:" + path);
}

/// Writes features followed by the label as the last column.
inline void write_csv(std::ostream& out, const Dataset& d, bool header = false) {
  const std::size_t dim = d.input_dim();
  if (header) {
    for (std::size_t j = 0; j < dim; ++j) out << "x" << j << ",";
    out << "label\n";
  }
  out << std::setprecision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) out << d.features.at(i, j) << ",";
    out << d.labels[i] << "\n";
  }
}

inline void save_csv(const std::string& path, const Dataset& d, bool header = false) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_csv(out, d, header);
}

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& what) {
  if (off + 4 > b.size()) throw FormatError(what + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// IDX image/label pair from raw bytes. Pixels are scaled to [0, 1].
inline Dataset parse_idx(const std::vector<unsigned char>& images, const std::vector<unsigned char>& labels,
                         std::size_t classes = 10) {
  if (detail::read_be32(images, 0, "images") != kIdxImageMagic) throw FormatError("images: bad magic");
  if (detail::read_be32(labels, 0, "labels") != kIdxLabelMagic) throw FormatError("labels: bad magic");
  const std::size_t n = detail::read_be32(images, 4, "images");
  const std::size_t rows = detail::read_be32(images, 8, "images");
  const std::size_t cols = detail::read_be32(images, 12, "images");
  const std::size_t nl = detail::read_be32(labels, 4, "labels");
  if (n != nl) throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("images: empty dimensions");
  const std::size_t dim = rows * cols;
  if (images.size() < 16 + n * dim) throw FormatError("images: truncated pixel data");
  if (labels.size() < 8 + n) throw FormatError("labels: truncated label data");
  std::vector<double> px(n * dim);
  for (std::size_t i = 0; i < n * dim; ++i) px[i] = static_cast<double>(images[16 + i]) / 255.0;
  std::vector<int> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = labels[8 + i];
    if (static_cast<std::size_t>(ys[i]) >= classes) {
      throw FormatError("labels: value " + std::to_string(ys[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  return Dataset{Tensor({n, dim}, std::move(px)), std::move(ys), classes, Split::Train, "idx"};
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 10) {
  Dataset d = parse_idx(detail::read_file(images_path), detail::read_file(labels_path), classes);
  d.provenance = "idx:" + images_path;
  return d;
}

// ---------------------------------------------------------------------------
// Subsetting and batching

/// Class-balanced seeded subset keeping round(fraction * count) per class,
/// in original order.
inline Dataset subsample(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw SubsampleError("fraction must be in (0, 1]");
  std::vector<std::vector<std::size_t>> by_class(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < d.classes; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    if (k < 1) throw SubsampleError("fraction " + std::to_string(fraction) + " leaves class " + std::to_string(c) + " empty");
    CounterRng rng(derive_seed(seed, c));
    shuffle(idx, rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(keep.begin(), keep.end());
  Dataset out = d.select(keep);
  out.provenance = d.provenance + " fraction=" + std::to_string(fraction);
  return out;
}

struct Batch {
  Tensor features;
  std::vector<int> labels;
};

/// Permutation of [0, n) keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  CounterRng rng(derive_seed(seed, 0x65706f6368ULL, epoch));
  shuffle(idx, rng);
  return idx;
}

/// One epoch of mini-batches; the final partial batch is kept.
inline std::vector<Batch> batches(const Dataset& d, std::size_t batch_size, std::uint64_t epoch, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  const auto perm = epoch_permutation(d.size(), seed, epoch);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < perm.size(); start += batch_size) {
    const std::size_t end = std::min(perm.size(), start + batch_size);
    Dataset part = d.select(std::span<const std::size_t>(perm).subspan(start, end - start));
    out.push_back(Batch{std::move(part.features), std::move(part.labels)});
  }
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

}  // namespace incubator

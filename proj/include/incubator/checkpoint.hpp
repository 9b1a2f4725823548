// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   "DINC"  u32 version(=1)  u64 spec_hash  u32 len, phase bytes  u64 seed
//   u32 record_count
//   per record: u32 len, name bytes  u32 rank  u64 extent[rank]  f64 data[]
//
// spec_hash is the FNV-1a hash of the owning model's structural signature,
// so a checkpoint only loads into a model of identical layout and role.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "incubator/error.hpp"
#include "incubator/model.hpp"
#include "incubator/rng.hpp"
#include "incubator/tensor.hpp"

namespace incubator {

constexpr char kCheckpointMagic[4] = {'D', 'I', 'N', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::uint64_t spec_hash = 0;
  std::string phase;
  std::uint64_t seed = 0;
  std::vector<NamedArray> arrays;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto v = bytes_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptCheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.spec_hash);
  w.str(ckpt.phase);
  w.u64(ckpt.seed);
  w.u32(static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.value.rank()));
    for (std::size_t e : a.value.shape()) w.u64(e);
    for (double v : a.value.data()) w.f64(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != std::string_view(kCheckpointMagic, 4)) {
    throw CorruptCheckpointError("not a checkpoint: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.spec_hash = r.u64();
  ckpt.phase = r.str();
  ckpt.seed = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    a.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw CorruptCheckpointError("array '" + a.name + "' has invalid rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.u64();
      if (e == 0 || e > (std::size_t{1} << 32)) throw CorruptCheckpointError("array '" + a.name + "' has invalid extent");
      n *= e;
    }
    if (n * 8 > r.remaining()) throw CorruptCheckpointError("checkpoint truncated inside '" + a.name + "'");
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    a.value = Tensor(std::move(shape), std::move(data));
    ckpt.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw CorruptCheckpointError("trailing bytes after checkpoint records");
  return ckpt;
}

inline std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a temporary file and renames, so readers never see a partial file.
inline void write_bytes_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + ": " + ec.message());
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_bytes_atomic(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_bytes(path)); }

/// FNV-1a of a file's bytes, as 16 hex digits.
inline std::string file_digest(const std::string& path) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_string(read_bytes(path));
  return os.str();
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline std::uint64_t spec_hash(const ModelModule& m) { return hash_string(m.signature()); }
inline std::uint64_t spec_hash(const Model& m) { return hash_string(m.signature()); }

inline Checkpoint to_checkpoint(const Model& model, std::string phase, std::uint64_t seed) {
  Checkpoint c{spec_hash(model), std::move(phase), seed, {}};
  model.for_each_param([&](const std::string& name, const Tensor& t) { c.arrays.push_back({name, t}); });
  return c;
}

inline Checkpoint to_checkpoint(const ModelModule& module, std::string phase, std::uint64_t seed) {
  Checkpoint c{spec_hash(module), std::move(phase), seed, {}};
  const std::string prefix = "m" + std::to_string(module.index) + ".";
  module.for_each_param([&](const std::string& name, const Tensor& t) { c.arrays.push_back({prefix + name, t}); });
  return c;
}

namespace detail {

template <typename M>
void restore_arrays(M& target, const Checkpoint& ckpt, std::uint64_t expected_hash) {
  if (ckpt.spec_hash != expected_hash) {
    throw SpecHashError("checkpoint spec hash does not match the model it is loaded into (phase '" + ckpt.phase + "')");
  }
  std::size_t k = 0;
  auto assign = [&](const std::string& name, Tensor& t) {
    if (k >= ckpt.arrays.size() || ckpt.arrays[k].name != name || ckpt.arrays[k].value.shape() != t.shape()) {
      throw SpecHashError("checkpoint layout differs at parameter " + name);
    }
    t = ckpt.arrays[k++].value;
  };
  if constexpr (std::is_same_v<M, Model>) {
    target.for_each_param(assign);
  } else {
    const std::string prefix = "m" + std::to_string(target.index) + ".";
    target.for_each_param([&](const std::string& name, Tensor& t) { assign(prefix + name, t); });
  }
  if (k != ckpt.arrays.size()) throw SpecHashError("checkpoint has extra parameters");
}

}  // namespace detail

/// Overwrites the parameters of `skeleton` with the checkpoint's arrays.
inline void restore(Model& skeleton, const Checkpoint& ckpt) { detail::restore_arrays(skeleton, ckpt, spec_hash(skeleton)); }
inline void restore(ModelModule& skeleton, const Checkpoint& ckpt) {
  detail::restore_arrays(skeleton, ckpt, spec_hash(skeleton));
}

}  // namespace incubator

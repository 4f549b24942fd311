#pragma once

// Binary checkpoint layout (all integers little-endian):
//   "PCAMCKPT"  u32 version  u64 epoch  f64 tau
//   u64 config_len  config text (RunConfig::to_text)
//   u64 n_params, then per parameter:
//     u32 name_len  name  u32 rank  u64 dims[rank]  f32 values[prod(dims)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pcam/config.hpp"
#include "pcam/error.hpp"
#include "pcam/model.hpp"

namespace pcam {

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  static constexpr char kMagic[8] = {'P', 'C', 'A', 'M', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  RunConfig config;
  std::uint64_t epoch = 0;
  double tau = 0.0;
  std::vector<NamedTensor> parameters;

  static Checkpoint capture(const Model& model, const RunConfig& cfg, std::uint64_t epoch, double tau);

  /// Copies every stored tensor into the model's parameters (by name).
  void apply_to(Model& model) const;

  /// A fresh model built from the stored configuration with stored weights.
  std::unique_ptr<Model> make_model() const;

  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Replaces every parameter value by its nearest 32-bit float, the precision
/// a checkpoint keeps.
inline void round_to_float32(ParameterStore& store) {
  for (auto& p : store.all()) {
    for (auto& x : p.tensor.mutable_values()) x = static_cast<double>(static_cast<float>(x));
  }
}

namespace ckpt_detail {

template <class T>
void put(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  static_assert(sizeof(T) == sizeof(U));
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }

  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > b_.size() - pos_) throw CheckpointError("checkpoint is truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline Checkpoint Checkpoint::capture(const Model& model, const RunConfig& cfg, std::uint64_t epoch, double tau) {
  Checkpoint c;
  c.config = cfg;
  c.epoch = epoch;
  c.tau = tau;
  for (const auto& p : model.parameters().all()) {
    NamedTensor t{p.name, p.tensor.shape(), {}};
    t.values.reserve(p.tensor.numel());
    for (double x : p.tensor.values()) t.values.push_back(static_cast<float>(x));
    c.parameters.push_back(std::move(t));
  }
  return c;
}

inline void Checkpoint::apply_to(Model& model) const {
  std::set<std::string> seen;
  for (const auto& t : parameters) {
    Parameter* p = model.parameters().find(t.name);
    if (!p) throw CheckpointError("unknown parameter '" + t.name + "'");
    if (!seen.insert(t.name).second) throw CheckpointError("parameter '" + t.name + "' stored twice");
    if (p->tensor.shape() != t.shape) throw CheckpointError("shape mismatch for parameter '" + t.name + "'");
    auto& dst = p->tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(t.values[i]);
  }
  for (const auto& p : model.parameters().all()) {
    if (!seen.count(p.name)) throw CheckpointError("missing parameter '" + p.name + "'");
  }
}

inline std::unique_ptr<Model> Checkpoint::make_model() const {
  auto m = std::make_unique<Model>(config.model, config.training.seed);
  apply_to(*m);
  return m;
}

inline std::string Checkpoint::to_bytes() const {
  using ckpt_detail::put;
  std::string out(kMagic, kMagic + 8);
  put(out, kVersion);
  put(out, epoch);
  put(out, tau);
  const std::string text = config.to_text();
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  put(out, static_cast<std::uint64_t>(parameters.size()));
  for (const auto& t : parameters) {
    put(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put(out, static_cast<std::uint64_t>(d));
    for (float v : t.values) put(out, v);
  }
  return out;
}

inline Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  ckpt_detail::Reader r(bytes);
  if (r.bytes(8) != std::string(kMagic, kMagic + 8)) throw CheckpointError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " does not match reader version " +
                          std::to_string(kVersion));
  }
  Checkpoint c;
  c.epoch = r.get<std::uint64_t>();
  c.tau = r.get<double>();
  const auto text_len = r.get<std::uint64_t>();
  try {
    c.config = RunConfig::parse(r.bytes(text_len));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("stored configuration is invalid: ") + e.what());
  }
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>();
      if (dim != 0 && count > (bytes.size() / 4) / dim) throw CheckpointError("checkpoint is truncated");
      count *= dim;
      t.shape.push_back(static_cast<std::size_t>(dim));
    }
    if (count > bytes.size() / 4) throw CheckpointError("checkpoint is truncated");
    t.values.reserve(count);
    for (std::uint64_t k = 0; k < count; ++k) t.values.push_back(r.get<float>());
    c.parameters.push_back(std::move(t));
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

inline void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string b = to_bytes();
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_bytes(ss.str());
}

}  // namespace pcam

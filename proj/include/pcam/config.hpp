#pragma once

// Run configuration: plain-text "key = value" lines with dotted section
// prefixes ("model.k = 32"). '#' starts a comment. Later assignments win,
// so command-line overrides are applied after the file.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "pcam/cloud_io.hpp"
#include "pcam/error.hpp"
#include "pcam/geometry.hpp"
#include "pcam/losses.hpp"
#include "pcam/metrics.hpp"
#include "pcam/model.hpp"
#include "pcam/optim.hpp"
#include "pcam/synth.hpp"

namespace pcam {

struct TrainingConfig {
  std::size_t epochs = 10;
  std::vector<std::size_t> lr_decay_epochs{6, 8};
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 0;
  double kappa = 0.05;
  LossFlags losses;
};

struct DataConfig {
  SynthConfig synth;
  std::size_t train_pairs = 200;
  std::size_t val_pairs = 50;
  std::size_t test_pairs = 50;
};

struct EvalConfig {
  double te_max = 0.3;
  double re_max = deg2rad(15.0);
  bool icp = false;
  IcpOptions icp_options{50, 1e-10, 0.05};
  std::vector<double> tau_grid = default_tau_grid();
  std::size_t workers = 1;

  static std::vector<double> default_tau_grid() {
    std::vector<double> g;
    for (int i = 0; i < 20; ++i) g.push_back(0.05 * i);
    return g;
  }
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  TrainingConfig training;
  DataConfig data;
  EvalConfig eval;

  void validate() const;
  void set(const std::string& key, const std::string& value);
  /// Canonical text form: every key, fixed order, full precision.
  std::string to_text() const;

  static RunConfig defaults() { return {}; }
  static RunConfig parse(const std::string& text, RunConfig base = {});
  static RunConfig load(const std::string& path, RunConfig base = {});
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!detail::parse_double(trim(v), out)) throw ConfigError(key + ": '" + v + "' is not a finite number");
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  std::uint64_t out = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError(key + ": '" + v + "' is not a nonnegative integer");
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T, class F>
std::vector<T> to_list(const std::string& v, F f) {
  std::vector<T> out;
  for (const auto& s : split_list(v)) out.push_back(f(s));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>) {
      s += detail::format_double(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& raw_key, const std::string& value) {
  using namespace config_detail;
  const std::string key = trim(raw_key);
  auto d = [&] { return to_double(key, value); };
  auto u = [&] { return static_cast<std::size_t>(to_u64(key, value)); };
  auto b = [&] { return to_bool(key, value); };
  const std::map<std::string, std::function<void()>> setters{
      {"model.channels", [&] { model.matching.channels = to_list<std::size_t>(value, [&](const std::string& s) { return static_cast<std::size_t>(to_u64(key, s)); }); }},
      {"model.k", [&] { model.matching.k = u(); }},
      {"model.temperature", [&] { model.matching.temperature = d(); }},
      {"model.combine", [&] { model.matching.combine = parse_combine_mode(trim(value)); }},
      {"model.map", [&] { model.matching.map = parse_map_mode(trim(value)); }},
      {"confidence.blocks", [&] { model.confidence.blocks = u(); }},
      {"confidence.width", [&] { model.confidence.width = u(); }},
      {"confidence.k", [&] { model.confidence.k = u(); }},
      {"optim.lr", [&] { optimizer.learning_rate = d(); }},
      {"optim.weight_decay", [&] { optimizer.weight_decay = d(); }},
      {"optim.beta1", [&] { optimizer.beta1 = d(); }},
      {"optim.beta2", [&] { optimizer.beta2 = d(); }},
      {"optim.epsilon", [&] { optimizer.epsilon = d(); }},
      {"train.epochs", [&] { training.epochs = u(); }},
      {"train.lr_decay_epochs", [&] { training.lr_decay_epochs = to_list<std::size_t>(value, [&](const std::string& s) { return static_cast<std::size_t>(to_u64(key, s)); }); }},
      {"train.lr_decay_factor", [&] { training.lr_decay_factor = d(); }},
      {"train.seed", [&] { training.seed = to_u64(key, value); }},
      {"train.kappa", [&] { training.kappa = d(); }},
      {"train.losses", [&] { training.losses = LossFlags::parse(trim(value)); }},
      {"data.scene_points", [&] { data.synth.n_points = u(); }},
      {"data.view_points", [&] { data.synth.view_points = u(); }},
      {"data.overlap", [&] { data.synth.overlap_target = d(); }},
      {"data.rotation_max_deg", [&] { data.synth.rotation_max = deg2rad(d()); }},
      {"data.translation_max", [&] { data.synth.translation_max = d(); }},
      {"data.noise_sigma", [&] { data.synth.noise_sigma = d(); }},
      {"data.shape", [&] { data.synth.shape = parse_shape_kind(trim(value)); }},
      {"data.seed", [&] { data.synth.seed = to_u64(key, value); }},
      {"data.train_pairs", [&] { data.train_pairs = u(); }},
      {"data.val_pairs", [&] { data.val_pairs = u(); }},
      {"data.test_pairs", [&] { data.test_pairs = u(); }},
      {"eval.te_max", [&] { eval.te_max = d(); }},
      {"eval.re_max_deg", [&] { eval.re_max = deg2rad(d()); }},
      {"eval.icp", [&] { eval.icp = b(); }},
      {"eval.icp_max_iters", [&] { eval.icp_options.max_iters = u(); }},
      {"eval.icp_max_pair_dist", [&] { eval.icp_options.max_pair_dist = d(); }},
      {"eval.tau_grid", [&] { eval.tau_grid = to_list<double>(value, [&](const std::string& s) { return to_double(key, s); }); }},
      {"eval.workers", [&] { eval.workers = u(); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second();
}

inline std::string RunConfig::to_text() const {
  using config_detail::join;
  using detail::format_double;
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("model.channels", join(model.matching.channels));
  kv("model.k", std::to_string(model.matching.k));
  kv("model.temperature", format_double(model.matching.temperature));
  kv("model.combine", to_string(model.matching.combine));
  kv("model.map", to_string(model.matching.map));
  kv("confidence.blocks", std::to_string(model.confidence.blocks));
  kv("confidence.width", std::to_string(model.confidence.width));
  kv("confidence.k", std::to_string(model.confidence.k));
  kv("optim.lr", format_double(optimizer.learning_rate));
  kv("optim.weight_decay", format_double(optimizer.weight_decay));
  kv("optim.beta1", format_double(optimizer.beta1));
  kv("optim.beta2", format_double(optimizer.beta2));
  kv("optim.epsilon", format_double(optimizer.epsilon));
  kv("train.epochs", std::to_string(training.epochs));
  kv("train.lr_decay_epochs", join(training.lr_decay_epochs));
  kv("train.lr_decay_factor", format_double(training.lr_decay_factor));
  kv("train.seed", std::to_string(training.seed));
  kv("train.kappa", format_double(training.kappa));
  kv("train.losses", training.losses.to_string());
  kv("data.scene_points", std::to_string(data.synth.n_points));
  kv("data.view_points", std::to_string(data.synth.view_points));
  kv("data.overlap", format_double(data.synth.overlap_target));
  kv("data.rotation_max_deg", format_double(rad2deg(data.synth.rotation_max)));
  kv("data.translation_max", format_double(data.synth.translation_max));
  kv("data.noise_sigma", format_double(data.synth.noise_sigma));
  kv("data.shape", to_string(data.synth.shape));
  kv("data.seed", std::to_string(data.synth.seed));
  kv("data.train_pairs", std::to_string(data.train_pairs));
  kv("data.val_pairs", std::to_string(data.val_pairs));
  kv("data.test_pairs", std::to_string(data.test_pairs));
  kv("eval.te_max", format_double(eval.te_max));
  kv("eval.re_max_deg", format_double(rad2deg(eval.re_max)));
  kv("eval.icp", eval.icp ? "true" : "false");
  kv("eval.icp_max_iters", std::to_string(eval.icp_options.max_iters));
  kv("eval.icp_max_pair_dist", format_double(eval.icp_options.max_pair_dist));
  kv("eval.tau_grid", join(eval.tau_grid));
  kv("eval.workers", std::to_string(eval.workers));
  return os.str();
}

inline void RunConfig::validate() const {
  model.matching.validate();
  model.confidence.validate();
  optimizer.validate();
  training.losses.validate();
  data.synth.validate();
  if (training.epochs == 0) throw ConfigError("train.epochs must be positive");
  for (std::size_t i = 1; i < training.lr_decay_epochs.size(); ++i) {
    if (training.lr_decay_epochs[i] <= training.lr_decay_epochs[i - 1]) {
      throw ConfigError("train.lr_decay_epochs must be strictly increasing");
    }
  }
  if (!(training.lr_decay_factor > 0.0)) throw ConfigError("train.lr_decay_factor must be positive");
  if (!(training.kappa > 0.0)) throw ConfigError("train.kappa must be positive");
  if (training.losses.ga && model.matching.map == MapMode::sparse) {
    throw ConfigError("the geometric attention loss needs soft maps");
  }
  if (!(eval.te_max > 0.0) || !(eval.re_max > 0.0)) throw ConfigError("recall thresholds must be positive");
  if (eval.tau_grid.empty()) throw ConfigError("eval.tau_grid is empty");
  for (double t : eval.tau_grid) {
    if (!(t >= 0.0 && t < 1.0)) throw ConfigError("tau values must lie in [0, 1)");
  }
  if (eval.workers == 0) throw ConfigError("eval.workers must be positive");
  if (data.synth.view_points && data.synth.view_points < std::max(model.matching.k, model.confidence.k)) {
    throw ConfigError("data.view_points is smaller than the neighborhood size");
  }
}

inline RunConfig RunConfig::parse(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    try {
      base.set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig RunConfig::load(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), std::move(base));
}

}  // namespace pcam

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pcam/autodiff.hpp"
#include "pcam/error.hpp"
#include "pcam/rng.hpp"

namespace pcam {

/// A trainable tensor with its AdamW state.
struct Parameter {
  std::string name;
  ad::Tensor tensor;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step = 0;
};

/// Named parameters in registration order. Names are unique.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  ad::Tensor add(const std::string& name, ad::Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    const auto n = values.size();
    Parameter p{name, ad::Tensor::variable(std::move(shape), std::move(values)), std::vector<double>(n, 0.0),
                std::vector<double>(n, 0.0), 0};
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back().tensor;
  }

  ad::Tensor add_uniform(const std::string& name, ad::Shape shape, double bound, Rng& rng) {
    std::vector<double> v(ad::numel_of(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return add(name, std::move(shape), std::move(v));
  }

  /// He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in).
  ad::Tensor add_he_uniform(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    return add_uniform(name, {fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
  }

  ad::Tensor add_constant(const std::string& name, ad::Shape shape, double value) {
    const auto n = ad::numel_of(shape);
    return add(name, std::move(shape), std::vector<double>(n, value));
  }

  std::vector<Parameter>& all() noexcept { return params_; }
  const std::vector<Parameter>& all() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("optimizer: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be > 0");
  }
};

/// One AdamW update with decoupled weight decay:
///   p <- p - lr*wd*p, then the bias-corrected Adam step.
/// Parameters that received no gradient are treated as having a zero one.
inline void adamw_step(std::vector<Parameter>& params, const OptimizerConfig& cfg) {
  for (auto& p : params) {
    ++p.step;
    const auto g = p.tensor.grad();
    auto& x = p.tensor.mutable_values();
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] -= cfg.learning_rate * cfg.weight_decay * x[i];
      p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g[i];
      p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = p.first_moment[i] / bc1;
      const double vhat = p.second_moment[i] / bc2;
      x[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

}  // namespace pcam

#pragma once

#include <string>
#include <vector>

#include "pcam/autodiff.hpp"
#include "pcam/error.hpp"
#include "pcam/geometry.hpp"
#include "pcam/layers.hpp"
#include "pcam/optim.hpp"

namespace pcam {

struct ConfidenceConfig {
  std::size_t blocks = 9;
  std::size_t width = 64;
  std::size_t k = 32;

  void validate() const {
    if (blocks == 0 || width == 0 || k == 0) throw ConfigError("confidence net: blocks, width and k must be positive");
  }
};

/// Rows (p_i, m(p_i)) as an n x 6 tensor. Differentiable in `mapped`.
inline ad::Tensor pair_features(const PointCloud& source, const ad::Tensor& mapped) {
  if (mapped.rank() != 2 || mapped.dim(1) != 3 || mapped.dim(0) != source.size()) {
    throw ShapeError("pair_features: need one mapped point per source point");
  }
  return ad::concat_cols(CloudContext::coords_tensor(source), mapped);
}

/// Logits are clamped to +-30 before the sigmoid, so scores stay strictly
/// inside (0, 1) in double precision.
inline constexpr double kLogitBound = 30.0;

/// Scores each matched pair; neighborhoods come from the source cloud.
class ConfidenceNet {
 public:
  ConfidenceNet(const ConfidenceConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t in = 6;
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      blocks_.emplace_back(store, "conf.block" + std::to_string(b), in, cfg_.width, rng);
      in = cfg_.width;
    }
    head_ = PointConv(store, "conf.head", cfg_.width, cfg_.width, 1, rng, /*zero_output=*/true);
  }

  const ConfidenceConfig& config() const { return cfg_; }

  /// n x 1 logits, before the sigmoid.
  ad::Tensor logits(const ad::Tensor& pairs, const CloudContext& source_ctx) const {
    if (pairs.rank() != 2 || pairs.dim(1) != 6) throw ShapeError("confidence net expects n x 6 pair features");
    if (pairs.dim(0) != source_ctx.size()) throw ShapeError("pair count differs from the source cloud size");
    ad::Tensor x = pairs;
    for (const auto& b : blocks_) x = b.forward(x, source_ctx);
    return ad::clamp(head_.forward(x, source_ctx), -kLogitBound, kLogitBound);
  }

  /// Scores in (0, 1), shape n.
  ad::Tensor forward(const ad::Tensor& pairs, const CloudContext& source_ctx) const {
    const ad::Tensor l = logits(pairs, source_ctx);
    return ad::sigmoid(ad::reshape(l, {l.dim(0)}));
  }

  ad::Tensor forward(const PointCloud& source, const ad::Tensor& mapped) const {
    if (source.size() < cfg_.k) throw ShapeError("too few points for the confidence neighborhood");
    return forward(pair_features(source, mapped), CloudContext::build(source, cfg_.k));
  }

 private:
  ConfidenceConfig cfg_;
  std::vector<ResidualBlock> blocks_;
  PointConv head_;
};

/// phi: keeps w_i when w_i >= tau, zero otherwise.
inline std::vector<double> hard_threshold(std::span<const double> w, double tau) {
  std::vector<double> out(w.begin(), w.end());
  for (auto& x : out) {
    if (x < tau) x = 0.0;
  }
  return out;
}

}  // namespace pcam

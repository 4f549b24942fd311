#pragma once

#include <cstdint>
#include <optional>

#include "pcam/confidence.hpp"
#include "pcam/geometry.hpp"
#include "pcam/layers.hpp"
#include "pcam/losses.hpp"
#include "pcam/matching.hpp"
#include "pcam/optim.hpp"
#include "pcam/rng.hpp"

namespace pcam {

struct ModelConfig {
  MatchingModelConfig matching;
  ConfidenceConfig confidence;
};

/// Outputs of both networks on one pair.
struct PairForward {
  MatchResult match;
  ConfidenceScoresPair scores;
};

/// Matching net g and confidence net h over one parameter store.
/// Parameters are initialized from `seed`.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), init_rng_(mix_seed(seed)), matching_(cfg.matching, store_, init_rng_),
        confidence_(cfg.confidence, store_, init_rng_) {}

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const MatchingNet& matching() const { return matching_; }
  const ConfidenceNet& confidence() const { return confidence_; }

  std::size_t min_points() const { return std::max(cfg_.matching.k, cfg_.confidence.k); }

  PairForward forward(const PointCloud& p, const PointCloud& q) const {
    const auto ctx_p = CloudContext::build(p, cfg_.matching.k);
    const auto ctx_q = CloudContext::build(q, cfg_.matching.k);
    PairForward out;
    out.match = matching_.forward(p, q, ctx_p, ctx_q);
    const bool shared = cfg_.confidence.k == cfg_.matching.k;
    const auto conf_p = shared ? ctx_p : CloudContext::build(p, cfg_.confidence.k);
    const auto conf_q = shared ? ctx_q : CloudContext::build(q, cfg_.confidence.k);
    out.scores.w_p = confidence_.forward(pair_features(p, out.match.mapped_pq), conf_p);
    out.scores.w_q = confidence_.forward(pair_features(q, out.match.mapped_qp), conf_q);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  Rng init_rng_;
  MatchingNet matching_;
  ConfidenceNet confidence_;
};

}  // namespace pcam

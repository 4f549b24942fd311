#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pcam/autodiff.hpp"
#include "pcam/error.hpp"
#include "pcam/geometry.hpp"
#include "pcam/layers.hpp"
#include "pcam/optim.hpp"
#include "pcam/rng.hpp"

namespace pcam {

/// How the per-layer attention matrices become the global one.
///  - product: entrywise product over all layers.
///  - last_layer: deepest layer only; earlier layers still exchange features.
///  - no_intermediate: a single attention at the deepest layer, no exchange
///    in earlier layers.
enum class CombineMode { product, last_layer, no_intermediate };
enum class MapMode { soft, sparse };

inline std::string to_string(CombineMode m) {
  switch (m) {
    case CombineMode::product: return "product";
    case CombineMode::last_layer: return "last_layer";
    case CombineMode::no_intermediate: return "no_intermediate";
  }
  return "?";
}

inline std::string to_string(MapMode m) { return m == MapMode::soft ? "soft" : "sparse"; }

inline CombineMode parse_combine_mode(const std::string& s) {
  if (s == "product") return CombineMode::product;
  if (s == "last_layer") return CombineMode::last_layer;
  if (s == "no_intermediate") return CombineMode::no_intermediate;
  throw ConfigError("unknown combine mode '" + s + "'");
}

inline MapMode parse_map_mode(const std::string& s) {
  if (s == "soft") return MapMode::soft;
  if (s == "sparse") return MapMode::sparse;
  throw ConfigError("unknown map mode '" + s + "'");
}

struct MatchingModelConfig {
  /// c(0..L); c(0) = 3 for xyz input.
  std::vector<std::size_t> channels{3, 32, 32};
  std::size_t k = 32;
  double temperature = 0.03;
  CombineMode combine = CombineMode::product;
  MapMode map = MapMode::soft;

  std::size_t layers() const { return channels.size() - 1; }

  void validate() const {
    if (channels.size() < 2) throw ConfigError("matching net needs at least one layer");
    if (channels[0] != 3) throw ConfigError("c(0) must be 3 (xyz input)");
    for (std::size_t l = 1; l < channels.size(); ++l) {
      if (channels[l] < 2 || channels[l] % 2 != 0) throw ConfigError("layer channel counts must be even and >= 2");
    }
    if (k == 0) throw ConfigError("neighborhood size must be positive");
    if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  }

  /// The paper-scale six-layer schedule.
  static std::vector<std::size_t> six_layer_channels() { return {3, 32, 32, 64, 64, 128, 128}; }
};

// ---------------------------------------------------------------------------
// Attention algebra

/// a_ij = <e_P,i, e_Q,j> / (|e_P,i| |e_Q,j|)
inline ad::Tensor cosine_similarity_matrix(const ad::Tensor& e_p, const ad::Tensor& e_q) {
  if (e_p.rank() != 2 || e_q.rank() != 2 || e_p.dim(1) != e_q.dim(1)) {
    throw ShapeError("cosine_similarity_matrix: feature dimensions differ");
  }
  return ad::matmul(ad::l2_normalize_rows(e_p), ad::transpose(ad::l2_normalize_rows(e_q)));
}

struct CrossAttention {
  ad::Tensor pq;  // row-stochastic: transfers Q -> P
  ad::Tensor qp;  // column-stochastic: transfers P -> Q
};

inline CrossAttention cross_attention(const ad::Tensor& similarity, double temperature) {
  return {ad::softmax_rows(similarity, temperature), ad::softmax_cols(similarity, temperature)};
}

/// E_P = [e_P, A_PQ e_Q], E_Q = [e_Q, A_QP^T e_P].
inline std::pair<ad::Tensor, ad::Tensor> exchange_features(const ad::Tensor& e_p, const ad::Tensor& e_q,
                                                           const ad::Tensor& a_pq, const ad::Tensor& a_qp) {
  if (a_pq.dim(0) != e_p.dim(0) || a_pq.dim(1) != e_q.dim(0) || a_qp.shape() != a_pq.shape()) {
    throw ShapeError("exchange_features: attention shape does not match the feature counts");
  }
  return {ad::concat_cols(e_p, ad::matmul(a_pq, e_q)), ad::concat_cols(e_q, ad::matmul(ad::transpose(a_qp), e_p))};
}

/// Entrywise product of equally shaped matrices.
inline ad::Tensor attention_product(const std::vector<ad::Tensor>& stack) {
  if (stack.empty()) throw ParameterError("attention_product: empty stack");
  ad::Tensor out = stack.front();
  for (std::size_t l = 1; l < stack.size(); ++l) {
    if (stack[l].shape() != out.shape()) throw ShapeError("attention_product: shapes differ");
    out = ad::mul(out, stack[l]);
  }
  return out;
}

/// Row-renormalized barycenters: m_i = sum_j A_ij q_j / sum_j A_ij.
/// A row with mass below 1e-30 raises NumericError.
inline ad::Tensor soft_map(const ad::Tensor& attention, const PointCloud& target) {
  if (attention.rank() != 2 || attention.dim(1) != target.size()) {
    throw ShapeError("soft_map: attention columns must equal the target size");
  }
  return ad::matmul(ad::normalize_row_sums(attention), CloudContext::coords_tensor(target));
}

/// Per-row argmax, lowest column on ties.
inline std::vector<std::size_t> row_argmax(std::span<const double> values, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 1; j < cols; ++j) {
      if (values[i * cols + j] > values[i * cols + out[i]]) out[i] = j;
    }
  }
  return out;
}

struct SparseMap {
  PointCloud points;
  std::vector<std::size_t> indices;
};

/// m_i = q_{argmax_j A_ij}. Not differentiable; returns plain points.
inline SparseMap sparse_map(const ad::Tensor& attention, const PointCloud& target) {
  if (attention.rank() != 2 || attention.dim(1) != target.size()) {
    throw ShapeError("sparse_map: attention columns must equal the target size");
  }
  auto idx = row_argmax(attention.values(), attention.dim(0), attention.dim(1));
  std::vector<Vec3> pts;
  pts.reserve(idx.size());
  for (auto j : idx) pts.push_back(target[j]);
  return {PointCloud(std::move(pts)), std::move(idx)};
}

inline PointCloud cloud_from_tensor(const ad::Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("expected an n x 3 tensor");
  std::vector<Vec3> pts(t.dim(0));
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = Vec3(t.at(i, 0), t.at(i, 1), t.at(i, 2));
  return PointCloud(std::move(pts));
}

// ---------------------------------------------------------------------------
// Network

/// Three residual blocks producing out_channels per point.
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    blocks_.emplace_back(store, prefix + ".block0", in, out, rng);
    blocks_.emplace_back(store, prefix + ".block1", out, out, rng);
    blocks_.emplace_back(store, prefix + ".block2", out, out, rng);
  }

  ad::Tensor forward(const ad::Tensor& features, const CloudContext& ctx) const {
    ad::Tensor x = features;
    for (const auto& b : blocks_) x = b.forward(x, ctx);
    return x;
  }

  std::size_t out_channels() const { return blocks_.back().out_channels(); }

 private:
  std::vector<ResidualBlock> blocks_;
};

struct AttentionLayer {
  ad::Tensor similarity;
  ad::Tensor pq, qp;
  ad::Tensor log_pq, log_qp;
};

/// Per-layer attention pairs and the global matrices built from them.
/// `log_global_*` hold the entrywise logs computed as sums of
/// log-softmaxes, which stay finite where the product underflows.
struct AttentionStack {
  std::vector<AttentionLayer> layers;
  ad::Tensor global_pq, global_qp;
  ad::Tensor log_global_pq, log_global_qp;

  std::size_t rows() const { return global_pq.dim(0); }
  std::size_t cols() const { return global_pq.dim(1); }
};

struct MatchResult {
  AttentionStack attention;
  MapMode mode = MapMode::soft;
  ad::Tensor mapped_pq;  // N x 3: image of each point of P
  ad::Tensor mapped_qp;  // M x 3: image of each point of Q
  std::vector<std::size_t> sparse_pq, sparse_qp;
};

class MatchingNet {
 public:
  MatchingNet(const MatchingModelConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t in = cfg_.channels[0];
    const auto L = cfg_.layers();
    for (std::size_t l = 1; l <= L; ++l) {
      const std::size_t half = cfg_.channels[l] / 2;
      encoders_.emplace_back(store, "match.layer" + std::to_string(l), in, half, rng);
      in = exchanges_at(l) ? cfg_.channels[l] : half;
    }
  }

  const MatchingModelConfig& config() const { return cfg_; }

  /// Whether layer l (1-based) builds an attention pair.
  bool attends_at(std::size_t l) const {
    return cfg_.combine != CombineMode::no_intermediate || l == cfg_.layers();
  }

  /// Whether layer l's output concatenates the transferred features.
  bool exchanges_at(std::size_t l) const { return attends_at(l) && l < cfg_.layers(); }

  /// Output features of encoder l (1-based) on one cloud.
  ad::Tensor encode(std::size_t l, const ad::Tensor& features, const CloudContext& ctx) const {
    return encoders_.at(l - 1).forward(features, ctx);
  }

  MatchResult forward(const PointCloud& p, const PointCloud& q) const {
    return forward(p, q, CloudContext::build(p, cfg_.k), CloudContext::build(q, cfg_.k));
  }

  MatchResult forward(const PointCloud& p, const PointCloud& q, const CloudContext& ctx_p,
                      const CloudContext& ctx_q) const {
    if (p.size() < cfg_.k || q.size() < cfg_.k) throw ShapeError("clouds smaller than the neighborhood size");
    MatchResult res;
    res.mode = cfg_.map;
    AttentionStack& st = res.attention;
    ad::Tensor fp = centered_coords(p);
    ad::Tensor fq = centered_coords(q);
    const auto L = cfg_.layers();
    for (std::size_t l = 1; l <= L; ++l) {
      const ad::Tensor ep = encode(l, fp, ctx_p);
      const ad::Tensor eq = encode(l, fq, ctx_q);
      if (!attends_at(l)) {
        fp = ep;
        fq = eq;
        continue;
      }
      AttentionLayer layer;
      layer.similarity = cosine_similarity_matrix(ep, eq);
      const auto att = cross_attention(layer.similarity, cfg_.temperature);
      layer.pq = att.pq;
      layer.qp = att.qp;
      layer.log_pq = ad::log_softmax_rows(layer.similarity, cfg_.temperature);
      layer.log_qp = ad::log_softmax_cols(layer.similarity, cfg_.temperature);
      if (exchanges_at(l)) {
        std::tie(fp, fq) = exchange_features(ep, eq, layer.pq, layer.qp);
      }
      st.layers.push_back(std::move(layer));
    }

    if (cfg_.combine == CombineMode::product) {
      std::vector<ad::Tensor> pq, qp;
      for (const auto& layer : st.layers) {
        pq.push_back(layer.pq);
        qp.push_back(layer.qp);
      }
      st.global_pq = attention_product(pq);
      st.global_qp = attention_product(qp);
      st.log_global_pq = st.layers.front().log_pq;
      st.log_global_qp = st.layers.front().log_qp;
      for (std::size_t l = 1; l < st.layers.size(); ++l) {
        st.log_global_pq = ad::add(st.log_global_pq, st.layers[l].log_pq);
        st.log_global_qp = ad::add(st.log_global_qp, st.layers[l].log_qp);
      }
    } else {
      const auto& last = st.layers.back();
      st.global_pq = last.pq;
      st.global_qp = last.qp;
      st.log_global_pq = last.log_pq;
      st.log_global_qp = last.log_qp;
    }

    const auto n = p.size(), m = q.size();
    if (cfg_.map == MapMode::soft) {
      // softmax over rows of log A* is A* with renormalized rows.
      const ad::Tensor w_pq = ad::softmax_rows(st.log_global_pq, 1.0);
      const ad::Tensor w_qp = ad::softmax_cols(st.log_global_qp, 1.0);
      res.mapped_pq = ad::matmul(w_pq, ctx_q.coords);
      res.mapped_qp = ad::matmul(ad::transpose(w_qp), ctx_p.coords);
    } else {
      res.sparse_pq = row_argmax(st.log_global_pq.values(), n, m);
      const ad::Tensor log_qp_t = ad::transpose(st.log_global_qp.detach());
      res.sparse_qp = row_argmax(log_qp_t.values(), m, n);
      res.mapped_pq = CloudContext::coords_tensor(q.select(res.sparse_pq));
      res.mapped_qp = CloudContext::coords_tensor(p.select(res.sparse_qp));
    }
    return res;
  }

 private:
  MatchingModelConfig cfg_;
  std::vector<Encoder> encoders_;
};

}  // namespace pcam

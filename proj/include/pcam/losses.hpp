#pragma once

#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "pcam/autodiff.hpp"
#include "pcam/error.hpp"
#include "pcam/geometry.hpp"
#include "pcam/layers.hpp"
#include "pcam/matching.hpp"

namespace pcam {

/// Mutual nearest neighbors under the ground-truth motion.
struct CorrespondenceSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (u in P, v in Q), ascending u

  std::set<std::size_t> source_indices() const {
    std::set<std::size_t> s;
    for (auto [u, v] : pairs) s.insert(u);
    return s;
  }
  std::set<std::size_t> target_indices() const {
    std::set<std::size_t> s;
    for (auto [u, v] : pairs) s.insert(v);
    return s;
  }
  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }
};

/// (u, v) is kept iff q_v is the nearest Q point to T(p_u) and T(p_u) is
/// the nearest transformed P point to q_v. Lowest index wins ties.
inline CorrespondenceSet build_correspondences(const PointCloud& p, const PointCloud& q, const RigidTransform& t_gt) {
  if (p.empty() || q.empty()) throw ParameterError("build_correspondences: clouds must be nonempty");
  const PointCloud moved = apply_transform(p, t_gt);
  const IndexMatrix to_q = knn(q, moved, 1);
  const IndexMatrix to_p = knn(moved, q, 1);
  CorrespondenceSet c;
  for (std::size_t u = 0; u < p.size(); ++u) {
    const std::size_t v = to_q(u, 0);
    if (to_p(v, 0) == u) c.pairs.emplace_back(u, v);
  }
  return c;
}

// ---------------------------------------------------------------------------

/// Cross-entropy on the global attention, both directions:
///   -1/N sum_C log A*_PQ[u,v]  -  1/M sum_C log A*_QP[u,v]
/// evaluated through the per-layer log-softmaxes. Zero when C is empty.
inline ad::Tensor loss_ca(const AttentionStack& st, const CorrespondenceSet& c, std::size_t n, std::size_t m) {
  if (st.rows() != n || st.cols() != m) throw ShapeError("loss_ca: attention shape does not match N x M");
  if (c.empty()) return ad::Tensor::scalar(0.0);
  const ad::Tensor pq = ad::sum(ad::pick(st.log_global_pq, c.pairs));
  const ad::Tensor qp = ad::sum(ad::pick(st.log_global_qp, c.pairs));
  return ad::add(ad::scale(pq, -1.0 / static_cast<double>(n)), ad::scale(qp, -1.0 / static_cast<double>(m)));
}

/// The same quantity read off the product matrices, log(max(A*, 1e-30)).
/// Agrees with loss_ca while no entry underflows.
inline ad::Tensor loss_ca_product_form(const AttentionStack& st, const CorrespondenceSet& c, std::size_t n,
                                       std::size_t m) {
  if (st.rows() != n || st.cols() != m) throw ShapeError("loss_ca: attention shape does not match N x M");
  if (c.empty()) return ad::Tensor::scalar(0.0);
  const ad::Tensor pq = ad::sum(ad::log(ad::pick(st.global_pq, c.pairs)));
  const ad::Tensor qp = ad::sum(ad::log(ad::pick(st.global_qp, c.pairs)));
  return ad::add(ad::scale(pq, -1.0 / static_cast<double>(n)), ad::scale(qp, -1.0 / static_cast<double>(m)));
}

/// |T(src_i) - mapped_i| as an n-vector.
inline ad::Tensor mapping_residuals(const PointCloud& source, const ad::Tensor& mapped, const RigidTransform& t) {
  if (mapped.rank() != 2 || mapped.dim(0) != source.size() || mapped.dim(1) != 3) {
    throw ShapeError("mapped points must be |source| x 3");
  }
  const ad::Tensor ideal = CloudContext::coords_tensor(apply_transform(source, t));
  return ad::row_norms(ad::sub(ideal, mapped));
}

/// Labels y_i = [ |T(src_i) - mapped_i| <= kappa ].
inline std::vector<double> accuracy_labels(const PointCloud& source, const ad::Tensor& mapped, const RigidTransform& t,
                                           double kappa) {
  const ad::Tensor r = mapping_residuals(source, mapped.detach(), t);
  std::vector<double> y(r.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = r[i] <= kappa ? 1.0 : 0.0;
  return y;
}

/// Mean binary cross-entropy of scores against labels (log floored at 1e-30).
inline ad::Tensor binary_cross_entropy(const ad::Tensor& w, std::span<const double> labels) {
  if (w.numel() != labels.size()) throw ShapeError("binary_cross_entropy: size mismatch");
  const auto n = labels.size();
  const ad::Tensor y = ad::Tensor::constant({n}, {labels.begin(), labels.end()});
  const ad::Tensor one_minus_y = ad::affine(y, -1.0, 1.0);
  const ad::Tensor pos = ad::mul(y, ad::log(w));
  const ad::Tensor neg = ad::mul(one_minus_y, ad::log(ad::affine(w, -1.0, 1.0)));
  return ad::scale(ad::mean(ad::add(pos, neg)), -1.0);
}

/// One direction of the classification loss on confidence scores.
inline ad::Tensor loss_cc_direction(const ad::Tensor& w, const PointCloud& source, const ad::Tensor& mapped,
                                    const RigidTransform& t, double kappa) {
  if (!(kappa > 0.0)) throw ParameterError("loss_cc: kappa must be positive");
  return binary_cross_entropy(w, accuracy_labels(source, mapped, t, kappa));
}

/// One direction of the geometric loss: sum_i w_i / n * |T(src_i) - mapped_i|.
inline ad::Tensor loss_gc_direction(const ad::Tensor& w, const PointCloud& source, const ad::Tensor& mapped,
                                    const RigidTransform& t) {
  if (w.numel() != source.size()) throw ShapeError("loss_gc: one score per source point required");
  return ad::mean(ad::mul(w, mapping_residuals(source, mapped, t)));
}

struct ConfidenceScoresPair {
  ad::Tensor w_p;  // one per point of P
  ad::Tensor w_q;  // one per point of Q
};

/// PQ direction uses T_gt on P; QP uses its inverse on Q.
inline ad::Tensor loss_cc(const ConfidenceScoresPair& w, const PointCloud& p, const PointCloud& q,
                          const MatchResult& match, const RigidTransform& t_gt, double kappa) {
  return ad::add(loss_cc_direction(w.w_p, p, match.mapped_pq, t_gt, kappa),
                 loss_cc_direction(w.w_q, q, match.mapped_qp, t_gt.inverse(), kappa));
}

inline ad::Tensor loss_gc(const ConfidenceScoresPair& w, const PointCloud& p, const PointCloud& q,
                          const MatchResult& match, const RigidTransform& t_gt) {
  return ad::add(loss_gc_direction(w.w_p, p, match.mapped_pq, t_gt),
                 loss_gc_direction(w.w_q, q, match.mapped_qp, t_gt.inverse()));
}

/// Geometric loss on soft maps over ideal pairs:
///   1/|C_P| sum_{u in C_P} |m_Q(p_u) - q_v|  +  1/|C_Q| sum_{v in C_Q} |m_P(q_v) - p_u|.
/// Zero when C is empty.
inline ad::Tensor loss_ga(const MatchResult& match, const CorrespondenceSet& c, const PointCloud& p,
                          const PointCloud& q) {
  if (match.mode != MapMode::soft) throw ModeError("loss_ga needs soft maps; sparse maps are not differentiable");
  if (c.empty()) return ad::Tensor::scalar(0.0);
  const auto k = c.size();
  IndexMatrix src_rows{k, 1, {}}, dst_rows{k, 1, {}};
  std::vector<double> ideal_q, ideal_p;
  for (auto [u, v] : c.pairs) {
    src_rows.data.push_back(static_cast<std::uint32_t>(u));
    dst_rows.data.push_back(static_cast<std::uint32_t>(v));
    ideal_q.insert(ideal_q.end(), {q[v].x(), q[v].y(), q[v].z()});
    ideal_p.insert(ideal_p.end(), {p[u].x(), p[u].y(), p[u].z()});
  }
  const ad::Tensor m_pq = ad::reshape(ad::gather_rows(match.mapped_pq, src_rows), {k, 3});
  const ad::Tensor m_qp = ad::reshape(ad::gather_rows(match.mapped_qp, dst_rows), {k, 3});
  const ad::Tensor d_pq = ad::row_norms(ad::sub(m_pq, ad::Tensor::constant({k, 3}, std::move(ideal_q))));
  const ad::Tensor d_qp = ad::row_norms(ad::sub(m_qp, ad::Tensor::constant({k, 3}, std::move(ideal_p))));
  // Mutual NN is injective, so |C_P| = |C_Q| = |C|.
  return ad::add(ad::mean(d_pq), ad::mean(d_qp));
}

struct LossFlags {
  bool ca = true;
  bool cc = true;
  bool gc = true;
  bool ga = false;

  void validate() const {
    if (gc && !cc) throw ConfigError("the geometric confidence loss requires the classification loss");
    if (!ca && !cc && !gc && !ga) throw ConfigError("no loss term enabled");
  }

  /// "ca+cc+gc" style.
  std::string to_string() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += "+";
      s += name;
    };
    add(ca, "ca");
    add(ga, "ga");
    add(cc, "cc");
    add(gc, "gc");
    return s;
  }

  static LossFlags parse(const std::string& spec) {
    LossFlags f{false, false, false, false};
    std::size_t start = 0;
    while (start <= spec.size()) {
      const auto end = std::min(spec.find('+', start), spec.size());
      const std::string term = spec.substr(start, end - start);
      if (term == "ca") f.ca = true;
      else if (term == "cc") f.cc = true;
      else if (term == "gc") f.gc = true;
      else if (term == "ga") f.ga = true;
      else throw ConfigError("unknown loss term '" + term + "'");
      start = end + 1;
    }
    f.validate();
    return f;
  }
};

struct LossComponents {
  ad::Tensor ca, cc, gc, ga;  // undefined when not computed
};

struct LossBreakdown {
  double l_ca = 0.0;
  double l_cc = 0.0;
  double l_gc = 0.0;
  double l_ga = 0.0;
  double total = 0.0;
  ad::Tensor total_tensor;
};

/// Sums the enabled components. A disabled term is reported but not added.
inline LossBreakdown total_loss(const LossFlags& flags, const LossComponents& parts) {
  flags.validate();
  LossBreakdown out;
  auto value = [](const ad::Tensor& t) { return t.defined() ? t.item() : 0.0; };
  out.l_ca = value(parts.ca);
  out.l_cc = value(parts.cc);
  out.l_gc = value(parts.gc);
  out.l_ga = value(parts.ga);
  ad::Tensor total = ad::Tensor::scalar(0.0);
  auto add = [&](bool on, const ad::Tensor& t, const char* name) {
    if (!on) return;
    if (!t.defined()) throw ConfigError(std::string("loss term ") + name + " enabled but not computed");
    total = ad::add(total, t);
  };
  add(flags.ca, parts.ca, "ca");
  add(flags.cc, parts.cc, "cc");
  add(flags.gc, parts.gc, "gc");
  add(flags.ga, parts.ga, "ga");
  out.total = total.item();
  out.total_tensor = total;
  return out;
}

}  // namespace pcam

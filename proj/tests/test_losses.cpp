#include <gtest/gtest.h>

#include "support.hpp"

using namespace pcam;
using namespace pcam::testing;
namespace A = pcam::ad;

namespace {

CorrespondenceSet exhaustive_mutual(const PointCloud& p, const PointCloud& q, const RigidTransform& t) {
  CorrespondenceSet c;
  for (std::size_t u = 0; u < p.size(); ++u) {
    const Vec3 x = t(p[u]);
    std::size_t v = 0;
    for (std::size_t j = 1; j < q.size(); ++j) {
      if ((q[j] - x).squaredNorm() < (q[v] - x).squaredNorm()) v = j;
    }
    std::size_t back = 0;
    for (std::size_t i = 1; i < p.size(); ++i) {
      if ((t(p[i]) - q[v]).squaredNorm() < (t(p[back]) - q[v]).squaredNorm()) back = i;
    }
    if (back == u) c.pairs.emplace_back(u, v);
  }
  return c;
}

ModelConfig small_model(MapMode map = MapMode::soft) {
  ModelConfig m;
  m.matching.channels = {3, 8, 8};
  m.matching.k = 4;
  m.matching.map = map;
  m.confidence = {2, 8, 4};
  return m;
}

}  // namespace

TEST(Correspondences, MatchExhaustiveMutualNearestNeighbors) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = grid_cloud(20, rng), q = grid_cloud(18, rng);
    const RigidTransform t(Mat3::Identity(), Vec3(static_cast<double>(rng.index(2)), 0, 0));
    EXPECT_EQ(build_correspondences(p, q, t).pairs, exhaustive_mutual(p, q, t).pairs);
  }
}

TEST(Correspondences, FullOverlapNoiselessIsComplete) {
  Rng rng(2);
  const auto pr = full_overlap_pair(64, rng);
  const auto c = build_correspondences(pr.p, pr.q, pr.t_gt);
  EXPECT_EQ(c.size(), 64u);
  for (auto [u, v] : c.pairs) EXPECT_LT((pr.t_gt(pr.p[u]) - pr.q[v]).norm(), 1e-9);
}

TEST(LossCa, SumOfLogsEqualsLogOfProduct) {
  Rng rng(3);
  const auto pr = full_overlap_pair(16, rng);
  ParameterStore store;
  auto cfg = small_model().matching;
  cfg.temperature = 0.5;
  MatchingNet net(cfg, store, rng);
  const auto res = net.forward(pr.p, pr.q);
  const auto c = build_correspondences(pr.p, pr.q, pr.t_gt);
  EXPECT_NEAR(loss_ca(res.attention, c, 16, 16).item(), loss_ca_product_form(res.attention, c, 16, 16).item(), 1e-9);
}

TEST(LossCa, HandComputedValue) {
  AttentionStack st;
  st.global_pq = A::Tensor::constant({2, 2}, {0.5, 0.5, 0.25, 0.75});
  st.global_qp = A::Tensor::constant({2, 2}, {0.8, 0.4, 0.2, 0.6});
  st.log_global_pq = A::log(st.global_pq);
  st.log_global_qp = A::log(st.global_qp);
  CorrespondenceSet c;
  c.pairs = {{0, 0}, {1, 1}};
  const double expected = -(std::log(0.5) + std::log(0.75)) / 2.0 - (std::log(0.8) + std::log(0.6)) / 2.0;
  EXPECT_NEAR(loss_ca(st, c, 2, 2).item(), expected, 1e-15);
  EXPECT_EQ(loss_ca(st, CorrespondenceSet{}, 2, 2).item(), 0.0);
  EXPECT_THROW(loss_ca(st, c, 3, 2), ShapeError);
}

TEST(LossCc, LabelsAndValue) {
  const PointCloud src({Vec3(0, 0, 0), Vec3(1, 0, 0)});
  const auto mapped = A::Tensor::constant({2, 3}, {0.01, 0, 0, 1.5, 0, 0});
  const auto y = accuracy_labels(src, mapped, RigidTransform::identity(), 0.05);
  EXPECT_EQ(y, (std::vector<double>{1.0, 0.0}));
  const auto w = A::Tensor::constant({2}, {0.9, 0.2});
  const double expected = -(std::log(0.9) + std::log(0.8)) / 2.0;
  EXPECT_NEAR(loss_cc_direction(w, src, mapped, RigidTransform::identity(), 0.05).item(), expected, 1e-15);
  EXPECT_THROW(loss_cc_direction(w, src, mapped, RigidTransform::identity(), 0.0), ParameterError);
}

TEST(LossCc, ReverseDirectionUsesInverseMotion) {
  Rng rng(4);
  const auto pr = full_overlap_pair(16, rng);
  // Perfect maps in both directions give all-one labels.
  const auto m_pq = CloudContext::coords_tensor(apply_transform(pr.p, pr.t_gt));
  const auto m_qp = CloudContext::coords_tensor(apply_transform(pr.q, pr.t_gt.inverse()));
  EXPECT_EQ(accuracy_labels(pr.p, m_pq, pr.t_gt, 1e-6), std::vector<double>(16, 1.0));
  EXPECT_EQ(accuracy_labels(pr.q, m_qp, pr.t_gt.inverse(), 1e-6), std::vector<double>(16, 1.0));
}

TEST(LossGc, WeightedMeanDistance) {
  const PointCloud src({Vec3(0, 0, 0), Vec3(1, 0, 0)});
  const auto mapped = A::Tensor::constant({2, 3}, {0, 0.3, 0, 1, 0, 0.4});
  const auto w = A::Tensor::constant({2}, {0.5, 1.0});
  EXPECT_NEAR(loss_gc_direction(w, src, mapped, RigidTransform::identity()).item(), (0.5 * 0.3 + 0.4) / 2.0, 1e-15);
}

TEST(LossGa, RequiresSoftMaps) {
  Rng rng(5);
  const auto pr = full_overlap_pair(16, rng);
  Model model(small_model(MapMode::sparse), 1);
  const auto f = model.forward(pr.p, pr.q);
  EXPECT_THROW(loss_ga(f.match, build_correspondences(pr.p, pr.q, pr.t_gt), pr.p, pr.q), ModeError);
}

TEST(LossGa, ZeroForPerfectMaps) {
  Rng rng(6);
  const auto pr = full_overlap_pair(8, rng);
  const auto c = build_correspondences(pr.p, pr.q, pr.t_gt);
  MatchResult m;
  m.mode = MapMode::soft;
  std::vector<Vec3> to_q(8), to_p(8);
  for (auto [u, v] : c.pairs) {
    to_q[u] = pr.q[v];
    to_p[v] = pr.p[u];
  }
  m.mapped_pq = CloudContext::coords_tensor(PointCloud(to_q));
  m.mapped_qp = CloudContext::coords_tensor(PointCloud(to_p));
  EXPECT_NEAR(loss_ga(m, c, pr.p, pr.q).item(), 0.0, 1e-15);
}

TEST(LossFlags, ParseValidateAndFormat) {
  EXPECT_EQ(LossFlags::parse("ca+cc+gc").to_string(), "ca+cc+gc");
  EXPECT_EQ(LossFlags::parse("ca+ga").to_string(), "ca+ga");
  EXPECT_THROW(LossFlags::parse("ca+gc"), ConfigError);
  EXPECT_THROW(LossFlags::parse("xx"), ConfigError);
  EXPECT_THROW(LossFlags::parse(""), ConfigError);
}

TEST(TotalLoss, SumsEnabledTerms) {
  LossComponents parts;
  parts.ca = A::Tensor::scalar(1.0);
  parts.cc = A::Tensor::scalar(2.0);
  parts.gc = A::Tensor::scalar(4.0);
  const auto b = total_loss(LossFlags::parse("ca+cc+gc"), parts);
  EXPECT_EQ(b.total, 7.0);
  EXPECT_EQ(total_loss(LossFlags::parse("ca"), parts).total, 1.0);
  EXPECT_EQ(total_loss(LossFlags::parse("ca"), parts).l_gc, 4.0);
  EXPECT_THROW(total_loss(LossFlags::parse("ca+ga"), parts), ConfigError);
}

TEST(SparseMode, ConfidenceLossesLeaveMatchingGradientsZero) {
  Rng rng(7);
  const auto pr = full_overlap_pair(16, rng, 0.01);
  Model model(small_model(MapMode::sparse), 3);
  const auto f = model.forward(pr.p, pr.q);
  const auto loss = A::add(loss_cc(f.scores, pr.p, pr.q, f.match, pr.t_gt, 0.05),
                           loss_gc(f.scores, pr.p, pr.q, f.match, pr.t_gt));
  model.parameters().zero_grad();
  A::backward(loss);
  bool conf_touched = false;
  for (const auto& p : model.parameters().all()) {
    const auto g = p.tensor.grad();
    if (p.name.rfind("match.", 0) == 0) {
      for (double x : g) ASSERT_EQ(x, 0.0) << p.name;
    } else {
      for (double x : g) conf_touched = conf_touched || x != 0.0;
    }
  }
  EXPECT_TRUE(conf_touched);
}

TEST(SoftMode, GeometricLossReachesMatchingNet) {
  Rng rng(8);
  const auto pr = full_overlap_pair(16, rng, 0.01);
  Model model(small_model(MapMode::soft), 3);
  const auto f = model.forward(pr.p, pr.q);
  model.parameters().zero_grad();
  A::backward(loss_gc(f.scores, pr.p, pr.q, f.match, pr.t_gt));
  double norm = 0.0;
  for (const auto& p : model.parameters().all()) {
    if (p.name.rfind("match.", 0) == 0) {
      for (double x : p.tensor.grad()) norm += x * x;
    }
  }
  EXPECT_GT(norm, 0.0);
}

TEST(CompositeLoss, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  const auto pr = full_overlap_pair(16, rng, 0.01);
  Model model(small_model(), 11);
  for (auto& p : model.parameters().all()) {
    if (p.name.rfind("conf.head", 0) == 0) p.tensor.mutable_values() = random_values(p.tensor.numel(), rng, -0.3, 0.3);
    if (p.name.ends_with("b_hidden")) p.tensor.mutable_values() = random_values(p.tensor.numel(), rng, 0.1, 0.5);
  }
  TrainingConfig tc;
  std::vector<A::Tensor> leaves;
  for (auto& p : model.parameters().all()) leaves.push_back(p.tensor);
  Rng probe(10);
  const auto r = grad_check([&] { return pair_losses(model, pr, tc).total_tensor; }, leaves, 1e-6, 2, &probe, true);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

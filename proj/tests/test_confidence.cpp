#include <gtest/gtest.h>

#include "support.hpp"

using namespace pcam;
using namespace pcam::testing;
namespace A = pcam::ad;

namespace {

ConfidenceConfig small() { return {3, 8, 4}; }

}  // namespace

TEST(ConfidenceNet, ZeroInitializedHeadGivesOneHalf) {
  Rng rng(1);
  ParameterStore store;
  ConfidenceNet net(small(), store, rng);
  const auto p = random_cloud(20, rng);
  const auto mapped = CloudContext::coords_tensor(random_cloud(20, rng));
  const auto w = net.forward(p, mapped);
  ASSERT_EQ(w.shape(), (A::Shape{20}));
  for (double v : w.values()) EXPECT_EQ(v, 0.5);
}

TEST(ConfidenceNet, ScoresStayInsideOpenInterval) {
  Rng rng(2);
  ParameterStore store;
  ConfidenceNet net(small(), store, rng);
  for (auto& p : store.all()) {
    if (p.name.rfind("conf.head", 0) == 0) {
      for (auto& x : p.tensor.mutable_values()) x = 1e3;  // drive logits far past the clamp
    }
  }
  const auto p = random_cloud(20, rng);
  const auto w = net.forward(p, CloudContext::coords_tensor(random_cloud(20, rng)));
  for (double v : w.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(ConfidenceNet, PairFeaturesLayout) {
  Rng rng(3);
  const auto p = random_cloud(5, rng);
  const auto m = CloudContext::coords_tensor(random_cloud(5, rng));
  const auto f = pair_features(p, m);
  ASSERT_EQ(f.shape(), (A::Shape{5, 6}));
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      EXPECT_EQ(f.at(i, a), p[i](static_cast<int>(a)));
      EXPECT_EQ(f.at(i, 3 + a), m.at(i, a));
    }
  }
  EXPECT_THROW(pair_features(random_cloud(4, rng), m), ShapeError);
}

TEST(ConfidenceNet, GradientsReachMappedPoints) {
  Rng rng(4);
  ParameterStore store;
  ConfidenceNet net(small(), store, rng);
  for (auto& p : store.all()) {
    if (p.name.rfind("conf.head", 0) == 0) p.tensor.mutable_values() = random_values(p.tensor.numel(), rng, -0.5, 0.5);
  }
  const auto p = random_cloud(12, rng);
  auto mapped = A::Tensor::variable({12, 3}, random_values(36, rng));
  const auto ctx = CloudContext::build(p, 4);
  const auto r = grad_check([&] { return A::sum(net.forward(pair_features(p, mapped), ctx)); }, {mapped});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ConfidenceNet, Validation) {
  EXPECT_THROW((ConfidenceConfig{0, 8, 4}.validate()), ConfigError);
  Rng rng(5);
  ParameterStore store;
  ConfidenceNet net(small(), store, rng);
  EXPECT_THROW(net.forward(random_cloud(3, rng), CloudContext::coords_tensor(random_cloud(3, rng))), ShapeError);
}

TEST(HardThreshold, KeepsAtThreshold) {
  const std::vector<double> w{0.1, 0.5, 0.49999, 0.9};
  EXPECT_EQ(hard_threshold(w, 0.5), (std::vector<double>{0.0, 0.5, 0.0, 0.9}));
  EXPECT_EQ(hard_threshold(w, 0.0), w);
}

TEST(ConfidenceNet, PermutingPairsPermutesScores) {
  Rng rng(6);
  ParameterStore store;
  ConfidenceNet net(small(), store, rng);
  for (auto& p : store.all()) {
    if (p.name.rfind("conf.head", 0) == 0) p.tensor.mutable_values() = random_values(p.tensor.numel(), rng);
  }
  const auto src = random_cloud(20, rng), dst = random_cloud(20, rng);
  std::vector<std::size_t> perm(src.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  const auto w = net.forward(src, CloudContext::coords_tensor(dst));
  const auto wp = net.forward(src.select(perm), CloudContext::coords_tensor(dst.select(perm)));
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_NEAR(wp[i], w[perm[i]], 1e-9);
}

#include <gtest/gtest.h>

#include "support.hpp"

using namespace pcam;
namespace A = pcam::ad;

TEST(AdamW, DefaultsFollowTheTrainingRecipe) {
  const OptimizerConfig c;
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.weight_decay, 1e-3);
}

TEST(AdamW, TwoStepsAgainstHandComputation) {
  ParameterStore store;
  auto x = store.add("x", {2}, {1.0, -2.0});
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;

  // Reference state, written out independently.
  std::vector<double> ref{1.0, -2.0}, m{0, 0}, v{0, 0};
  for (int step = 1; step <= 2; ++step) {
    store.zero_grad();
    A::backward(A::sum(A::mul(x, x)));  // grad = 2x
    const auto g = x.grad();
    adamw_step(store.all(), cfg);
    for (int i = 0; i < 2; ++i) {
      const double gi = 2.0 * ref[i];
      EXPECT_DOUBLE_EQ(g[i], gi);
      ref[i] -= 0.1 * 0.01 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(x[i], ref[i], 1e-15);
    }
  }
}

TEST(AdamW, WeightDecayActsWithoutGradient) {
  ParameterStore store;
  auto x = store.add("x", {1}, {2.0});
  OptimizerConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.weight_decay = 0.1;
  adamw_step(store.all(), cfg);
  EXPECT_DOUBLE_EQ(x[0], 2.0 * (1.0 - 0.05));
}

TEST(AdamW, ConfigValidation) {
  OptimizerConfig c;
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epsilon = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ParameterStore, HeUniformBoundsAndCounts) {
  ParameterStore store;
  Rng rng(1);
  const auto w = store.add_he_uniform("w", 50, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  for (double v : w.values()) EXPECT_LE(std::abs(v), bound);
  store.add_constant("b", {20}, 0.0);
  EXPECT_EQ(store.scalar_count(), 50u * 20u + 20u);
  EXPECT_NE(store.find("b"), nullptr);
  EXPECT_EQ(store.find("missing"), nullptr);
}

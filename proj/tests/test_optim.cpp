#include <cmath>

#include <gtest/gtest.h>

#include "protodrift/error.hpp"
#include "protodrift/optim.hpp"

using namespace protodrift;

TEST(Sgd, SingleStepPastWarmup) {
  ParameterMap p{{"w", Tensor::scalar(1.0)}};
  OptimizerState st{{0.1, 0.9, 0.0, 0, {}}, {}};
  sgd_step(p, {{"w", Tensor::scalar(1.0)}}, st, 5);
  EXPECT_DOUBLE_EQ(st.velocity.at("w").item(), 1.0);
  EXPECT_DOUBLE_EQ(p.at("w").item(), 0.9);
}

TEST(Sgd, ZeroGradientWithoutDecayIsAFixedPoint) {
  ParameterMap p{{"w", Tensor::vector({0.3, -2.0})}};
  const ParameterMap before = p;
  OptimizerState st{{0.1, 0.9, 0.0, 0, {}}, {}};
  for (std::size_t it = 0; it < 5; ++it) sgd_step(p, {{"w", Tensor::zeros({2})}}, st, it);
  EXPECT_EQ(p, before);
}

TEST(Sgd, MomentumAccumulatesAndDecayIsAddedToGradient) {
  ParameterMap p{{"w", Tensor::scalar(2.0)}};
  OptimizerState st{{0.5, 0.5, 0.1, 0, {}}, {}};
  sgd_step(p, {{"w", Tensor::scalar(1.0)}}, st, 0);
  // v = 1 + 0.1*2 = 1.2 ; w = 2 - 0.5*1.2 = 1.4
  EXPECT_DOUBLE_EQ(p.at("w").item(), 1.4);
  sgd_step(p, {{"w", Tensor::scalar(1.0)}}, st, 1);
  // v = 0.5*1.2 + 1 + 0.14 = 1.74 ; w = 1.4 - 0.87 = 0.53
  EXPECT_NEAR(p.at("w").item(), 0.53, 1e-15);
}

TEST(Sgd, WarmupFirstStepUsesOneOverWarmupIters) {
  SgdConfig c{0.02, 0.9, 1e-4, 20, {}};
  EXPECT_DOUBLE_EQ(effective_lr(c, 0), 0.02 / 20.0);
  EXPECT_DOUBLE_EQ(effective_lr(c, 9), 0.02 * 10.0 / 20.0);
  EXPECT_DOUBLE_EQ(effective_lr(c, 19), 0.02);
  EXPECT_DOUBLE_EQ(effective_lr(c, 100), 0.02);
}

TEST(Sgd, MilestonesMultiplyOnceReached) {
  SgdConfig c{1.0, 0.9, 0.0, 0, {{10, 0.1}, {20, 0.5}}};
  EXPECT_DOUBLE_EQ(effective_lr(c, 9), 1.0);
  EXPECT_DOUBLE_EQ(effective_lr(c, 10), 0.1);
  EXPECT_DOUBLE_EQ(effective_lr(c, 25), 0.05);
}

TEST(Sgd, NonFiniteGradientNamesTheParameter) {
  ParameterMap p{{"classifier.w", Tensor::vector({1, 2})}};
  OptimizerState st{{}, {}};
  try {
    sgd_step(p, {{"classifier.w", Tensor::vector({1, NAN})}}, st, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("classifier.w"), std::string::npos);
  }
}

TEST(Sgd, OnlyParametersWithGradientsMove) {
  ParameterMap p{{"a", Tensor::scalar(1.0)}, {"frozen", Tensor::scalar(1.0)}};
  OptimizerState st{{0.1, 0.9, 0.1, 0, {}}, {}};
  sgd_step(p, {{"a", Tensor::scalar(1.0)}}, st, 0);
  EXPECT_EQ(p.at("frozen").item(), 1.0);
  EXPECT_EQ(st.velocity.count("frozen"), 0u);
  EXPECT_EQ(st.velocity.at("a").shape(), p.at("a").shape());
}

TEST(Sgd, ConfigValidation) {
  EXPECT_THROW(validate(SgdConfig{0.0, 0.9, 0.0, 0, {}}), ConfigError);
  EXPECT_THROW(validate(SgdConfig{0.1, 1.0, 0.0, 0, {}}), ConfigError);
  EXPECT_THROW(validate(SgdConfig{0.1, 0.9, -1.0, 0, {}}), ConfigError);
  EXPECT_THROW(validate(SgdConfig{0.1, 0.9, 0.0, 0, {{5, 0.0}}}), ConfigError);
  EXPECT_NO_THROW(validate(SgdConfig{}));
}

// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gdfq/errors.h"
#include "gdfq/optim.h"

namespace gdfq {
namespace {

using Grads = std::vector<std::vector<double>>;

TEST(Adam, FirstStepMovesByLearningRate) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  Adam opt({x}, {.lr = 1e-3});
  opt.step(Grads{{0.5, -2.0, 1e-3}});
  // m_hat / sqrt(v_hat) is sign(g) up to eps
  EXPECT_NEAR(x.data()[0], 1 - 1e-3, 1e-9);
  EXPECT_NEAR(x.data()[1], 2 + 1e-3, 1e-9);
  EXPECT_NEAR(x.data()[2], 3 - 1e-3, 2e-8);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto x = Tensor::from({2}, {1, -1}, true);
  Adam opt({x});
  for (int i = 0; i < 5; ++i) opt.step(Grads{{0.0, 0.0}});
  EXPECT_EQ(x.data()[0], 1.0);
  EXPECT_EQ(x.data()[1], -1.0);
  EXPECT_EQ(opt.steps(), 5);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    auto x = Tensor::from({2}, {0.3, -0.7}, true);
    Adam opt({x}, {.lr = 0.01});
    for (int i = 0; i < 50; ++i) {
      x.zero_grad();
      backward(sum(square(x)));
      opt.step();
    }
    return std::vector<double>(x.data().begin(), x.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeMismatch) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Adam opt({x});
  EXPECT_THROW(opt.step(Grads{{1.0}}), DimensionError);
  EXPECT_THROW(opt.step(Grads{}), DimensionError);
}

TEST(Adam, SecondStepByHand) {
  auto x = Tensor::from({1}, {0.0}, true);
  Adam opt({x}, {.lr = 0.1});
  opt.step(Grads{{1.0}});
  opt.step(Grads{{3.0}});
  const double m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0;
  const double v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double x1 = -0.1 / (1.0 + 1e-8);
  EXPECT_NEAR(x.data()[0], x1 - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-12);
}

TEST(Nesterov, DegeneratesToPlainSgd) {
  auto x = Tensor::from({2}, {1, 2}, true);
  NesterovSgd opt({x}, {.lr = 0.5, .momentum = 0.0, .weight_decay = 0.0});
  opt.step(Grads{{1.0, -4.0}});
  EXPECT_EQ(x.data()[0], 0.5);
  EXPECT_EQ(x.data()[1], 4.0);
}

TEST(Nesterov, MomentumGrowsDisplacement) {
  auto x = Tensor::from({1}, {0.0}, true);
  NesterovSgd opt({x}, {.lr = 0.1, .momentum = 0.9, .weight_decay = 0.0});
  opt.step(Grads{{1.0}});
  const double d1 = -x.data()[0];
  opt.step(Grads{{1.0}});
  const double d2 = -x.data()[0] - d1;
  // v1 = 1, step1 = lr (1 + 0.9); v2 = 1.9, step2 = lr (1 + 0.9 * 1.9)
  EXPECT_NEAR(d1, 0.19, 1e-15);
  EXPECT_NEAR(d2, 0.271, 1e-15);
  EXPECT_GT(d2, d1);
}

TEST(Nesterov, WeightDecayWithZeroGradient) {
  auto x = Tensor::from({1}, {1.0}, true);
  NesterovSgd opt({x}, {.lr = 1.0, .momentum = 0.9, .weight_decay = 1e-4});
  opt.step(Grads{{0.0}});
  // g' = 1e-4, v = 1e-4, x -= 1e-4 (1 + 0.9)
  EXPECT_NEAR(x.data()[0], 1.0 - 1.9e-4, 1e-15);
}

TEST(Nesterov, DefaultsFollowPrescribedValues) {
  NesterovOptions o;
  EXPECT_EQ(o.momentum, 0.9);
  EXPECT_EQ(o.weight_decay, 1e-4);
}

TEST(Nesterov, ShapeMismatch) {
  auto x = Tensor::from({2}, {1, 2}, true);
  NesterovSgd opt({x});
  EXPECT_THROW(opt.step(Grads{{1.0, 2.0, 3.0}}), DimensionError);
}

TEST(Nesterov, UsesGradientBuffers) {
  auto x = Tensor::from({1}, {2.0}, true);
  NesterovSgd opt({x}, {.lr = 0.25, .momentum = 0.0, .weight_decay = 0.0});
  backward(sum(square(x)));
  opt.step();
  EXPECT_EQ(x.data()[0], 1.0);
  EXPECT_EQ(opt.steps(), 1);
}

}  // namespace
}  // namespace gdfq

// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "gdfq/checkpoint.h"
#include "gdfq/errors.h"
#include "gdfq/nn.h"
#include "gdfq/train.h"

namespace gdfq {
namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_batch(std::size_t rows, std::size_t cols, Rng& rng, bool grad = false) {
  std::vector<double> d(rows * cols);
  for (auto& v : d) v = rng.normal();
  return Tensor::from({rows, cols}, std::move(d), grad);
}

TEST(Dense, IdentityAndHandValue) {
  DenseLayer id{Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
  EXPECT_EQ(values(dense_forward(id, Tensor::from({1, 2}, {3, -4}))),
            (std::vector<double>{3, -4}));
  DenseLayer one{Tensor::from({1, 1}, {2}), Tensor::from({1}, {1})};
  EXPECT_EQ(dense_forward(one, Tensor::from({1, 1}, {3})).item(), 7.0);
}

TEST(Dense, WidthMismatch) {
  Rng rng(0);
  auto layer = DenseLayer::init(2, 3, rng);
  EXPECT_THROW(dense_forward(layer, Tensor::zeros({1, 3})), DimensionError);
}

TEST(Dense, InitWithinFanInBound) {
  Rng rng(0);
  auto layer = DenseLayer::init(16, 8, rng);
  for (double w : layer.weight.data()) EXPECT_LE(std::abs(w), 0.25);
  for (double b : layer.bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(BatchNorm, TrainModeNormalizesWithBiasedVariance) {
  auto bn = BatchNormLayer::init(1);
  bn.eps = 0.0;
  auto y = batchnorm_forward(bn, Tensor::from({2, 1}, {1, 3}));
  EXPECT_DOUBLE_EQ(y.data()[0], -1.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 1.0);
}

TEST(BatchNorm, RunningMeanEmaStep) {
  auto bn = BatchNormLayer::init(1);
  batchnorm_forward(bn, Tensor::from({2, 1}, {1, 3}));
  EXPECT_DOUBLE_EQ(bn.running_mean[0], 0.2);
  EXPECT_DOUBLE_EQ(bn.running_var[0], 0.9 * 1.0 + 0.1 * 1.0);
}

TEST(BatchNorm, EmaMatchesClosedForm) {
  Rng rng(3);
  auto bn = BatchNormLayer::init(3);
  bn.momentum = 0.25;
  std::vector<std::vector<double>> means;
  for (int t = 0; t < 20; ++t) {
    auto x = random_batch(8, 3, rng);
    std::vector<double> mu(3, 0.0);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 3; ++c) mu[c] += x.at(r, c) / 8.0;
    means.push_back(mu);
    batchnorm_forward(bn, x);
  }
  // running_T = sum_t m (1-m)^(T-1-t) mu_t   (initial running mean is 0)
  for (std::size_t c = 0; c < 3; ++c) {
    double expect = 0.0;
    for (std::size_t t = 0; t < means.size(); ++t) {
      expect += 0.25 * std::pow(0.75, static_cast<double>(means.size() - 1 - t)) * means[t][c];
    }
    EXPECT_NEAR(bn.running_mean[c], expect, 1e-12);
  }
}

TEST(BatchNorm, FixedModeNeverWrites) {
  Rng rng(1);
  auto bn = BatchNormLayer::init(4);
  bn.running_mean = {0.1, 0.2, 0.3, 0.4};
  bn.running_var = {1.1, 1.2, 1.3, 1.4};
  bn.mode = BnMode::kFixed;
  const auto mean0 = bn.running_mean;
  const auto var0 = bn.running_var;
  batchnorm_forward(bn, random_batch(5, 4, rng));
  batchnorm_forward(bn, random_batch(7, 4, rng));
  EXPECT_EQ(bn.running_mean, mean0);
  EXPECT_EQ(bn.running_var, var0);
}

TEST(BatchNorm, TrainModeNeedsTwoRows) {
  auto bn = BatchNormLayer::init(2);
  EXPECT_THROW(batchnorm_forward(bn, Tensor::zeros({1, 2})), ContractError);
  bn.mode = BnMode::kEval;
  EXPECT_NO_THROW(batchnorm_forward(bn, Tensor::zeros({1, 2})));
}

TEST(CaptureStats, SingleBnLayer) {
  Model m(1, 1);
  m.add_batchnorm(1);
  m.set_bn_mode(BnMode::kEval);
  auto cap = capture_bn_batch_stats(m, Tensor::from({2, 1}, {1, 3}));
  ASSERT_EQ(cap.layers.size(), 1u);
  EXPECT_DOUBLE_EQ(cap.layers[0].mean.item(), 2.0);
  EXPECT_DOUBLE_EQ(cap.layers[0].spread.item(), 1.0);
  auto var = capture_bn_batch_stats(m, Tensor::from({2, 1}, {0, 4}), SpreadKind::kVariance);
  EXPECT_DOUBLE_EQ(var.layers[0].spread.item(), 4.0);
}

TEST(CaptureStats, MatchedStatisticsGiveZeroLoss) {
  Model m(1, 1);
  m.add_batchnorm(1);
  m.set_bn_mode(BnMode::kEval);
  m.layers()[0].batchnorm().running_mean = {2.0};
  m.layers()[0].batchnorm().running_var = {1.0};
  auto cap = capture_bn_batch_stats(m, Tensor::from({2, 1}, {1, 3}));
  EXPECT_NEAR(bns_loss(m, cap.layers).item(), 0.0, 1e-12);
}

TEST(CaptureStats, Errors) {
  Rng rng(0);
  Model no_bn(2, 2);
  no_bn.add_dense(2, 2, rng);
  EXPECT_THROW(capture_bn_batch_stats(no_bn, Tensor::zeros({4, 2})), BnsUnavailableError);
  const std::vector<std::size_t> hidden{4};
  Model m = Model::mlp(2, hidden, 2, rng);
  EXPECT_THROW(capture_bn_batch_stats(m, Tensor::zeros({1, 2})), ContractError);
}

TEST(CaptureStats, GradientReachesInput) {
  Rng rng(2);
  const std::vector<std::size_t> hidden{5, 4};
  Model m = Model::mlp(3, hidden, 2, rng);
  m.set_bn_mode(BnMode::kEval);
  m.set_requires_grad(false);
  auto x = random_batch(6, 3, rng, true);
  std::vector<Tensor> params{x};
  const double err = finite_diff_check(
      [&] { return bns_loss(m, capture_bn_batch_stats(m, x).layers); }, params, 1e-6);
  EXPECT_LE(err, 1e-4);
}

TEST(CrossEntropy, HandValues) {
  const std::vector<int> zero{0};
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 2}, {0.3, 0.3}), zero).item(),
              std::log(2.0), 1e-12);
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 2}, {1, 0}), zero).item(), 0.313262, 1e-6);
  EXPECT_LT(cross_entropy_loss(Tensor::from({1, 2}, {800, 0}), zero).item(), 1e-300);
}

TEST(CrossEntropy, Errors) {
  const std::vector<int> bad{2};
  EXPECT_THROW(cross_entropy_loss(Tensor::from({1, 2}, {1, 0}), bad), IndexError);
  const std::vector<int> two{0, 1};
  EXPECT_THROW(cross_entropy_loss(Tensor::from({1, 2}, {1, 0}), two), DimensionError);
}

TEST(KlDivergence, HandValuesAndStopGradient) {
  const auto p = Tensor::from({1, 2}, {0.2, -0.4});
  EXPECT_NEAR(kl_divergence_loss(p, p).item(), 0.0, 1e-12);

  auto student = Tensor::from({1, 2}, {std::log(3.0), 0.0}, true);  // (0.75, 0.25)
  auto teacher = Tensor::from({1, 2}, {0.0, 0.0}, true);            // (0.5, 0.5)
  auto kl = kl_divergence_loss(student, teacher);
  EXPECT_NEAR(kl.item(), 0.130812, 1e-6);
  backward(kl);
  EXPECT_EQ(teacher.grad()[0], 0.0);
  EXPECT_EQ(teacher.grad()[1], 0.0);
  EXPECT_NE(student.grad()[0], 0.0);
  EXPECT_THROW(kl_divergence_loss(student, Tensor::zeros({1, 3})), DimensionError);
}

TEST(Losses, NonNegativeOnRandomLogits) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    auto a = random_batch(4, 3, rng);
    auto b = random_batch(4, 3, rng);
    const std::vector<int> y{0, 1, 2, 1};
    EXPECT_GE(cross_entropy_loss(a, y).item(), 0.0);
    EXPECT_GE(kl_divergence_loss(a, b).item(), 0.0);
  }
}

TEST(Losses, FiniteDifferences) {
  Rng rng(4);
  auto a = random_batch(5, 3, rng, true);
  auto b = random_batch(5, 3, rng);
  const std::vector<int> y{0, 1, 2, 1, 0};
  std::vector<Tensor> params{a};
  EXPECT_LE(finite_diff_check([&] { return cross_entropy_loss(a, y); }, params, 1e-6), 1e-4);
  EXPECT_LE(finite_diff_check([&] { return kl_divergence_loss(a, b); }, params, 1e-6), 1e-4);
}

TEST(Model, LayersBackwardPassFiniteDifference) {
  Rng rng(6);
  const std::vector<std::size_t> hidden{6, 5};
  Model m = Model::mlp(3, hidden, 4, rng);
  m.set_requires_grad(true);
  auto x = random_batch(7, 3, rng);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2};
  auto params = m.parameters();
  EXPECT_LE(finite_diff_check([&] { return cross_entropy_loss(m.forward(x), y); }, params,
                              1e-6),
            1e-4);
}

TEST(Model, ArgmaxTiesToLowestIndex) {
  auto logits = Tensor::from({3, 3}, {1, 1, 0, 0, 2, 2, 5, 5, 5});
  EXPECT_EQ(argmax_rows(logits), (std::vector<int>{0, 1, 0}));
}

TEST(Model, ValidateCatchesBrokenChain) {
  Rng rng(0);
  Model m(2, 2);
  m.add_dense(2, 3, rng);
  m.add_dense(4, 2, rng);
  EXPECT_THROW(m.validate(), DimensionError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(12);
  const std::vector<std::size_t> hidden{5, 4};
  Model m = Model::mlp(2, hidden, 3, rng);
  for (int i = 0; i < 3; ++i) m.forward(random_batch(8, 2, rng));
  const auto bytes = model_to_bytes(m);
  Model back = model_from_bytes(bytes);
  EXPECT_EQ(model_to_bytes(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "gdfq_test_nn_model.gdfq";
  save_model(m, path);
  Model loaded = load_model(path);
  std::filesystem::remove(path);
  auto x = random_batch(10, 2, rng);
  m.set_bn_mode(BnMode::kEval);
  loaded.set_bn_mode(BnMode::kEval);
  EXPECT_EQ(values(m.forward(x, Phase::kInference)), values(loaded.forward(x, Phase::kInference)));
}

TEST(Checkpoint, QuantizedModelRoundTrip) {
  Rng rng(13);
  const std::vector<std::size_t> hidden{5};
  Model q = quantize_model(Model::mlp(2, hidden, 2, rng), 4, 4);
  ForwardHooks hooks;
  hooks.observe_activation_ranges = true;
  q.forward(random_batch(8, 2, rng), Phase::kInference, &hooks);
  const auto bytes = model_to_bytes(q);
  Model back = model_from_bytes(bytes);
  EXPECT_TRUE(back.quantized());
  EXPECT_EQ(model_to_bytes(back), bytes);
}

TEST(Checkpoint, RejectsTruncatedAndForeignBytes) {
  Rng rng(0);
  const std::vector<std::size_t> hidden{3};
  auto bytes = model_to_bytes(Model::mlp(2, hidden, 2, rng));
  auto cut = bytes;
  cut.resize(cut.size() / 2);
  EXPECT_THROW(model_from_bytes(cut), FileError);
  bytes[0] = 'X';
  EXPECT_THROW(model_from_bytes(bytes), FileError);
  EXPECT_THROW(load_model("/nonexistent/model.gdfq"), FileError);
}

}  // namespace
}  // namespace gdfq

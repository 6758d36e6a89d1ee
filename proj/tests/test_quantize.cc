// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "gdfq/errors.h"
#include "gdfq/quantize.h"
#include "gdfq/rng.h"

namespace gdfq {
namespace {

// Nearest code to scale*x - offset among all codes, ties to the even code.
std::int64_t nearest_code_oracle(double x, const QuantParams& qp) {
  const double t = qp.scale * x - qp.offset;
  std::int64_t best = qp.min_code();
  double best_d = std::abs(t - static_cast<double>(best));
  for (std::int64_t c = qp.min_code() + 1; c <= qp.max_code(); ++c) {
    const double d = std::abs(t - static_cast<double>(c));
    if (d < best_d || (d == best_d && c % 2 == 0)) {
      best = c;
      best_d = d;
    }
  }
  return best;
}

TEST(QuantParams, HandValues) {
  auto qp = compute_quant_params(-1, 1, 2);
  EXPECT_EQ(qp.scale, 1.5);
  EXPECT_EQ(qp.offset, 0.5);
  qp = compute_quant_params(0, 255, 8);
  EXPECT_EQ(qp.scale, 1.0);
  EXPECT_EQ(qp.offset, 128.0);
}

TEST(QuantParams, Errors) {
  EXPECT_THROW(compute_quant_params(1, 1, 4), DegenerateRangeError);
  EXPECT_THROW(compute_quant_params(2, 1, 4), DegenerateRangeError);
  EXPECT_THROW(compute_quant_params(-1, 1, 1), BitwidthError);
}

TEST(Quantize, HandCodes) {
  const auto qp = compute_quant_params(-1, 1, 2);
  const std::vector<double> x{-1, 0, 1};
  EXPECT_EQ(quantize_values(x, qp), (std::vector<std::int64_t>{-2, 0, 1}));
  EXPECT_EQ(quantize_value(2.0, qp), 1);  // 2.5 rounds to 2, clamps to 1
  EXPECT_EQ(quantize_value(qp.lower, qp), qp.min_code());
  EXPECT_THROW(quantize_value(std::numeric_limits<double>::quiet_NaN(), qp), NumericError);
}

TEST(Dequantize, HandValues) {
  const auto qp = compute_quant_params(-1, 1, 2);
  const std::vector<std::int64_t> codes{-2, 0, 1};
  const auto v = dequantize_values(codes, qp);
  EXPECT_DOUBLE_EQ(v[0], -1.0);
  EXPECT_DOUBLE_EQ(v[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(v[2], 1.0);
  EXPECT_THROW(dequantize_value(2, qp), RangeError);
}

TEST(Dequantize, GridPointsRoundTrip) {
  const auto qp = compute_quant_params(-0.7, 2.3, 4);
  for (std::int64_t c = qp.min_code(); c <= qp.max_code(); ++c) {
    EXPECT_EQ(quantize_value(dequantize_value(c, qp), qp), c);
  }
}

TEST(Quantize, MatchesBruteForceOracle) {
  Rng rng(1);
  for (int k = 2; k <= 4; ++k) {
    for (int trial = 0; trial < 2000; ++trial) {
      const double l = rng.uniform(-5, 5);
      const double u = l + rng.uniform(1e-3, 10);
      const auto qp = compute_quant_params(l, u, k);
      const double x = rng.uniform(l - 2, u + 2);
      EXPECT_EQ(quantize_value(x, qp), nearest_code_oracle(x, qp));
      // Exact half-way points exercise the tie rule.
      const double tie = (std::floor(qp.scale * x - qp.offset) + 0.5 + qp.offset) / qp.scale;
      EXPECT_EQ(quantize_value(tie, qp), nearest_code_oracle(tie, qp));
    }
  }
}

TEST(Quantize, CodeRangeMonotoneAndHugeMagnitudes) {
  Rng rng(2);
  const auto qp = compute_quant_params(-1.3, 0.4, 3);
  std::vector<double> xs{-1e308, -1e300, 1e300, 1e308,
                         std::numeric_limits<double>::lowest(),
                         std::numeric_limits<double>::max()};
  for (int i = 0; i < 5000; ++i) xs.push_back(rng.uniform(-3, 3));
  std::sort(xs.begin(), xs.end());
  std::int64_t prev = qp.min_code();
  for (double x : xs) {
    const auto c = quantize_value(x, qp);
    EXPECT_GE(c, qp.min_code());
    EXPECT_LE(c, qp.max_code());
    EXPECT_GE(c, prev);
    prev = c;
  }
}

TEST(FakeQuant, ErrorBoundOnDenseGrid) {
  for (int k : {2, 3, 4, 8}) {
    const double l = -0.9, u = 2.1;
    const auto qp = compute_quant_params(l, u, k);
    const double bound = (u - l) / (2 * (std::ldexp(1.0, k) - 1)) + 1e-12;
    double worst = 0.0;
    for (int i = 0; i <= 100000; ++i) {
      const double x = l + (u - l) * i / 100000.0;
      worst = std::max(worst, std::abs(x - fake_quant_value(x, qp)));
    }
    EXPECT_LE(worst, bound) << "k=" << k;
  }
}

TEST(FakeQuant, IdempotentBitExact) {
  Rng rng(4);
  const auto qp = compute_quant_params(-2, 3, 4);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-4, 5);
    const double once = fake_quant_value(x, qp);
    EXPECT_EQ(fake_quant_value(once, qp), once);
  }
}

TEST(FakeQuant, StraightThroughMask) {
  const auto qp = compute_quant_params(-1, 1, 4);
  auto x = Tensor::from({5}, {-2, -1, 0, 1, 2}, true);
  backward(sum(fake_quant(x, qp)));
  const std::vector<double> g(x.grad().begin(), x.grad().end());
  EXPECT_EQ(g, (std::vector<double>{0, 1, 1, 1, 0}));
}

TEST(ActivationRange, EmaAndInitialization) {
  ActivationRange r;
  r = update_activation_range(r, -2, 3);
  EXPECT_EQ(r.lower, -2);
  EXPECT_EQ(r.upper, 3);

  ActivationRange s;
  s.observe(0, 1);
  s = update_activation_range(s, -2, 3);
  EXPECT_DOUBLE_EQ(s.lower, -0.2);
  EXPECT_DOUBLE_EQ(s.upper, 1.2);
}

TEST(ActivationRange, FreezeStopsUpdates) {
  ActivationRange r;
  r.observe(0, 1);
  r.end_epoch(2);
  EXPECT_FALSE(r.frozen);
  r.end_epoch(2);
  EXPECT_TRUE(r.frozen);
  r.observe(-50, 50);
  EXPECT_EQ(r.lower, 0);
  EXPECT_EQ(r.upper, 1);
  EXPECT_THROW(r.observe(1, 0), ContractError);
}

TEST(Calibrate, MinMax) {
  const std::vector<double> v{-3, 0.5, 2};
  const auto c = calibrate_clip_range(v, CalibrationMethod::kMinMax, 4);
  EXPECT_EQ(c.lower, -3);
  EXPECT_EQ(c.upper, 2);
}

TEST(Calibrate, MseKeepsExactlyRepresentablePair) {
  const std::vector<double> v{-1, 1};
  const auto c = calibrate_clip_range(v, CalibrationMethod::kMse, 2);
  EXPECT_EQ(c.lower, -1);
  EXPECT_EQ(c.upper, 1);
}

TEST(Calibrate, KlClipsOutlier) {
  Rng rng(9);
  std::vector<double> v;
  for (int i = 0; i < 5000; ++i) v.push_back(std::clamp(0.3 * rng.normal(), -1.0, 1.0));
  v.push_back(100.0);
  const auto c = calibrate_clip_range(v, CalibrationMethod::kKl, 4);
  EXPECT_LT(c.upper, 10.0);
  EXPECT_LT(c.lower, c.upper);
}

TEST(Calibrate, AciqClipsHeavyTail) {
  Rng rng(10);
  std::vector<double> v;
  for (int i = 0; i < 5000; ++i) v.push_back(rng.normal());
  v.push_back(40.0);
  const auto c = calibrate_clip_range(v, CalibrationMethod::kAciq, 4);
  EXPECT_LT(c.upper, 10.0);
  EXPECT_LT(c.lower, c.upper);
}

double mean_squared_error(const std::vector<double>& v, const ClipRange& c, int bits) {
  const auto qp = compute_quant_params(c.lower, c.upper, bits);
  double s = 0.0;
  for (double x : v) s += (x - fake_quant_value(x, qp)) * (x - fake_quant_value(x, qp));
  return s / static_cast<double>(v.size());
}

TEST(Calibrate, MseNeverWorseThanMinMax) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v;
    for (int i = 0; i < 500; ++i) v.push_back(rng.normal() * (1 + trial));
    v.push_back(rng.uniform(5, 60));
    for (int k : {2, 4}) {
      const auto mm = calibrate_clip_range(v, CalibrationMethod::kMinMax, k);
      const auto ms = calibrate_clip_range(v, CalibrationMethod::kMse, k);
      EXPECT_LE(mean_squared_error(v, ms, k), mean_squared_error(v, mm, k));
    }
  }
}

TEST(Calibrate, Errors) {
  const std::vector<double> none;
  const std::vector<double> flat{2, 2, 2};
  for (auto m : {CalibrationMethod::kMinMax, CalibrationMethod::kMse,
                 CalibrationMethod::kAciq, CalibrationMethod::kKl}) {
    EXPECT_THROW(calibrate_clip_range(none, m, 4), ContractError);
    EXPECT_THROW(calibrate_clip_range(flat, m, 4), DegenerateRangeError);
  }
  EXPECT_EQ(parse_calibration_method("kl"), CalibrationMethod::kKl);
  EXPECT_THROW(parse_calibration_method("entropy"), ConfigError);
}

}  // namespace
}  // namespace gdfq

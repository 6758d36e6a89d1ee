// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "gdfq/tensor.h"

namespace gdfq {

/// Per-tensor k-bit linear quantizer.
///
/// Codes are round(scale * x - offset) clamped to [-2^(k-1), 2^(k-1) - 1]
/// with scale = (2^k - 1) / (u - l) and offset = l * scale + 2^(k-1), so l
/// maps to the lowest code and u to the highest.
struct QuantParams {
  int bits = 8;
  double lower = 0.0;
  double upper = 0.0;
  double scale = 0.0;
  double offset = 0.0;

  std::int64_t min_code() const { return -(std::int64_t{1} << (bits - 1)); }
  std::int64_t max_code() const { return (std::int64_t{1} << (bits - 1)) - 1; }
  /// Grid spacing in the float domain, 1 / scale.
  double step() const { return 1.0 / scale; }
};

QuantParams compute_quant_params(double lower, double upper, int bits);

/// Round-half-to-even, then clamp to the code range.
std::int64_t quantize_value(double x, const QuantParams& qp);
std::vector<std::int64_t> quantize_values(std::span<const double> x,
                                          const QuantParams& qp);

/// (code + offset) / scale.
double dequantize_value(std::int64_t code, const QuantParams& qp);
std::vector<double> dequantize_values(std::span<const std::int64_t> codes,
                                      const QuantParams& qp);

/// dequantize(quantize(x)) without range checks on the intermediate code.
double fake_quant_value(double x, const QuantParams& qp);

/// Quantize-dequantize in the forward pass. Backward is the straight-through
/// estimator: the incoming gradient passes where lower <= x <= upper and is
/// zero elsewhere.
Tensor fake_quant(const Tensor& x, const QuantParams& qp);

/// Running clip range for one layer's input activations.
struct ActivationRange {
  double lower = 0.0;
  double upper = 0.0;
  double momentum = 0.1;
  bool initialized = false;
  bool frozen = false;
  int epochs_observed = 0;

  /// EMA toward the batch extremes; the first observation is taken as is.
  /// No-op once frozen.
  void observe(double batch_min, double batch_max);
  /// Counts a finished observation epoch and freezes when `freeze_after`
  /// epochs have been seen.
  void end_epoch(int freeze_after);
  void freeze() { frozen = true; }
};

/// Value-semantics form of ActivationRange::observe.
ActivationRange update_activation_range(ActivationRange range, double batch_min,
                                        double batch_max);

enum class CalibrationMethod { kMinMax, kMse, kAciq, kKl };

CalibrationMethod parse_calibration_method(std::string_view name);
std::string_view to_string(CalibrationMethod method);

struct ClipRange {
  double lower = 0.0;
  double upper = 0.0;
};

inline constexpr int kCalibrationBins = 2048;
inline constexpr int kCalibrationSteps = 100;

/// Chooses (l, u) for post-training quantization of `values` at `bits`.
///
///  - minmax: the data extremes.
///  - mse:    grid search over clamped-symmetric and scaled-asymmetric
///            candidates, minimizing the exact mean squared error of
///            fake quantization.
///  - aciq:   Gaussian fit, then numerical minimization of the expected
///            clipping + rounding error under that fit.
///  - kl:     2048-bin histogram, clamped-symmetric candidates, minimizing
///            KL(reference || quantized histogram).
ClipRange calibrate_clip_range(std::span<const double> values,
                               CalibrationMethod method, int bits);

/// Quantization state attached to one dense layer.
struct QuantWrapper {
  int weight_bits = 4;
  int act_bits = 4;
  QuantParams weight;
  ActivationRange activation;
  /// Recompute the weight range from min/max on every forward pass.
  bool refresh_weight_range = true;
  /// Quantize this layer's input. Off for the layer that reads raw data.
  bool quantize_input = true;
};

}  // namespace gdfq

// SPDX-License-Identifier: Apache-2.0
#include "gdfq/quantize.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "gdfq/errors.h"

namespace gdfq {

QuantParams compute_quant_params(double lower, double upper, int bits) {
  if (bits < 2 || bits > 32) {
    throw BitwidthError("bitwidth must be in [2, 32], got " + std::to_string(bits));
  }
  if (!std::isfinite(lower) || !std::isfinite(upper)) {
    throw NumericError("clip bounds must be finite");
  }
  if (!(upper > lower)) {
    throw DegenerateRangeError("clip range requires lower < upper, got [" +
                               std::to_string(lower) + ", " +
                               std::to_string(upper) + "]");
  }
  QuantParams qp;
  qp.bits = bits;
  qp.lower = lower;
  qp.upper = upper;
  const double levels = std::ldexp(1.0, bits) - 1.0;
  qp.scale = levels / (upper - lower);
  qp.offset = lower * qp.scale + std::ldexp(1.0, bits - 1);
  return qp;
}

std::int64_t quantize_value(double x, const QuantParams& qp) {
  if (!std::isfinite(x)) throw NumericError("quantize: non-finite input");
  double t = std::nearbyint(qp.scale * x - qp.offset);
  t = std::clamp(t, static_cast<double>(qp.min_code()),
                 static_cast<double>(qp.max_code()));
  return static_cast<std::int64_t>(t);
}

std::vector<std::int64_t> quantize_values(std::span<const double> x,
                                          const QuantParams& qp) {
  std::vector<std::int64_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], qp);
  return out;
}

double dequantize_value(std::int64_t code, const QuantParams& qp) {
  if (code < qp.min_code() || code > qp.max_code()) {
    throw RangeError("code " + std::to_string(code) + " outside the " +
                     std::to_string(qp.bits) + "-bit range");
  }
  return (static_cast<double>(code) + qp.offset) / qp.scale;
}

std::vector<double> dequantize_values(std::span<const std::int64_t> codes,
                                      const QuantParams& qp) {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = dequantize_value(codes[i], qp);
  return out;
}

double fake_quant_value(double x, const QuantParams& qp) {
  return (static_cast<double>(quantize_value(x, qp)) + qp.offset) / qp.scale;
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fake_quant_value(in[i], qp);
  const double lo = qp.lower, hi = qp.upper;
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x, lo, hi](const BackwardContext& ctx) {
                           auto gx = ctx.parent_grads[0];
                           const auto in = x.data();
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             if (in[i] >= lo && in[i] <= hi) gx[i] += ctx.grad[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Activation ranges

void ActivationRange::observe(double batch_min, double batch_max) {
  if (batch_min > batch_max) {
    throw ContractError("activation range: batch min exceeds batch max");
  }
  if (frozen) return;
  if (!initialized) {
    lower = batch_min;
    upper = batch_max;
    initialized = true;
    return;
  }
  lower = (1.0 - momentum) * lower + momentum * batch_min;
  upper = (1.0 - momentum) * upper + momentum * batch_max;
}

void ActivationRange::end_epoch(int freeze_after) {
  if (frozen) return;
  ++epochs_observed;
  if (epochs_observed >= freeze_after) frozen = true;
}

ActivationRange update_activation_range(ActivationRange range, double batch_min,
                                        double batch_max) {
  range.observe(batch_min, batch_max);
  return range;
}

// ---------------------------------------------------------------------------
// Calibration

CalibrationMethod parse_calibration_method(std::string_view name) {
  if (name == "minmax") return CalibrationMethod::kMinMax;
  if (name == "mse") return CalibrationMethod::kMse;
  if (name == "aciq") return CalibrationMethod::kAciq;
  if (name == "kl") return CalibrationMethod::kKl;
  throw ConfigError("unknown calibration method '" + std::string(name) + "'");
}

std::string_view to_string(CalibrationMethod method) {
  switch (method) {
    case CalibrationMethod::kMinMax: return "minmax";
    case CalibrationMethod::kMse: return "mse";
    case CalibrationMethod::kAciq: return "aciq";
    case CalibrationMethod::kKl: return "kl";
  }
  return "?";
}

namespace {

// Candidates of the form [max(min, -T), min(max, T)] for T on a grid up to
// max|v|, widest first.
std::vector<ClipRange> clamped_symmetric_candidates(double lo, double hi) {
  const double m = std::max(std::abs(lo), std::abs(hi));
  std::vector<ClipRange> out;
  for (int i = kCalibrationSteps; i >= 1; --i) {
    const double t = m * i / kCalibrationSteps;
    ClipRange c{std::max(lo, -t), std::min(hi, t)};
    if (c.upper > c.lower) out.push_back(c);
  }
  return out;
}

// Both ends shrink toward zero for sign-mixed data, toward `lo` otherwise.
std::vector<ClipRange> scaled_candidates(double lo, double hi) {
  std::vector<ClipRange> out;
  for (int i = kCalibrationSteps; i >= 1; --i) {
    const double a = static_cast<double>(i) / kCalibrationSteps;
    ClipRange c = (lo < 0.0 && hi > 0.0) ? ClipRange{lo * a, hi * a}
                                         : ClipRange{lo, lo + (hi - lo) * a};
    if (c.upper > c.lower) out.push_back(c);
  }
  return out;
}

double fake_quant_mse(std::span<const double> values, const ClipRange& c, int bits) {
  const QuantParams qp = compute_quant_params(c.lower, c.upper, bits);
  double s = 0.0;
  for (double v : values) {
    const double d = v - fake_quant_value(v, qp);
    s += d * d;
  }
  return s / static_cast<double>(values.size());
}

ClipRange calibrate_mse(std::span<const double> values, double lo, double hi, int bits) {
  ClipRange best{lo, hi};
  double best_err = std::numeric_limits<double>::infinity();
  auto consider = [&](const std::vector<ClipRange>& cands) {
    for (const auto& c : cands) {
      const double e = fake_quant_mse(values, c, bits);
      if (e < best_err) {
        best_err = e;
        best = c;
      }
    }
  };
  consider(clamped_symmetric_candidates(lo, hi));
  consider(scaled_candidates(lo, hi));
  return best;
}

double normal_pdf(double a) {
  return std::exp(-0.5 * a * a) / std::sqrt(2.0 * std::numbers::pi);
}

// P(Z > a) for standard normal Z.
double normal_tail(double a) { return 0.5 * std::erfc(a / std::numbers::sqrt2); }

// E[(Z - a)^2 ; Z > a] for standard normal Z.
double clipped_tail_mse(double a) {
  return (1.0 + a * a) * normal_tail(a) - a * normal_pdf(a);
}

ClipRange calibrate_aciq(std::span<const double> values, double lo, double hi, int bits) {
  double mu = 0.0;
  for (double v : values) mu += v;
  mu /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mu) * (v - mu);
  var /= static_cast<double>(values.size());
  const double sigma = std::sqrt(var);
  if (!(sigma > 0.0)) throw DegenerateRangeError("aciq: zero-spread values");

  const double levels = std::ldexp(1.0, bits) - 1.0;
  double best_alpha = 1.0;
  double best_err = std::numeric_limits<double>::infinity();
  // Expected error in units of sigma^2 for the clip mu +/- alpha*sigma.
  for (int i = 1; i <= 2000; ++i) {
    const double alpha = 0.005 * i;
    const double step = 2.0 * alpha / levels;
    const double inside = 1.0 - 2.0 * normal_tail(alpha);
    const double err = 2.0 * clipped_tail_mse(alpha) + inside * step * step / 12.0;
    if (err < best_err) {
      best_err = err;
      best_alpha = alpha;
    }
  }
  ClipRange c{std::max(lo, mu - best_alpha * sigma), std::min(hi, mu + best_alpha * sigma)};
  if (!(c.upper > c.lower)) c = {lo, hi};
  return c;
}

ClipRange calibrate_kl(std::span<const double> values, double lo, double hi, int bits) {
  const int nbins = kCalibrationBins;
  const double width = (hi - lo) / nbins;
  std::vector<double> hist(nbins, 0.0);
  // Exact zeros (dead ReLUs) are skipped: they form a spike that the
  // bin-spreading of Q cannot represent, which drags every wide clip's KL up.
  const bool skip_zeros = std::any_of(values.begin(), values.end(),
                                      [](double v) { return v != 0.0; });
  for (double v : values) {
    if (skip_zeros && v == 0.0) continue;
    auto b = static_cast<int>((v - lo) / width);
    hist[std::clamp(b, 0, nbins - 1)] += 1.0;
  }
  const int levels = 1 << bits;

  ClipRange best{lo, hi};
  double best_kl = std::numeric_limits<double>::infinity();
  for (const auto& c : clamped_symmetric_candidates(lo, hi)) {
    const int a = std::clamp(static_cast<int>(std::floor((c.lower - lo) / width)), 0, nbins);
    const int b = std::clamp(static_cast<int>(std::ceil((c.upper - lo) / width)), 0, nbins);
    const int n = b - a;
    if (n < levels) continue;

    // Reference P folds the clipped tails into the edge bins; Q is built from
    // the unfolded slice, so clipping shows up as a mismatch at the edges.
    const std::vector<double> slice(hist.begin() + a, hist.begin() + b);
    std::vector<double> p = slice;
    for (int j = 0; j < a; ++j) p.front() += hist[j];
    for (int j = b; j < nbins; ++j) p.back() += hist[j];

    std::vector<double> q(n, 0.0);
    for (int g = 0; g < levels; ++g) {
      const int start = g * n / levels;
      const int stop = (g + 1) * n / levels;
      double mass = 0.0;
      int nonzero = 0;
      for (int j = start; j < stop; ++j) {
        mass += slice[j];
        if (p[j] > 0.0) ++nonzero;
      }
      if (nonzero == 0) continue;
      for (int j = start; j < stop; ++j) {
        if (p[j] > 0.0) q[j] = mass / nonzero;
      }
    }
    double ptotal = 0.0, qtotal = 0.0;
    for (int j = 0; j < n; ++j) {
      ptotal += p[j];
      qtotal += q[j];
    }
    double kl = 0.0;
    for (int j = 0; j < n; ++j) {
      if (p[j] <= 0.0) continue;
      const double pj = p[j] / ptotal;
      // An edge bin holding only clipped mass has nothing in Q.
      const double qj = std::max(q[j] / qtotal, 1e-12);
      kl += pj * std::log(pj / qj);
    }
    if (kl < best_kl) {
      best_kl = kl;
      best = c;
    }
  }
  return best;
}

}  // namespace

ClipRange calibrate_clip_range(std::span<const double> values,
                               CalibrationMethod method, int bits) {
  if (values.empty()) throw ContractError("calibrate_clip_range: no values");
  if (bits < 2) throw BitwidthError("calibrate_clip_range: bitwidth below 2");
  double lo = values[0], hi = values[0];
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("calibrate_clip_range: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) throw DegenerateRangeError("calibrate_clip_range: zero-spread values");

  switch (method) {
    case CalibrationMethod::kMinMax: return {lo, hi};
    case CalibrationMethod::kMse: return calibrate_mse(values, lo, hi, bits);
    case CalibrationMethod::kAciq: return calibrate_aciq(values, lo, hi, bits);
    case CalibrationMethod::kKl: return calibrate_kl(values, lo, hi, bits);
  }
  return {lo, hi};
}

}  // namespace gdfq

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gdfq/tensor.h"

namespace gdfq {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Bias-corrected adaptive-moment optimizer over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opts = {});

  /// Applies one update from the parameters' current gradient buffers.
  void step();
  /// Same update with explicitly supplied gradients (one span per parameter).
  void step(std::span<const std::vector<double>> grads);
  void zero_grad();

  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  std::int64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  void apply(std::size_t k, std::span<const double> g, double bc1, double bc2);

  std::vector<Tensor> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

struct NesterovOptions {
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with Nesterov momentum in the lookahead form
///   g' = g + wd * x;  v <- mu * v + g';  x <- x - lr * (g' + mu * v).
class NesterovSgd {
 public:
  NesterovSgd(std::vector<Tensor> params, NesterovOptions opts = {});

  void step();
  void step(std::span<const std::vector<double>> grads);
  void zero_grad();

  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  std::int64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  void apply(std::size_t k, std::span<const double> g);

  std::vector<Tensor> params_;
  NesterovOptions opts_;
  std::vector<std::vector<double>> velocity_;
  std::int64_t t_ = 0;
};

}  // namespace gdfq

// SPDX-License-Identifier: Apache-2.0
#include "gdfq/optim.h"

#include <cmath>

#include "gdfq/errors.h"

namespace gdfq {
namespace {

void check_grads(const std::vector<Tensor>& params,
                 std::span<const std::vector<double>> grads) {
  if (grads.size() != params.size()) {
    throw DimensionError("optimizer: " + std::to_string(grads.size()) +
                         " gradients for " + std::to_string(params.size()) +
                         " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].numel()) {
      throw DimensionError("optimizer: gradient " + std::to_string(k) +
                           " has " + std::to_string(grads[k].size()) +
                           " elements, parameter has " +
                           std::to_string(params[k].numel()));
    }
  }
}

std::vector<std::vector<double>> zero_buffers(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.numel(), 0.0);
  return out;
}

}  // namespace

Adam::Adam(std::vector<Tensor> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts), m_(zero_buffers(params_)),
      v_(zero_buffers(params_)) {}

void Adam::apply(std::size_t k, std::span<const double> g, double bc1, double bc2) {
  auto x = params_[k].mutable_data();
  auto& m = m_[k];
  auto& v = v_[k];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double gi = g[i] + opts_.weight_decay * x[i];
    m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
    v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    x[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) apply(k, params_[k].grad(), bc1, bc2);
}

void Adam::step(std::span<const std::vector<double>> grads) {
  check_grads(params_, grads);
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) apply(k, grads[k], bc1, bc2);
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

NesterovSgd::NesterovSgd(std::vector<Tensor> params, NesterovOptions opts)
    : params_(std::move(params)), opts_(opts), velocity_(zero_buffers(params_)) {}

void NesterovSgd::apply(std::size_t k, std::span<const double> g) {
  auto x = params_[k].mutable_data();
  auto& vel = velocity_[k];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double gi = g[i] + opts_.weight_decay * x[i];
    vel[i] = opts_.momentum * vel[i] + gi;
    x[i] -= opts_.lr * (gi + opts_.momentum * vel[i]);
  }
}

void NesterovSgd::step() {
  ++t_;
  for (std::size_t k = 0; k < params_.size(); ++k) apply(k, params_[k].grad());
}

void NesterovSgd::step(std::span<const std::vector<double>> grads) {
  check_grads(params_, grads);
  ++t_;
  for (std::size_t k = 0; k < params_.size(); ++k) apply(k, grads[k]);
}

void NesterovSgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace gdfq

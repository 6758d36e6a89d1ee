// SPDX-License-Identifier: Apache-2.0
#include "gdfq/nn.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "gdfq/errors.h"

namespace gdfq {
namespace {

Tensor constant_row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from({1, n}, std::move(v));
}

BnBatchStats batch_stats(const Tensor& x, SpreadKind spread) {
  if (x.rows() < 2) {
    throw ContractError("batch statistics need a batch of at least 2, got " +
                        std::to_string(x.rows()));
  }
  Tensor mu = col_mean(x);
  Tensor var = col_mean(square(sub_rowvec(x, mu)));
  return {mu, spread == SpreadKind::kStdDev ? sqrt(var) : var};
}

Tensor quantized_dense_forward(const DenseLayer& layer, QuantWrapper& q,
                               const Tensor& x, ForwardHooks* hooks) {
  Tensor in = x;
  if (q.quantize_input) {
    if (hooks && hooks->observe_activation_ranges) {
      const auto d = x.data();
      const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
      q.activation.observe(*lo, *hi);
    }
    const auto& r = q.activation;
    if (r.initialized && r.upper > r.lower) {
      in = fake_quant(x, compute_quant_params(r.lower, r.upper, q.act_bits));
    }
  }
  if (q.refresh_weight_range) {
    const auto w = layer.weight.data();
    const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
    if (*hi > *lo) q.weight = compute_quant_params(*lo, *hi, q.weight_bits);
  }
  Tensor w = q.weight.scale > 0.0 ? fake_quant(layer.weight, q.weight) : layer.weight;
  return linear(in, w, layer.bias);
}

}  // namespace

DenseLayer DenseLayer::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(out * in);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return {Tensor::from({out, in}, std::move(w), true), Tensor::zeros({out}, true)};
}

Tensor dense_forward(const DenseLayer& layer, const Tensor& x) {
  return linear(x, layer.weight, layer.bias);
}

BatchNormLayer BatchNormLayer::init(std::size_t features) {
  BatchNormLayer bn;
  bn.gamma = Tensor::full({features}, 1.0, true);
  bn.beta = Tensor::zeros({features}, true);
  bn.running_mean.assign(features, 0.0);
  bn.running_var.assign(features, 1.0);
  return bn;
}

Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x, Phase phase) {
  if (x.dim() != 2 || x.cols() != layer.features()) {
    throw DimensionError("batchnorm: expected " + std::to_string(layer.features()) +
                         " features, got " + std::to_string(x.cols()));
  }
  Tensor normalized;
  if (layer.mode == BnMode::kTrain && phase == Phase::kTraining) {
    if (x.rows() < 2) {
      throw ContractError("batchnorm: train mode needs a batch of at least 2");
    }
    Tensor mu = col_mean(x);
    Tensor centered = sub_rowvec(x, mu);
    Tensor var = col_mean(square(centered));
    normalized = div_rowvec(centered, sqrt(add_scalar(var, layer.eps)));
    const double m = layer.momentum;
    for (std::size_t f = 0; f < layer.features(); ++f) {
      layer.running_mean[f] = (1.0 - m) * layer.running_mean[f] + m * mu.data()[f];
      layer.running_var[f] = (1.0 - m) * layer.running_var[f] + m * var.data()[f];
    }
  } else {
    std::vector<double> sd(layer.features());
    for (std::size_t f = 0; f < sd.size(); ++f) {
      sd[f] = std::sqrt(layer.running_var[f] + layer.eps);
    }
    normalized = div_rowvec(sub_rowvec(x, constant_row(layer.running_mean)),
                            constant_row(std::move(sd)));
  }
  return add_rowvec(mul_rowvec(normalized, layer.gamma), layer.beta);
}

// ---------------------------------------------------------------------------
// Model

Model::Model(std::size_t input_dim, std::size_t num_classes)
    : input_dim_(input_dim), num_classes_(num_classes) {}

Model Model::mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                 std::size_t num_classes, Rng& rng) {
  Model m(input_dim, num_classes);
  std::size_t prev = input_dim;
  for (std::size_t h : hidden) {
    m.add_dense(prev, h, rng);
    m.add_batchnorm(h);
    m.add_relu();
    prev = h;
  }
  m.add_dense(prev, num_classes, rng);
  return m;
}

void Model::add_dense(std::size_t in, std::size_t out, Rng& rng) {
  layers_.push_back({DenseLayer::init(in, out, rng), std::nullopt});
}

void Model::add_batchnorm(std::size_t features) {
  layers_.push_back({BatchNormLayer::init(features), std::nullopt});
}

void Model::add_relu() { layers_.push_back({ReluLayer{}, std::nullopt}); }

void Model::add_layer(Layer layer) { layers_.push_back(std::move(layer)); }

Tensor Model::forward(const Tensor& x, Phase phase, ForwardHooks* hooks) {
  if (x.dim() != 2 || x.cols() != input_dim_) {
    throw DimensionError("model: expected input width " + std::to_string(input_dim_) +
                         ", got " + std::to_string(x.cols()));
  }
  Tensor h = x;
  for (auto& layer : layers_) {
    if (layer.is_dense()) {
      if (layer.quant) {
        if (hooks && hooks->dense_inputs) hooks->dense_inputs->push_back(h.detach());
        h = quantized_dense_forward(layer.dense(), *layer.quant, h, hooks);
      } else {
        h = dense_forward(layer.dense(), h);
      }
    } else if (layer.is_batchnorm()) {
      if (hooks && hooks->bn_inputs) hooks->bn_inputs->push_back(batch_stats(h, hooks->spread));
      h = batchnorm_forward(layer.batchnorm(), h, phase);
    } else {
      h = relu(h);
    }
  }
  return h;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers_) {
    if (layer.is_dense()) {
      out.push_back(layer.dense().weight);
      out.push_back(layer.dense().bias);
    } else if (layer.is_batchnorm()) {
      out.push_back(layer.batchnorm().gamma);
      out.push_back(layer.batchnorm().beta);
    }
  }
  return out;
}

void Model::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.set_requires_grad(on);
}

void Model::set_bn_mode(BnMode mode) {
  for (auto& layer : layers_) {
    if (layer.is_batchnorm()) layer.batchnorm().mode = mode;
  }
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.zero_grad();
}

Model Model::clone() const {
  Model m(input_dim_, num_classes_);
  for (const auto& layer : layers_) {
    Layer copy = layer;
    if (copy.is_dense()) {
      copy.dense().weight = layer.dense().weight.clone();
      copy.dense().bias = layer.dense().bias.clone();
    } else if (copy.is_batchnorm()) {
      copy.batchnorm().gamma = layer.batchnorm().gamma.clone();
      copy.batchnorm().beta = layer.batchnorm().beta.clone();
    }
    m.layers_.push_back(std::move(copy));
  }
  return m;
}

std::size_t Model::batchnorm_count() const {
  return static_cast<std::size_t>(std::count_if(
      layers_.begin(), layers_.end(), [](const Layer& l) { return l.is_batchnorm(); }));
}

bool Model::quantized() const {
  return std::any_of(layers_.begin(), layers_.end(),
                     [](const Layer& l) { return l.quant.has_value(); });
}

void Model::validate() const {
  std::size_t width = input_dim_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& layer = layers_[i];
    if (layer.is_dense()) {
      const auto& d = layer.dense();
      if (d.in() != width || d.bias.numel() != d.out()) {
        throw DimensionError("model: dense layer " + std::to_string(i) +
                             " does not chain (expects " + std::to_string(d.in()) +
                             ", receives " + std::to_string(width) + ")");
      }
      width = d.out();
    } else if (layer.is_batchnorm()) {
      const auto& bn = layer.batchnorm();
      if (bn.features() != width || bn.gamma.numel() != width ||
          bn.beta.numel() != width || bn.running_var.size() != width) {
        throw DimensionError("model: batchnorm layer " + std::to_string(i) +
                             " does not chain");
      }
    }
  }
  if (width != num_classes_) {
    throw DimensionError("model: final width " + std::to_string(width) +
                         " differs from class count " + std::to_string(num_classes_));
  }
}

// ---------------------------------------------------------------------------
// Statistics and losses

BnCapture capture_bn_batch_stats(Model& model, const Tensor& x, SpreadKind spread) {
  if (model.batchnorm_count() == 0) {
    throw BnsUnavailableError("model has no batch-norm layers");
  }
  if (x.rows() < 2) {
    throw ContractError("capture_bn_batch_stats: batch of at least 2 required");
  }
  BnCapture out;
  ForwardHooks hooks;
  hooks.bn_inputs = &out.layers;
  hooks.spread = spread;
  out.logits = model.forward(x, Phase::kInference, &hooks);
  return out;
}

Tensor bns_loss(const Model& model, const std::vector<BnBatchStats>& stats,
                SpreadKind spread) {
  if (model.batchnorm_count() == 0) {
    throw BnsUnavailableError("model has no batch-norm layers");
  }
  if (stats.size() != model.batchnorm_count()) {
    throw DimensionError("bns_loss: " + std::to_string(stats.size()) +
                         " captured layers for " +
                         std::to_string(model.batchnorm_count()) + " BN layers");
  }
  Tensor total = Tensor::scalar(0.0);
  std::size_t k = 0;
  for (const auto& layer : model.layers()) {
    if (!layer.is_batchnorm()) continue;
    const auto& bn = layer.batchnorm();
    std::vector<double> target_spread(bn.features());
    for (std::size_t f = 0; f < target_spread.size(); ++f) {
      target_spread[f] = spread == SpreadKind::kStdDev ? std::sqrt(bn.running_var[f])
                                                       : bn.running_var[f];
    }
    const auto& s = stats[k++];
    Tensor dm = sub(s.mean, constant_row(bn.running_mean));
    Tensor ds = sub(s.spread, constant_row(std::move(target_spread)));
    total = add(total, add(sum(square(dm)), sum(square(ds))));
  }
  return total;
}

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2 || labels.size() != logits.rows()) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(logits.rows()) + " rows");
  }
  Tensor picked = pick(log_softmax(logits), labels);
  return scale(sum(picked), -1.0 / static_cast<double>(logits.rows()));
}

Tensor kl_divergence_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.dim() != 2) {
    throw DimensionError("kl_divergence_loss: logits shapes differ");
  }
  Tensor log_q = log_softmax(student_logits);
  Tensor log_m = log_softmax(teacher_logits.detach());
  Tensor terms = mul(exp(log_q), sub(log_q, log_m));
  return scale(sum(terms), 1.0 / static_cast<double>(student_logits.rows()));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace gdfq

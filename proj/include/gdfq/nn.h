// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "gdfq/quantize.h"
#include "gdfq/rng.h"
#include "gdfq/tensor.h"

namespace gdfq {

/// train: batch statistics while training, running statistics at inference.
/// eval:  running statistics always.
/// fixed: running statistics always, and they are never written.
enum class BnMode { kTrain, kEval, kFixed };

enum class Phase { kTraining, kInference };

/// What the batch-statistics loss compares: standard deviations or variances.
enum class SpreadKind { kStdDev, kVariance };

struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  static DenseLayer init(std::size_t in, std::size_t out, Rng& rng);
  std::size_t in() const { return weight.cols(); }
  std::size_t out() const { return weight.rows(); }
};

/// y = x W^T + b.
Tensor dense_forward(const DenseLayer& layer, const Tensor& x);

struct BatchNormLayer {
  Tensor gamma;  // [features]
  Tensor beta;   // [features]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  BnMode mode = BnMode::kTrain;

  static BatchNormLayer init(std::size_t features);
  std::size_t features() const { return running_mean.size(); }
};

/// Per-feature statistics of a BN layer's input on the current batch.
/// Differentiable with respect to the input.
struct BnBatchStats {
  Tensor mean;    // [1 x features]
  Tensor spread;  // [1 x features], std or variance per SpreadKind
};

/// Normalizes with biased batch variance (train mode, training phase) or the
/// running statistics, then applies the affine transform. In train mode and
/// training phase the running statistics follow
///   running <- (1 - momentum) * running + momentum * batch.
Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x,
                         Phase phase = Phase::kTraining);

struct ReluLayer {};

struct Layer {
  std::variant<DenseLayer, BatchNormLayer, ReluLayer> impl;
  /// Present on dense layers of a quantized model.
  std::optional<QuantWrapper> quant;

  bool is_dense() const { return std::holds_alternative<DenseLayer>(impl); }
  bool is_batchnorm() const { return std::holds_alternative<BatchNormLayer>(impl); }
  bool is_relu() const { return std::holds_alternative<ReluLayer>(impl); }
  DenseLayer& dense() { return std::get<DenseLayer>(impl); }
  const DenseLayer& dense() const { return std::get<DenseLayer>(impl); }
  BatchNormLayer& batchnorm() { return std::get<BatchNormLayer>(impl); }
  const BatchNormLayer& batchnorm() const { return std::get<BatchNormLayer>(impl); }
};

/// Optional side channels of Model::forward.
struct ForwardHooks {
  /// Feed each quantized layer's input extremes into its ActivationRange
  /// (in either phase).
  bool observe_activation_ranges = false;
  /// When set, receives one entry per BN layer (in order) with the batch
  /// statistics of that layer's input.
  std::vector<BnBatchStats>* bn_inputs = nullptr;
  SpreadKind spread = SpreadKind::kStdDev;
  /// When set, receives the input of every quantized dense layer (detached).
  std::vector<Tensor>* dense_inputs = nullptr;
};

class Model {
 public:
  Model() = default;
  Model(std::size_t input_dim, std::size_t num_classes);

  /// dense -> BN -> ReLU per hidden width, then a dense classifier head.
  static Model mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                   std::size_t num_classes, Rng& rng);

  void add_dense(std::size_t in, std::size_t out, Rng& rng);
  void add_batchnorm(std::size_t features);
  void add_relu();
  void add_layer(Layer layer);

  Tensor forward(const Tensor& x, Phase phase = Phase::kTraining,
                 ForwardHooks* hooks = nullptr);

  /// Trainable tensors in layer order: dense weight, bias; BN gamma, beta.
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool on);
  void set_bn_mode(BnMode mode);
  void zero_grad();

  /// Deep copy; shares no storage with this model.
  Model clone() const;

  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t batchnorm_count() const;
  bool quantized() const;

  /// Throws DimensionError unless layer widths chain from input_dim to
  /// num_classes.
  void validate() const;

 private:
  std::size_t input_dim_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<Layer> layers_;
};

struct BnCapture {
  Tensor logits;
  std::vector<BnBatchStats> layers;
};

/// Inference-phase forward pass that records, at every BN layer, the
/// per-feature mean and spread of that layer's input. Gradients flow back to
/// `x`.
BnCapture capture_bn_batch_stats(Model& model, const Tensor& x,
                                 SpreadKind spread = SpreadKind::kStdDev);

/// sum over BN layers of ||mean_r - running_mean||^2 + ||spread_r - running_spread||^2.
Tensor bns_loss(const Model& model, const std::vector<BnBatchStats>& stats,
                SpreadKind spread = SpreadKind::kStdDev);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels);

/// Mean over the batch of KL(softmax(student) || softmax(teacher)). The
/// teacher side is treated as a constant.
Tensor kl_divergence_loss(const Tensor& student_logits, const Tensor& teacher_logits);

/// Row-wise argmax, ties to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace gdfq

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gdfq/generator.h"
#include "gdfq/nn.h"
#include "gdfq/quantize.h"

namespace gdfq {

struct LabeledData {
  Tensor inputs;            // [n x features]
  std::vector<int> labels;  // n entries

  std::size_t size() const { return labels.size(); }
};

enum class TrainStrategy { kAlternating, kSeparate };

TrainStrategy parse_strategy(std::string_view name);
std::string_view to_string(TrainStrategy strategy);

struct TrainConfig {
  double beta = 0.1;
  double gamma = 1.0;
  int weight_bits = 4;
  int act_bits = 4;
  int epochs = 100;
  int iters_per_epoch = 50;
  int warmup_iters = 200;
  /// Generator stops for good once the teacher's accuracy on a fake batch
  /// exceeds eta. Unset: never stops.
  std::optional<double> eta;
  TrainStrategy strategy = TrainStrategy::kAlternating;
  int range_freeze_epochs = 4;
  double act_range_momentum = 0.1;
  double lr_g = 1e-3;
  double lr_q = 1e-4;
  double lr_decay = 0.1;
  int lr_decay_period = 50;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  // Ablation switches.
  bool fixed_bns = true;
  bool use_ce_g = true;
  bool use_bns = true;
  bool use_ce_q = true;
  bool use_kd = true;
  SpreadKind spread = SpreadKind::kStdDev;
  bool refresh_weight_range = true;
  bool quantize_network_input = false;

  void validate() const;
  /// Learning-rate multiplier for a zero-based epoch.
  double lr_factor(int epoch) const;
};

struct EpochRecord {
  int epoch = 0;
  double l1 = 0.0;
  double ce_g = 0.0;
  double bns = 0.0;
  double l2 = 0.0;
  double ce_q = 0.0;
  double kd = 0.0;
  double fake_teacher_accuracy = 0.0;
  std::optional<double> eval_accuracy;
  bool observing_ranges = false;
  bool generator_updated = false;
  double lr_g = 0.0;
  double lr_q = 0.0;
};

struct TrainReport {
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  std::optional<double> teacher_accuracy;
  std::optional<double> pre_finetune_accuracy;
  std::optional<double> final_accuracy;
  double generator_agreement = 0.0;
  int warmup_iters_run = 0;
  /// Global generator-step index at which the eta condition fired.
  std::optional<int> generator_stopped_at;
};

struct QuantizeOptions {
  int weight_bits = 4;
  int act_bits = 4;
  bool refresh_weight_range = true;
  bool quantize_network_input = false;
  double act_range_momentum = 0.1;
  bool fixed_bns = true;
};

/// Deep copy of `model` with every dense layer wrapped for fake quantization
/// (weights: per-tensor min/max) and every BN layer in fixed mode.
Model quantize_model(const Model& model, const QuantizeOptions& options);
Model quantize_model(const Model& model, int weight_bits, int act_bits);

struct QuantizedLossTerms {
  Tensor total;  // ce + gamma * kd
  Tensor ce;
  Tensor kd;
};

struct QuantizedLossOptions {
  double gamma = 1.0;
  bool use_ce = true;
  bool use_kd = true;
};

/// L2 = CE(Q(x), y) + gamma * KL(Q(x) || M(x)). `x` must not carry a graph
/// back into the generator. The teacher runs without recording gradients.
QuantizedLossTerms quantized_model_loss(Model& quantized, Model& teacher, const Tensor& x,
                                        std::span<const int> labels,
                                        const QuantizedLossOptions& options);

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
/// Runs in inference phase and does not change the model.
double evaluate_accuracy(Model& model, const Tensor& inputs, std::span<const int> labels);
double evaluate_accuracy(Model& model, const LabeledData& data);

struct GdfqResult {
  Generator generator;
  Model quantized;
  TrainReport report;
};

/// Warm-up, quantization, activation-range observation, then alternating
/// (or separate) generator / quantized-model updates. `eval` is used only for
/// reporting accuracies; training never reads real data.
GdfqResult gdfq_train(const Model& teacher, const GeneratorConfig& gcfg,
                      const TrainConfig& tcfg, const LabeledData* eval = nullptr);

/// Post-training quantization: weight and activation clip ranges from
/// `method` on the calibration set; no fine-tuning.
Model ptq_calibrate(const Model& teacher, const LabeledData& calibration,
                    CalibrationMethod method, const QuantizeOptions& options);

/// Quantized fine-tuning with L2 on real labelled data (the FT baseline).
/// Uses the same schedule, range observation and optimizer as gdfq_train.
GdfqResult finetune_real(const Model& teacher, const LabeledData& train,
                         const TrainConfig& tcfg, const LabeledData* eval = nullptr);

/// Line-delimited JSON: a header record, one record per epoch, and a
/// summary record.
inline constexpr int kReportFormatVersion = 1;
std::string report_to_jsonl(const TrainReport& report, std::string_view run_name);

}  // namespace gdfq

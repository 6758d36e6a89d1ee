// SPDX-License-Identifier: Apache-2.0
#include "gdfq/train.h"

#include <cmath>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "gdfq/errors.h"
#include "gdfq/optim.h"

namespace gdfq {
namespace {

using json = nlohmann::ordered_json;

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

struct EpochSums {
  double l1 = 0, ce_g = 0, bns = 0, l2 = 0, ce_q = 0, kd = 0, fake_acc = 0;
  int g_count = 0;
  int q_count = 0;
  bool generator_updated = false;
};

void require_finite(double v, const char* what, int epoch, int iter) {
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << what << " is not finite (epoch " << epoch << ", iteration " << iter << ")";
    throw NumericError(os.str());
  }
}

QuantizedLossTerms q_loss(Model& quantized, Model& teacher, const Tensor& x,
                          std::span<const int> labels, const QuantizedLossOptions& o,
                          Phase phase) {
  Tensor teacher_logits;
  {
    NoGradGuard no_grad;
    teacher_logits = teacher.forward(x, Phase::kInference);
  }
  Tensor logits = quantized.forward(x, phase);
  QuantizedLossTerms t;
  t.ce = cross_entropy_loss(logits, labels);
  t.kd = kl_divergence_loss(logits, teacher_logits);
  Tensor total = Tensor::scalar(0.0);
  if (o.use_ce) total = add(total, t.ce);
  if (o.use_kd) total = add(total, scale(t.kd, o.gamma));
  t.total = total;
  return t;
}

std::vector<QuantWrapper*> wrappers(Model& m) {
  std::vector<QuantWrapper*> out;
  for (auto& layer : m.layers()) {
    if (layer.quant) out.push_back(&*layer.quant);
  }
  return out;
}

QuantizeOptions quantize_options(const TrainConfig& c) {
  QuantizeOptions o;
  o.weight_bits = c.weight_bits;
  o.act_bits = c.act_bits;
  o.refresh_weight_range = c.refresh_weight_range;
  o.quantize_network_input = c.quantize_network_input;
  o.act_range_momentum = c.act_range_momentum;
  o.fixed_bns = c.fixed_bns;
  return o;
}

/// Range observation followed by quantized-model updates. `next_batch` supplies
/// the data for one iteration and may update the generator on the way.
void run_quantized_phase(Model& quantized, Model& teacher, const TrainConfig& c,
                         const std::function<Batch(int epoch, int iter, EpochSums&)>& next_batch,
                         TrainReport& report, const LabeledData* eval) {
  NesterovSgd sgd(quantized.parameters(), {c.lr_q, c.momentum, c.weight_decay});
  const QuantizedLossOptions qopt{c.gamma, c.use_ce_q, c.use_kd};
  for (int e = 0; e < c.epochs; ++e) {
    const double factor = c.lr_factor(e);
    const bool observing = e < c.range_freeze_epochs;
    EpochSums sums;
    for (int it = 0; it < c.iters_per_epoch; ++it) {
      Batch b = next_batch(e, it, sums);
      QuantizedLossTerms t;
      if (observing) {
        NoGradGuard no_grad;
        ForwardHooks hooks;
        hooks.observe_activation_ranges = true;
        quantized.forward(b.x, Phase::kInference, &hooks);
        t = q_loss(quantized, teacher, b.x, b.labels, qopt, Phase::kInference);
      } else {
        t = q_loss(quantized, teacher, b.x, b.labels, qopt, Phase::kTraining);
        require_finite(t.total.item(), "quantized-model loss", e, it);
        quantized.zero_grad();
        backward(t.total);
        sgd.set_lr(c.lr_q * factor);
        sgd.step();
      }
      require_finite(t.total.item(), "quantized-model loss", e, it);
      sums.l2 += t.total.item();
      sums.ce_q += t.ce.item();
      sums.kd += t.kd.item();
      ++sums.q_count;
    }
    if (observing) {
      for (auto* w : wrappers(quantized)) w->activation.end_epoch(c.range_freeze_epochs);
    }

    EpochRecord r;
    r.epoch = e;
    r.observing_ranges = observing;
    r.generator_updated = sums.generator_updated;
    r.lr_g = c.lr_g * factor;
    r.lr_q = c.lr_q * factor;
    if (sums.g_count > 0) {
      r.l1 = sums.l1 / sums.g_count;
      r.ce_g = sums.ce_g / sums.g_count;
      r.bns = sums.bns / sums.g_count;
      r.fake_teacher_accuracy = sums.fake_acc / sums.g_count;
    }
    r.l2 = sums.l2 / sums.q_count;
    r.ce_q = sums.ce_q / sums.q_count;
    r.kd = sums.kd / sums.q_count;
    if (eval) {
      r.eval_accuracy = evaluate_accuracy(quantized, *eval);
      if (e == c.range_freeze_epochs - 1) report.pre_finetune_accuracy = r.eval_accuracy;
    }
    report.epochs.push_back(r);
  }
  if (eval) report.final_accuracy = evaluate_accuracy(quantized, *eval);
}

json config_json(const TrainConfig& c) {
  json j;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["weight_bits"] = c.weight_bits;
  j["act_bits"] = c.act_bits;
  j["epochs"] = c.epochs;
  j["iters_per_epoch"] = c.iters_per_epoch;
  j["warmup_iters"] = c.warmup_iters;
  j["eta"] = c.eta ? json(*c.eta) : json(nullptr);
  j["strategy"] = std::string(to_string(c.strategy));
  j["range_freeze_epochs"] = c.range_freeze_epochs;
  j["act_range_momentum"] = c.act_range_momentum;
  j["lr_g"] = c.lr_g;
  j["lr_q"] = c.lr_q;
  j["lr_decay"] = c.lr_decay;
  j["lr_decay_period"] = c.lr_decay_period;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["fixed_bns"] = c.fixed_bns;
  j["use_ce_g"] = c.use_ce_g;
  j["use_bns"] = c.use_bns;
  j["use_ce_q"] = c.use_ce_q;
  j["use_kd"] = c.use_kd;
  j["spread"] = c.spread == SpreadKind::kStdDev ? "std" : "variance";
  j["refresh_weight_range"] = c.refresh_weight_range;
  j["quantize_network_input"] = c.quantize_network_input;
  return j;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

TrainStrategy parse_strategy(std::string_view name) {
  if (name == "alternating") return TrainStrategy::kAlternating;
  if (name == "separate") return TrainStrategy::kSeparate;
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

std::string_view to_string(TrainStrategy strategy) {
  return strategy == TrainStrategy::kAlternating ? "alternating" : "separate";
}

void TrainConfig::validate() const {
  if (eta && !(*eta > 0.0 && *eta <= 1.0)) throw ConfigError("eta must lie in (0, 1]");
  if (beta < 0.0 || gamma < 0.0) throw ConfigError("beta and gamma must be non-negative");
  if (weight_bits < 2 || act_bits < 2) throw ConfigError("bitwidths must be at least 2");
  if (weight_bits > 32 || act_bits > 32) throw ConfigError("bitwidths above 32 are not supported");
  if (epochs < 1 || iters_per_epoch < 1) throw ConfigError("epochs and iters_per_epoch must be positive");
  if (warmup_iters < 0) throw ConfigError("warmup_iters must be non-negative");
  if (range_freeze_epochs < 1 || range_freeze_epochs > epochs) {
    throw ConfigError("range_freeze_epochs must lie in [1, epochs]");
  }
  if (!(act_range_momentum > 0.0 && act_range_momentum <= 1.0)) {
    throw ConfigError("act_range_momentum must lie in (0, 1]");
  }
  if (!(lr_g > 0.0) || !(lr_q > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(lr_decay > 0.0) || lr_decay_period < 1) throw ConfigError("bad learning-rate decay");
  if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("bad optimizer settings");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
}

double TrainConfig::lr_factor(int epoch) const {
  return std::pow(lr_decay, static_cast<double>(epoch / lr_decay_period));
}

Model quantize_model(const Model& model, const QuantizeOptions& o) {
  for (const auto& p : model.parameters()) {
    for (double v : p.data()) {
      if (!std::isfinite(v)) throw NumericError("quantize_model: non-finite parameter");
    }
  }
  Model q = model.clone();
  q.set_requires_grad(true);
  q.set_bn_mode(o.fixed_bns ? BnMode::kFixed : BnMode::kTrain);
  bool first = true;
  for (auto& layer : q.layers()) {
    if (!layer.is_dense()) continue;
    QuantWrapper w;
    w.weight_bits = o.weight_bits;
    w.act_bits = o.act_bits;
    w.refresh_weight_range = o.refresh_weight_range;
    w.quantize_input = first ? o.quantize_network_input : true;
    w.activation.momentum = o.act_range_momentum;
    const auto d = layer.dense().weight.data();
    const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
    w.weight.bits = o.weight_bits;
    if (*hi > *lo) w.weight = compute_quant_params(*lo, *hi, o.weight_bits);
    layer.quant = w;
    first = false;
  }
  return q;
}

Model quantize_model(const Model& model, int weight_bits, int act_bits) {
  QuantizeOptions o;
  o.weight_bits = weight_bits;
  o.act_bits = act_bits;
  return quantize_model(model, o);
}

QuantizedLossTerms quantized_model_loss(Model& quantized, Model& teacher, const Tensor& x,
                                        std::span<const int> labels,
                                        const QuantizedLossOptions& options) {
  if (options.gamma < 0.0) throw ConfigError("quantized_model_loss: gamma must be non-negative");
  if (x.requires_grad() && !x.is_leaf()) {
    throw ContractError("quantized_model_loss: input must be detached from the generator");
  }
  return q_loss(quantized, teacher, x, labels, options, Phase::kTraining);
}

double evaluate_accuracy(Model& model, const Tensor& inputs, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("evaluate_accuracy: empty evaluation set");
  if (inputs.rows() != labels.size()) {
    throw DimensionError("evaluate_accuracy: input rows differ from label count");
  }
  NoGradGuard no_grad;
  const auto pred = argmax_rows(model.forward(inputs, Phase::kInference));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate_accuracy(Model& model, const LabeledData& data) {
  return evaluate_accuracy(model, data.inputs, data.labels);
}

GdfqResult gdfq_train(const Model& teacher, const GeneratorConfig& gcfg,
                      const TrainConfig& c, const LabeledData* eval) {
  c.validate();
  gcfg.validate();
  if (gcfg.num_classes != teacher.num_classes()) {
    throw ConfigError("generator class count differs from the teacher's");
  }
  if (gcfg.output_dim != teacher.input_dim()) {
    throw ConfigError("generator output width differs from the teacher's input width");
  }
  if (teacher.batchnorm_count() == 0) {
    throw BnsUnavailableError("gdfq_train: teacher has no batch-norm layers");
  }

  const Rng root(c.seed);
  Rng init_rng = root.split("generator-init");
  Rng noise_rng = root.split("noise");

  Model frozen = teacher.clone();
  frozen.set_requires_grad(false);
  frozen.set_bn_mode(BnMode::kEval);

  GdfqResult result;
  TrainReport& report = result.report;
  report.config = c;
  if (eval) report.teacher_accuracy = evaluate_accuracy(frozen, *eval);

  Generator& gen = result.generator;
  gen = Generator(gcfg, init_rng);
  AdamOptions aopt;
  aopt.lr = c.lr_g;
  Adam adam(gen.parameters(), aopt);

  const GeneratorLossOptions gopt{c.beta, c.use_ce_g, c.use_bns, c.spread};
  const bool trainable = c.use_ce_g || c.use_bns;
  bool stopped = false;
  int g_steps = 0;

  // One generator iteration; returns the (detached) fake batch.
  auto generator_iteration = [&](double lr, bool allow_update, EpochSums* sums,
                                 int epoch, int iter) -> Batch {
    NoiseBatch nb = sample_noise_and_labels(noise_rng, c.batch_size, gcfg.noise_dim,
                                            gcfg.num_classes);
    const bool may_update = allow_update && trainable && !stopped;
    GeneratorLossTerms t;
    {
      std::optional<NoGradGuard> no_grad;
      if (!may_update) no_grad.emplace();
      t = generator_loss(gen, frozen, nb, gopt);
    }
    require_finite(t.total.item(), "generator loss", epoch, iter);
    bool updated = false;
    if (may_update) {
      if (c.eta && t.teacher_accuracy > *c.eta) {
        stopped = true;
        report.generator_stopped_at = g_steps;
      } else {
        gen.zero_grad();
        backward(t.total);
        adam.set_lr(lr);
        adam.step();
        updated = true;
      }
    }
    ++g_steps;
    if (sums) {
      sums->l1 += t.total.item();
      sums->ce_g += t.ce.item();
      sums->bns += t.bns.item();
      sums->fake_acc += t.teacher_accuracy;
      ++sums->g_count;
      sums->generator_updated = sums->generator_updated || updated;
    }
    return {t.fake.detach(), std::move(nb.labels)};
  };

  for (int i = 0; i < c.warmup_iters; ++i) generator_iteration(c.lr_g, true, nullptr, -1, i);
  report.warmup_iters_run = c.warmup_iters;

  const bool alternating = c.strategy == TrainStrategy::kAlternating;
  if (!alternating) {
    // Same generator budget as the alternating schedule, spent up front.
    for (int e = 0; e < c.epochs; ++e) {
      for (int it = 0; it < c.iters_per_epoch; ++it) {
        generator_iteration(c.lr_g * c.lr_factor(e), true, nullptr, e, it);
      }
    }
  }

  result.quantized = quantize_model(teacher, quantize_options(c));
  run_quantized_phase(
      result.quantized, frozen, c,
      [&](int e, int it, EpochSums& sums) {
        return generator_iteration(c.lr_g * c.lr_factor(e), alternating, &sums, e, it);
      },
      report, eval);

  {
    NoGradGuard no_grad;
    Rng agree_rng = root.split("agreement");
    NoiseBatch nb = sample_noise_and_labels(agree_rng, 1000, gcfg.noise_dim, gcfg.num_classes);
    const auto pred = argmax_rows(frozen.forward(gen.generate(nb.z, nb.labels), Phase::kInference));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == nb.labels[i];
    report.generator_agreement = static_cast<double>(hits) / static_cast<double>(pred.size());
  }
  return result;
}

Model ptq_calibrate(const Model& teacher, const LabeledData& calibration,
                    CalibrationMethod method, const QuantizeOptions& options) {
  if (calibration.size() == 0) throw ContractError("ptq_calibrate: empty calibration set");
  QuantizeOptions o = options;
  o.refresh_weight_range = false;
  Model q = quantize_model(teacher, o);

  for (auto& layer : q.layers()) {
    if (!layer.quant) continue;
    const ClipRange r = calibrate_clip_range(layer.dense().weight.data(), method, o.weight_bits);
    layer.quant->weight = compute_quant_params(r.lower, r.upper, o.weight_bits);
  }
  // Layer by layer, so each range sees the already-quantized upstream layers.
  auto ws = wrappers(q);
  for (std::size_t k = 0; k < ws.size(); ++k) {
    if (!ws[k]->quantize_input) continue;
    std::vector<Tensor> inputs;
    {
      NoGradGuard no_grad;
      ForwardHooks hooks;
      hooks.dense_inputs = &inputs;
      q.forward(calibration.inputs, Phase::kInference, &hooks);
    }
    auto& act = ws[k]->activation;
    try {
      const ClipRange r = calibrate_clip_range(inputs[k].data(), method, o.act_bits);
      act.lower = r.lower;
      act.upper = r.upper;
      act.initialized = true;
    } catch (const DegenerateRangeError&) {
      // Constant input: leave this layer's activations unquantized.
    }
    act.frozen = true;
  }
  return q;
}

GdfqResult finetune_real(const Model& teacher, const LabeledData& train,
                         const TrainConfig& c, const LabeledData* eval) {
  c.validate();
  if (train.size() == 0) throw ContractError("finetune_real: empty training set");
  const Rng root(c.seed);
  Rng batch_rng = root.split("real-batches");

  Model frozen = teacher.clone();
  frozen.set_requires_grad(false);
  frozen.set_bn_mode(BnMode::kEval);

  GdfqResult result;
  result.report.config = c;
  if (eval) result.report.teacher_accuracy = evaluate_accuracy(frozen, *eval);
  result.quantized = quantize_model(teacher, quantize_options(c));

  const std::size_t width = train.inputs.cols();
  run_quantized_phase(
      result.quantized, frozen, c,
      [&](int, int, EpochSums&) {
        Batch b;
        std::vector<double> x(c.batch_size * width);
        b.labels.resize(c.batch_size);
        for (std::size_t i = 0; i < c.batch_size; ++i) {
          const auto idx = batch_rng.uniform_int(train.size());
          std::copy_n(&train.inputs.data()[idx * width], width, &x[i * width]);
          b.labels[i] = train.labels[idx];
        }
        b.x = Tensor::from({c.batch_size, width}, std::move(x));
        return b;
      },
      result.report, eval);
  return result;
}

std::string report_to_jsonl(const TrainReport& report, std::string_view run_name) {
  std::ostringstream os;
  json header;
  header["type"] = "header";
  header["format"] = "gdfq-train-report";
  header["version"] = kReportFormatVersion;
  header["run"] = std::string(run_name);
  header["seed"] = report.config.seed;
  header["config"] = config_json(report.config);
  os << header.dump() << '\n';
  for (const auto& r : report.epochs) {
    json j;
    j["type"] = "epoch";
    j["epoch"] = r.epoch;
    j["l1"] = r.l1;
    j["ce_g"] = r.ce_g;
    j["bns"] = r.bns;
    j["l2"] = r.l2;
    j["ce_q"] = r.ce_q;
    j["kd"] = r.kd;
    j["fake_teacher_accuracy"] = r.fake_teacher_accuracy;
    j["eval_accuracy"] = optional_json(r.eval_accuracy);
    j["observing_ranges"] = r.observing_ranges;
    j["generator_updated"] = r.generator_updated;
    j["lr_g"] = r.lr_g;
    j["lr_q"] = r.lr_q;
    os << j.dump() << '\n';
  }
  json s;
  s["type"] = "summary";
  s["version"] = kReportFormatVersion;
  s["epochs"] = report.epochs.size();
  s["teacher_accuracy"] = optional_json(report.teacher_accuracy);
  s["pre_finetune_accuracy"] = optional_json(report.pre_finetune_accuracy);
  s["final_accuracy"] = optional_json(report.final_accuracy);
  s["generator_agreement"] = report.generator_agreement;
  s["warmup_iters_run"] = report.warmup_iters_run;
  s["generator_stopped_at"] =
      report.generator_stopped_at ? json(*report.generator_stopped_at) : json(nullptr);
  os << s.dump() << '\n';
  return os.str();
}

}  // namespace gdfq

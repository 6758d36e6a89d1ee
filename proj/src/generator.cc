// SPDX-License-Identifier: Apache-2.0
#include "gdfq/generator.h"

#include <cmath>
#include <string>

#include "gdfq/checkpoint.h"
#include "gdfq/errors.h"

namespace gdfq {

void GeneratorConfig::validate() const {
  if (noise_dim < 1) throw ConfigError("generator: noise_dim must be at least 1");
  if (num_classes < 1) throw ConfigError("generator: num_classes must be at least 1");
  if (embed_dim < 1) throw ConfigError("generator: embed_dim must be at least 1");
  if (output_dim < 1) throw ConfigError("generator: output_dim must be at least 1");
  if (!(output_scale > 0.0)) throw ConfigError("generator: output_scale must be positive");
}

Generator::Generator(const GeneratorConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  std::vector<double> table(config.num_classes * config.embed_dim);
  for (auto& v : table) v = rng.normal();
  embedding_ = Tensor::from({config.num_classes, config.embed_dim}, std::move(table), true);
  body_ = Model::mlp(config.noise_dim + config.embed_dim, config.hidden,
                     config.output_dim, rng);
}

Tensor Generator::generate(const Tensor& z, std::span<const int> labels) {
  if (z.dim() != 2 || z.cols() != config_.noise_dim) {
    throw DimensionError("generate: noise must be [batch x " +
                         std::to_string(config_.noise_dim) + "]");
  }
  if (labels.size() != z.rows()) {
    throw DimensionError("generate: label count differs from batch size");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= config_.num_classes) {
      throw IndexError("generate: label " + std::to_string(y) + " out of range");
    }
  }
  Tensor h = concat_cols(z, gather_rows(embedding_, labels));
  Tensor out = body_.forward(h, Phase::kTraining);
  if (config_.tanh_output) out = scale(tanh(out), config_.output_scale);
  return out;
}

std::vector<Tensor> Generator::parameters() const {
  std::vector<Tensor> out{embedding_};
  for (auto& p : body_.parameters()) out.push_back(p);
  return out;
}

void Generator::zero_grad() {
  for (auto& p : parameters()) p.zero_grad();
}

Generator Generator::clone() const {
  Generator g;
  g.config_ = config_;
  g.embedding_ = embedding_.clone();
  g.body_ = body_.clone();
  return g;
}

std::vector<std::uint8_t> Generator::to_bytes() const {
  ByteWriter w;
  w.magic("GDFQGENR");
  w.u32(kModelCheckpointVersion);
  w.u64(config_.noise_dim);
  w.u64(config_.num_classes);
  w.u64(config_.embed_dim);
  w.u64(config_.output_dim);
  w.u64(config_.hidden.size());
  for (auto h : config_.hidden) w.u64(h);
  w.u8(config_.tanh_output ? 1 : 0);
  w.f64(config_.output_scale);
  w.f64s(embedding_.data());
  w.raw(model_to_bytes(body_));
  return w.take();
}

Generator Generator::from_bytes(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("GDFQGENR");
  if (r.u32() != kModelCheckpointVersion) throw FileError("generator: unsupported version");
  Generator g;
  auto& c = g.config_;
  c.noise_dim = r.u64();
  c.num_classes = r.u64();
  c.embed_dim = r.u64();
  c.output_dim = r.u64();
  const std::uint64_t layers = r.u64();
  if (layers > 64) throw FileError("generator: implausible hidden layer count");
  c.hidden.assign(layers, 0);
  for (auto& h : c.hidden) h = r.u64();
  c.tanh_output = r.u8() != 0;
  c.output_scale = r.f64();
  if (c.num_classes == 0 || c.embed_dim == 0 || c.num_classes * c.embed_dim > (1u << 24)) {
    throw FileError("generator: implausible embedding size");
  }
  g.embedding_ = Tensor::from({c.num_classes, c.embed_dim},
                              r.f64s(c.num_classes * c.embed_dim), true);
  g.body_ = model_from_bytes(r.rest());
  if (g.body_.input_dim() != c.noise_dim + c.embed_dim ||
      g.body_.num_classes() != c.output_dim) {
    throw FileError("generator: body does not match header");
  }
  return g;
}

void Generator::save(const std::filesystem::path& path) const {
  write_file_bytes(path, to_bytes());
}

Generator Generator::load(const std::filesystem::path& path) {
  return from_bytes(read_file_bytes(path));
}

NoiseBatch sample_noise_and_labels(Rng& rng, std::size_t batch, std::size_t noise_dim,
                                   std::size_t num_classes) {
  if (batch < 1) throw ContractError("sample_noise_and_labels: batch must be at least 1");
  if (num_classes < 1) throw ContractError("sample_noise_and_labels: no classes");
  std::vector<double> z(batch * noise_dim);
  for (auto& v : z) v = rng.normal();
  std::vector<int> labels(batch);
  for (auto& y : labels) y = static_cast<int>(rng.uniform_int(num_classes));
  return {Tensor::from({batch, noise_dim}, std::move(z)), std::move(labels)};
}

GeneratorLossTerms generator_loss(Generator& generator, Model& teacher,
                                  const NoiseBatch& batch,
                                  const GeneratorLossOptions& options) {
  if (options.beta < 0.0) throw ConfigError("generator_loss: beta must be non-negative");
  if (teacher.batchnorm_count() == 0) {
    throw BnsUnavailableError("generator_loss: teacher has no batch-norm layers");
  }
  for (const auto& p : teacher.parameters()) {
    if (p.requires_grad()) throw ContractError("generator_loss: teacher must be frozen");
  }
  GeneratorLossTerms out;
  out.fake = generator.generate(batch.z, batch.labels);
  BnCapture cap = capture_bn_batch_stats(teacher, out.fake, options.spread);
  out.ce = cross_entropy_loss(cap.logits, batch.labels);
  out.bns = bns_loss(teacher, cap.layers, options.spread);

  Tensor total = Tensor::scalar(0.0);
  if (options.use_ce) total = add(total, out.ce);
  if (options.use_bns) total = add(total, scale(out.bns, options.beta));
  out.total = total;

  const auto pred = argmax_rows(cap.logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i];
  out.teacher_accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
  return out;
}

}  // namespace gdfq

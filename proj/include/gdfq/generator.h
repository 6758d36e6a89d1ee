// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gdfq/nn.h"
#include "gdfq/rng.h"
#include "gdfq/tensor.h"

namespace gdfq {

struct GeneratorConfig {
  std::size_t noise_dim = 100;
  std::size_t num_classes = 2;
  std::size_t embed_dim = 8;
  std::vector<std::size_t> hidden = {128, 128};
  std::size_t output_dim = 2;
  /// Squash outputs with tanh * output_scale (bounded input domains).
  bool tanh_output = false;
  double output_scale = 1.0;

  void validate() const;
};

/// Conditional generator x = G(z | y): a label embedding concatenated with
/// the noise vector, fed through dense -> BN -> ReLU blocks and a linear head.
/// Its BN layers always normalize with batch statistics.
class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& config, Rng& rng);

  Tensor generate(const Tensor& z, std::span<const int> labels);

  std::vector<Tensor> parameters() const;
  void zero_grad();
  Generator clone() const;

  const GeneratorConfig& config() const { return config_; }
  const Tensor& embedding() const { return embedding_; }
  Model& body() { return body_; }
  const Model& body() const { return body_; }

  std::vector<std::uint8_t> to_bytes() const;
  static Generator from_bytes(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Generator load(const std::filesystem::path& path);

 private:
  GeneratorConfig config_;
  Tensor embedding_;  // [num_classes x embed_dim]
  Model body_;
};

struct NoiseBatch {
  Tensor z;                // [batch x noise_dim], iid N(0, 1)
  std::vector<int> labels; // iid uniform over {0..n-1}
};

NoiseBatch sample_noise_and_labels(Rng& rng, std::size_t batch, std::size_t noise_dim,
                                   std::size_t num_classes);

struct GeneratorLossTerms {
  Tensor total;  // ce + beta * bns
  Tensor ce;
  Tensor bns;
  Tensor fake;            // generated batch
  double teacher_accuracy = 0.0;  // teacher top-1 on the fake batch vs labels
};

struct GeneratorLossOptions {
  double beta = 0.1;
  bool use_ce = true;
  bool use_bns = true;
  SpreadKind spread = SpreadKind::kStdDev;
};

/// L1 = CE(M(G(z|y)), y) + beta * L_BNS. The teacher runs in inference phase
/// and must not require gradients, so only G's parameters receive them.
GeneratorLossTerms generator_loss(Generator& generator, Model& teacher,
                                  const NoiseBatch& batch,
                                  const GeneratorLossOptions& options);

}  // namespace gdfq

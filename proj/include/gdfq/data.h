// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gdfq/nn.h"
#include "gdfq/train.h"

namespace gdfq {

inline constexpr double kToyBound = 4.0;

/// 1 iff sin(x1) * sin(x2) > 0.
int toy_label(double x1, double x2);

struct SplitDataset {
  LabeledData train;
  LabeledData eval;
  std::uint64_t seed = 0;
};

/// `n` points uniform on [-4, 4]^2 labelled by toy_label; the first 80% of
/// the draws form the training split.
SplitDataset make_toy_dataset(std::uint64_t seed, std::size_t n);

/// CSV with a header row: numeric feature columns plus an integer label
/// column named `label_column`. Rows are shuffled with `seed` and split 80/20.
SplitDataset load_csv_dataset(const std::filesystem::path& path,
                              const std::string& label_column, std::uint64_t seed);

struct TeacherConfig {
  std::vector<std::size_t> hidden = {64, 64, 64};
  int epochs = 60;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  double weight_decay = 0.0;
  /// Learning rate is multiplied by lr_decay at each of these epochs.
  std::vector<int> lr_milestones = {30, 45};
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
};

struct TeacherResult {
  Model model;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
};

/// Minibatch Adam on cross-entropy. Throws NumericError if the loss stops
/// being finite.
TeacherResult train_teacher(const SplitDataset& data, std::size_t num_classes,
                            const TeacherConfig& config);

std::size_t count_classes(const LabeledData& data);

}  // namespace gdfq

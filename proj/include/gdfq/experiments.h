// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gdfq/data.h"
#include "gdfq/generator.h"
#include "gdfq/train.h"

namespace gdfq {

enum class RunKind { kFp32, kPtq, kGdfq, kFinetune };

RunKind parse_run_kind(std::string_view name);
std::string_view to_string(RunKind kind);

struct RunSpec {
  std::string name;
  RunKind kind = RunKind::kGdfq;
  CalibrationMethod method = CalibrationMethod::kMinMax;  // ptq only
  TrainConfig train;  // experiment-wide [train] plus this run's overrides
};

/// Parsed from an INI file:
///
///   [experiment]  task, samples, csv, label_column, seed, output_dir,
///                 teacher_checkpoint, grid_res, scatter_samples,
///                 calibration_samples
///   [teacher]     hidden, epochs, batch_size, lr, weight_decay,
///                 lr_milestones, lr_decay
///   [generator]   noise_dim, embed_dim, hidden, tanh_output, output_scale
///   [train]       any TrainConfig field (see apply_train_key)
///   [run.NAME]    kind = fp32 | ptq | gdfq | finetune, method (ptq only),
///                 plus [train] keys that override the experiment values
///
/// Lists are comma separated. `seed` seeds the dataset, the teacher and every
/// run unless a run sets its own `seed`.
struct ExperimentConfig {
  std::string task = "toy";
  std::size_t samples = 10000;
  std::filesystem::path csv_path;
  std::string label_column = "label";
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "gdfq_out";
  std::optional<std::filesystem::path> teacher_checkpoint;
  std::size_t grid_res = 100;
  std::size_t scatter_samples = 1000;
  /// Rows of the training split used by PTQ calibration; 0 means all.
  std::size_t calibration_samples = 0;

  TeacherConfig teacher;
  GeneratorConfig generator;
  TrainConfig train;
  std::vector<RunSpec> runs;

  void validate() const;
};

/// Sets one TrainConfig field from its INI spelling. Throws ConfigError for
/// unknown keys or unparsable values.
void apply_train_key(TrainConfig& config, const std::string& key, const std::string& value);

/// `overrides` are "section.key=value" strings applied on top of the file.
ExperimentConfig parse_experiment_config(std::istream& in,
                                         const std::vector<std::string>& overrides = {},
                                         const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

/// Applies GDFQ_OUTPUT_DIR when set.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

struct RunOutcome {
  std::string name;
  RunKind kind = RunKind::kFp32;
  std::optional<CalibrationMethod> method;
  int weight_bits = 32;
  int act_bits = 32;
  double eval_accuracy = 0.0;
  std::optional<double> generator_agreement;
};

struct ExperimentResult {
  double teacher_train_accuracy = 0.0;
  double teacher_eval_accuracy = 0.0;
  std::vector<RunOutcome> runs;
  std::filesystem::path output_dir;
};

/// Builds the dataset, trains (or loads) the teacher and executes every run.
/// Writes under the output directory:
///   teacher.gdfq, teacher_grid.csv (2-D tasks)
///   reports/NAME.jsonl            per-run training report
///   models/NAME_quantized.gdfq    and NAME_generator.gdfq for gdfq runs
///   scatter/NAME_grid.csv, scatter/NAME_samples.csv  (gdfq runs, 2-D tasks)
///   comparison.csv                one row per run plus the fp32 row
ExperimentResult run_experiment(const ExperimentConfig& config);

SplitDataset make_dataset(const ExperimentConfig& config);

/// run,kind,method,weight_bits,act_bits,eval_accuracy,delta_vs_fp32
std::string comparison_csv(const ExperimentResult& result);

struct ScatterSummary {
  std::size_t grid_rows = 0;
  std::size_t sample_rows = 0;
  double agreement = 0.0;  // fraction of samples with y == teacher argmax
};

/// Decision-boundary grid (grid_res^2 rows of x1,x2,teacher_class over
/// [lo, hi]^2) and n_samples generated rows of x1,x2,y,teacher_class. Both
/// files start with a '#' header naming the columns. Throws
/// UnsupportedTaskError unless the teacher takes 2-D input.
ScatterSummary export_boundary_scatter(Model& teacher, Generator* generator,
                                       std::size_t n_samples, std::size_t grid_res,
                                       std::uint64_t seed,
                                       const std::filesystem::path& grid_path,
                                       const std::filesystem::path& samples_path,
                                       double lo = -kToyBound, double hi = kToyBound);

}  // namespace gdfq

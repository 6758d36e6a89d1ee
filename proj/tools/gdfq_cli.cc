// SPDX-License-Identifier: Apache-2.0
// Command-line front end: teacher training, quantization baselines, GDFQ
// runs, ablation sweeps, scatter export and report summaries.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gdfq/checkpoint.h"
#include "gdfq/errors.h"
#include "gdfq/experiments.h"

namespace {

using namespace gdfq;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment INI file")->required();
  cmd->add_option("--seed", o.seed, "seed for data, teacher and every run");
  cmd->add_option("--output", o.output, "output directory (GDFQ_OUTPUT_DIR wins)");
  cmd->add_option("--set", o.overrides, "override a config field: section.key=value");
}

ExperimentConfig load(const CommonOptions& o, std::vector<std::string> extra = {}) {
  std::vector<std::string> overrides = o.overrides;
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  ExperimentConfig cfg = load_experiment_config(o.config, overrides);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.teacher.seed = *o.seed;
    cfg.train.seed = *o.seed;
    for (auto& r : cfg.runs) r.train.seed = *o.seed;
  }
  if (o.output) cfg.output_dir = *o.output;
  return cfg;
}

RunSpec make_run(const std::string& name, RunKind kind, const TrainConfig& train,
                 CalibrationMethod method = CalibrationMethod::kMinMax) {
  RunSpec r;
  r.name = name;
  r.kind = kind;
  r.train = train;
  r.method = method;
  return r;
}

void print_result(const ExperimentResult& r) {
  std::cout << "teacher train accuracy " << r.teacher_train_accuracy << ", eval accuracy "
            << r.teacher_eval_accuracy << "\n";
  std::cout << comparison_csv(r);
  for (const auto& run : r.runs) {
    if (run.generator_agreement) {
      std::cout << run.name << ": generator agreement " << *run.generator_agreement << "\n";
    }
  }
  std::cout << "outputs in " << r.output_dir.string() << "\n";
}

int cmd_report(const CommonOptions& o) {
  const ExperimentConfig cfg = load(o);
  const auto dir = resolve_output_dir(cfg);
  const auto table = dir / "comparison.csv";
  if (!std::filesystem::exists(table)) {
    throw FileError("no comparison table at " + table.string() + "; run an experiment first");
  }
  std::ifstream in(table);
  std::cout << in.rdbuf();
  const auto reports = dir / "reports";
  if (!std::filesystem::exists(reports)) return kExitOk;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(reports)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream rf(f);
    std::string line, last;
    while (std::getline(rf, line)) {
      if (!line.empty()) last = line;
    }
    const auto j = nlohmann::json::parse(last, nullptr, false);
    if (j.is_discarded() || j.value("type", "") != "summary") {
      throw FileError(f.string() + ": last record is not a summary");
    }
    std::cout << f.stem().string() << ": final_accuracy " << j["final_accuracy"].dump()
              << ", generator_agreement " << j["generator_agreement"].dump() << "\n";
  }
  return kExitOk;
}

int cmd_scatter(const CommonOptions& o, const std::string& generator_path,
                const std::optional<std::string>& teacher_path) {
  const ExperimentConfig cfg = load(o);
  const auto dir = resolve_output_dir(cfg);
  const std::filesystem::path tpath = teacher_path ? std::filesystem::path(*teacher_path)
                                      : cfg.teacher_checkpoint ? *cfg.teacher_checkpoint
                                                               : dir / "teacher.gdfq";
  if (!std::filesystem::exists(tpath)) throw FileError("teacher checkpoint not found: " + tpath.string());
  if (!std::filesystem::exists(generator_path)) {
    throw FileError("generator checkpoint not found: " + generator_path);
  }
  Model teacher = load_model(tpath);
  Generator gen = Generator::load(generator_path);
  const auto stem = std::filesystem::path(generator_path).stem().string();
  const ScatterSummary s = export_boundary_scatter(
      teacher, &gen, cfg.scatter_samples, cfg.grid_res, cfg.seed,
      dir / "scatter" / (stem + "_grid.csv"), dir / "scatter" / (stem + "_samples.csv"));
  std::cout << "grid rows " << s.grid_rows << ", sample rows " << s.sample_rows
            << ", agreement " << s.agreement << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative data-free quantization toolkit"};
  app.require_subcommand(1);

  CommonOptions teacher_o, quant_o, gdfq_o, calib_o, ablate_o, scatter_o, report_o;
  std::string method = "minmax";
  std::optional<int> bits;
  std::string generator_path;
  std::optional<std::string> teacher_path;

  auto* teacher_cmd = app.add_subcommand("teacher-train", "train the FP32 teacher and save it");
  add_common(teacher_cmd, teacher_o);

  auto* quant_cmd = app.add_subcommand("quantize", "post-training quantization of the teacher");
  add_common(quant_cmd, quant_o);
  quant_cmd->add_option("--method", method, "minmax | mse | aciq | kl");
  quant_cmd->add_option("--bits", bits, "weight and activation bitwidth");

  auto* gdfq_cmd = app.add_subcommand("gdfq", "generator-driven quantized fine-tuning");
  add_common(gdfq_cmd, gdfq_o);
  gdfq_cmd->add_option("--bits", bits, "weight and activation bitwidth");

  auto* calib_cmd = app.add_subcommand("calibrate", "compare all PTQ calibrators");
  add_common(calib_cmd, calib_o);
  calib_cmd->add_option("--bits", bits, "weight and activation bitwidth");

  auto* ablate_cmd = app.add_subcommand("ablate", "run every [run.*] section of the config");
  add_common(ablate_cmd, ablate_o);

  auto* scatter_cmd = app.add_subcommand("scatter", "export boundary grid and generated samples");
  add_common(scatter_cmd, scatter_o);
  scatter_cmd->add_option("--generator", generator_path, "generator checkpoint")->required();
  scatter_cmd->add_option("--teacher", teacher_path, "teacher checkpoint");

  auto* report_cmd = app.add_subcommand("report", "print the comparison table and run summaries");
  add_common(report_cmd, report_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    std::vector<std::string> bit_override;
    if (bits) bit_override.push_back("train.bits=" + std::to_string(*bits));

    if (*teacher_cmd) {
      ExperimentConfig cfg = load(teacher_o);
      cfg.runs = {make_run("fp32", RunKind::kFp32, cfg.train)};
      print_result(run_experiment(cfg));
    } else if (*quant_cmd) {
      ExperimentConfig cfg = load(quant_o, bit_override);
      const auto m = parse_calibration_method(method);
      cfg.runs = {make_run("fp32", RunKind::kFp32, cfg.train),
                  make_run("ptq_" + method, RunKind::kPtq, cfg.train, m)};
      print_result(run_experiment(cfg));
    } else if (*gdfq_cmd) {
      ExperimentConfig cfg = load(gdfq_o, bit_override);
      cfg.runs = {make_run("fp32", RunKind::kFp32, cfg.train),
                  make_run("gdfq", RunKind::kGdfq, cfg.train)};
      print_result(run_experiment(cfg));
    } else if (*calib_cmd) {
      ExperimentConfig cfg = load(calib_o, bit_override);
      cfg.runs = {make_run("fp32", RunKind::kFp32, cfg.train)};
      for (auto m : {CalibrationMethod::kMinMax, CalibrationMethod::kMse,
                     CalibrationMethod::kAciq, CalibrationMethod::kKl}) {
        cfg.runs.push_back(
            make_run("ptq_" + std::string(to_string(m)), RunKind::kPtq, cfg.train, m));
      }
      print_result(run_experiment(cfg));
    } else if (*ablate_cmd) {
      print_result(run_experiment(load(ablate_o)));
    } else if (*scatter_cmd) {
      return cmd_scatter(scatter_o, generator_path, teacher_path);
    } else if (*report_cmd) {
      return cmd_report(report_o);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

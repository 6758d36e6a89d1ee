// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gdfq/checkpoint.h"
#include "gdfq/data.h"
#include "gdfq/errors.h"
#include "gdfq/experiments.h"

namespace gdfq {
namespace {

namespace fs = std::filesystem;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("gdfq_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t data_rows(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') ++n;
  }
  return n;
}

const char* kTinyIni = R"(
[experiment]
samples = 400
seed = 3
grid_res = 7
scatter_samples = 50

[teacher]
hidden = 8,8
epochs = 3
batch_size = 32

[generator]
noise_dim = 6
embed_dim = 2
hidden = 8

[train]
bits = 4
epochs = 2
iters_per_epoch = 3
warmup_iters = 4
range_freeze_epochs = 1
batch_size = 16

[run.ptq_minmax]
kind = ptq
method = minmax

[run.gdfq]
kind = gdfq
gamma = 5
)";

ExperimentConfig tiny_config(const fs::path& out) {
  std::istringstream in(kTinyIni);
  auto cfg = parse_experiment_config(in);
  cfg.output_dir = out;
  return cfg;
}

TEST(ToyData, RangeBalanceAndSplit) {
  const auto d = make_toy_dataset(5, 10000);
  EXPECT_EQ(d.train.size(), 8000u);
  EXPECT_EQ(d.eval.size(), 2000u);
  double ones = 0.0;
  for (const auto* part : {&d.train, &d.eval}) {
    for (std::size_t i = 0; i < part->size(); ++i) {
      const double x1 = part->inputs.at(i, 0), x2 = part->inputs.at(i, 1);
      EXPECT_LE(std::abs(x1), kToyBound);
      EXPECT_LE(std::abs(x2), kToyBound);
      EXPECT_EQ(part->labels[i], toy_label(x1, x2));
      ones += part->labels[i];
    }
  }
  EXPECT_GE(ones / 10000.0, 0.45);
  EXPECT_LE(ones / 10000.0, 0.55);
}

TEST(ToyData, DeterministicPerSeed) {
  const auto a = make_toy_dataset(1, 500), b = make_toy_dataset(1, 500);
  const auto c = make_toy_dataset(2, 500);
  EXPECT_EQ(values(a.train.inputs), values(b.train.inputs));
  EXPECT_EQ(a.eval.labels, b.eval.labels);
  EXPECT_NE(values(a.train.inputs), values(c.train.inputs));
  EXPECT_THROW(make_toy_dataset(0, 99), ConfigError);
}

TEST(ToyData, LabelRule) {
  EXPECT_EQ(toy_label(1, 1), 1);
  EXPECT_EQ(toy_label(-1, -1), 1);
  EXPECT_EQ(toy_label(1, -1), 0);
  EXPECT_EQ(toy_label(3.5, 1), 0);  // sin(3.5) < 0
}

TEST(CsvData, LoadsAndSplits) {
  const auto dir = scratch_dir("csv");
  const auto path = dir / "d.csv";
  {
    std::ofstream out(path);
    out << "a, b ,label\n";
    for (int i = 0; i < 10; ++i) out << i << "," << -i << "," << (i % 3) << "\n";
  }
  const auto d = load_csv_dataset(path, "label", 0);
  EXPECT_EQ(d.train.size(), 8u);
  EXPECT_EQ(d.eval.size(), 2u);
  EXPECT_EQ(d.train.inputs.cols(), 2u);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const double a = d.train.inputs.at(i, 0);
    EXPECT_EQ(d.train.inputs.at(i, 1), -a);
    EXPECT_EQ(d.train.labels[i], static_cast<int>(a) % 3);
  }
  EXPECT_EQ(count_classes(d.train), 3u);
  EXPECT_THROW(load_csv_dataset(path, "class", 0), ConfigError);
  EXPECT_THROW(load_csv_dataset(dir / "missing.csv", "label", 0), FileError);
  {
    std::ofstream out(path);
    out << "a,label\n1,0\nx,1\n";
  }
  EXPECT_THROW(load_csv_dataset(path, "label", 0), FileError);
  {
    std::ofstream out(path);
    out << "a,label\n1,0\n2,1\n";
  }
  EXPECT_THROW(load_csv_dataset(path, "label", 0), ConfigError);
  fs::remove_all(dir);
}

TEST(Config, ParsesSectionsAndRunOverrides) {
  std::istringstream in(kTinyIni);
  const auto cfg = parse_experiment_config(in, {"train.beta=0.5", "run.gdfq.eta=0.9"});
  EXPECT_EQ(cfg.samples, 400u);
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.teacher.hidden, (std::vector<std::size_t>{8, 8}));
  EXPECT_EQ(cfg.teacher.seed, 3u);
  EXPECT_EQ(cfg.generator.hidden, (std::vector<std::size_t>{8}));
  EXPECT_EQ(cfg.train.beta, 0.5);
  ASSERT_EQ(cfg.runs.size(), 2u);
  EXPECT_EQ(cfg.runs[0].kind, RunKind::kPtq);
  EXPECT_EQ(cfg.runs[1].name, "gdfq");
  EXPECT_EQ(cfg.runs[1].train.gamma, 5.0);
  EXPECT_EQ(cfg.runs[1].train.beta, 0.5);
  EXPECT_EQ(cfg.runs[1].train.eta, 0.9);
  EXPECT_EQ(cfg.runs[1].train.seed, 3u);
  EXPECT_EQ(cfg.runs[1].train.weight_bits, 4);
}

TEST(Config, Errors) {
  auto parse = [](const std::string& text, std::vector<std::string> overrides = {}) {
    std::istringstream in(text);
    return parse_experiment_config(in, overrides);
  };
  EXPECT_THROW(parse("[train]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse("[nonsense]\na = 1\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nbits = four\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nbits = 1\n"), ConfigError);
  EXPECT_THROW(parse("[run.x]\nkind = gdfq\nmethod = kl\n"), ConfigError);
  EXPECT_THROW(parse("[run.x]\nkind = gdfq\nuse_ce_q = false\nuse_kd = false\n"), ConfigError);
  EXPECT_THROW(parse("[run.x]\nkind = magic\n"), ConfigError);
  EXPECT_THROW(parse("[train]\neta = 2\n"), ConfigError);
  EXPECT_THROW(parse("", {"train.beta"}), ConfigError);
  EXPECT_THROW(load_experiment_config("/nonexistent/x.ini"), FileError);
  EXPECT_THROW(parse("[experiment]\ntask = csv\ncsv = /nonexistent/d.csv\n"), FileError);
}

TEST(Config, PinnedFilesParse) {
  for (const char* name : {"toy.ini", "toy_quick.ini"}) {
    const auto path = fs::path(GDFQ_SOURCE_DIR) / "configs" / name;
    EXPECT_NO_THROW(load_experiment_config(path)) << name;
  }
}

TEST(Config, OutputDirEnvironmentOverride) {
  ExperimentConfig cfg;
  cfg.output_dir = "a/b";
  ::unsetenv("GDFQ_OUTPUT_DIR");
  EXPECT_EQ(resolve_output_dir(cfg), fs::path("a/b"));
  ::setenv("GDFQ_OUTPUT_DIR", "/tmp/elsewhere", 1);
  EXPECT_EQ(resolve_output_dir(cfg), fs::path("/tmp/elsewhere"));
  ::unsetenv("GDFQ_OUTPUT_DIR");
}

TEST(Scatter, GridCountAndChanceAgreementWhenUntrained) {
  const auto dir = scratch_dir("scatter");
  Rng rng(0);
  const std::vector<std::size_t> hidden{8};
  Model teacher = Model::mlp(2, hidden, 2, rng);
  teacher.set_bn_mode(BnMode::kEval);
  GeneratorConfig gc;
  gc.noise_dim = 4;
  gc.hidden = {8};
  Generator gen(gc, rng);
  const auto s = export_boundary_scatter(teacher, &gen, 2000, 13, 1, dir / "g.csv", dir / "s.csv");
  EXPECT_EQ(s.grid_rows, 169u);
  EXPECT_EQ(data_rows(dir / "g.csv"), 169u);
  EXPECT_EQ(data_rows(dir / "s.csv"), 2000u);
  EXPECT_EQ(slurp(dir / "g.csv").rfind("# x1,x2,teacher_class", 0), 0u);
  EXPECT_EQ(slurp(dir / "s.csv").rfind("# x1,x2,y,teacher_class", 0), 0u);
  EXPECT_NEAR(s.agreement, 0.5, 0.1);
  fs::remove_all(dir);
}

TEST(Scatter, RejectsNon2dTasks) {
  const auto dir = scratch_dir("scatter3");
  Rng rng(0);
  const std::vector<std::size_t> hidden{4};
  Model teacher = Model::mlp(3, hidden, 2, rng);
  EXPECT_THROW(export_boundary_scatter(teacher, nullptr, 10, 5, 0, dir / "g", dir / "s"),
               UnsupportedTaskError);
  fs::remove_all(dir);
}

TEST(RunExperiment, WritesTablesAndIsByteIdentical) {
  const auto a = scratch_dir("exp_a"), b = scratch_dir("exp_b");
  const auto ra = run_experiment(tiny_config(a));
  run_experiment(tiny_config(b));

  ASSERT_EQ(ra.runs.size(), 3u);
  EXPECT_EQ(ra.runs[0].kind, RunKind::kFp32);
  EXPECT_EQ(ra.runs[0].eval_accuracy, ra.teacher_eval_accuracy);
  ASSERT_TRUE(ra.runs[2].generator_agreement.has_value());

  const std::string table = slurp(a / "comparison.csv");
  EXPECT_EQ(table.rfind("run,kind,method,weight_bits,act_bits,eval_accuracy,delta_vs_fp32\n"
                        "fp32,fp32,,32,32,",
                        0),
            0u);
  EXPECT_EQ(table, comparison_csv(ra));
  EXPECT_EQ(data_rows(a / "scatter" / "gdfq_grid.csv"), 49u);
  EXPECT_EQ(data_rows(a / "scatter" / "gdfq_samples.csv"), 50u);

  for (const auto& rel : {"comparison.csv", "teacher.gdfq", "teacher_grid.csv",
                          "reports/gdfq.jsonl", "reports/ptq_minmax.jsonl",
                          "models/gdfq_quantized.gdfq", "models/gdfq_generator.gdfq",
                          "scatter/gdfq_samples.csv"}) {
    ASSERT_TRUE(fs::exists(a / rel)) << rel;
    EXPECT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
  }

  // Reusing the saved teacher gives the same table.
  auto cfg = tiny_config(b);
  cfg.teacher_checkpoint = a / "teacher.gdfq";
  run_experiment(cfg);
  EXPECT_EQ(slurp(b / "comparison.csv"), table);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunExperiment, MissingTeacherCheckpoint) {
  const auto dir = scratch_dir("exp_missing");
  auto cfg = tiny_config(dir);
  cfg.teacher_checkpoint = dir / "absent.gdfq";
  EXPECT_THROW(run_experiment(cfg), FileError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace gdfq

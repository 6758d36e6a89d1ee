// SPDX-License-Identifier: Apache-2.0
#include "gdfq/experiments.h"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "gdfq/checkpoint.h"
#include "gdfq/errors.h"

namespace gdfq {
namespace {

namespace pt = boost::property_tree;

std::string where(const std::string& section, const std::string& key) {
  return "[" + section + "] " + key;
}

double parse_double(const std::string& s, const std::string& ctx) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError(ctx + ": expected a number, got '" + s + "'");
  return v;
}

long long parse_int(const std::string& s, const std::string& ctx) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError(ctx + ": expected an integer, got '" + s + "'");
  return v;
}

std::size_t parse_size(const std::string& s, const std::string& ctx) {
  const long long v = parse_int(s, ctx);
  if (v < 0) throw ConfigError(ctx + ": must be non-negative");
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& s, const std::string& ctx) {
  const std::string v = boost::to_lower_copy(s);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(ctx + ": expected true/false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  if (boost::trim_copy(s).empty()) return parts;
  boost::split(parts, s, boost::is_any_of(","));
  for (auto& p : parts) boost::trim(p);
  return parts;
}

std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& ctx) {
  std::vector<std::size_t> out;
  for (const auto& p : split_list(s)) out.push_back(parse_size(p, ctx));
  return out;
}

void parse_experiment_section(ExperimentConfig& c, const pt::ptree& sec,
                              const std::filesystem::path& base_dir) {
  for (const auto& [key, node] : sec) {
    const std::string v = boost::trim_copy(node.data());
    const std::string ctx = where("experiment", key);
    if (key == "task") {
      c.task = v;
    } else if (key == "samples") {
      c.samples = parse_size(v, ctx);
    } else if (key == "csv") {
      c.csv_path = base_dir / v;
    } else if (key == "label_column") {
      c.label_column = v;
    } else if (key == "seed") {
      c.seed = static_cast<std::uint64_t>(parse_size(v, ctx));
    } else if (key == "output_dir") {
      c.output_dir = v;
    } else if (key == "teacher_checkpoint") {
      if (!v.empty()) c.teacher_checkpoint = base_dir / v;
    } else if (key == "grid_res") {
      c.grid_res = parse_size(v, ctx);
    } else if (key == "scatter_samples") {
      c.scatter_samples = parse_size(v, ctx);
    } else if (key == "calibration_samples") {
      c.calibration_samples = parse_size(v, ctx);
    } else {
      throw ConfigError("unknown key " + ctx);
    }
  }
}

void parse_teacher_section(TeacherConfig& t, const pt::ptree& sec) {
  for (const auto& [key, node] : sec) {
    const std::string v = boost::trim_copy(node.data());
    const std::string ctx = where("teacher", key);
    if (key == "hidden") {
      t.hidden = parse_sizes(v, ctx);
    } else if (key == "epochs") {
      t.epochs = static_cast<int>(parse_int(v, ctx));
    } else if (key == "batch_size") {
      t.batch_size = parse_size(v, ctx);
    } else if (key == "lr") {
      t.lr = parse_double(v, ctx);
    } else if (key == "weight_decay") {
      t.weight_decay = parse_double(v, ctx);
    } else if (key == "lr_milestones") {
      t.lr_milestones.clear();
      for (auto m : parse_sizes(v, ctx)) t.lr_milestones.push_back(static_cast<int>(m));
    } else if (key == "lr_decay") {
      t.lr_decay = parse_double(v, ctx);
    } else {
      throw ConfigError("unknown key " + ctx);
    }
  }
}

void parse_generator_section(GeneratorConfig& g, const pt::ptree& sec) {
  for (const auto& [key, node] : sec) {
    const std::string v = boost::trim_copy(node.data());
    const std::string ctx = where("generator", key);
    if (key == "noise_dim") {
      g.noise_dim = parse_size(v, ctx);
    } else if (key == "embed_dim") {
      g.embed_dim = parse_size(v, ctx);
    } else if (key == "hidden") {
      g.hidden = parse_sizes(v, ctx);
    } else if (key == "tanh_output") {
      g.tanh_output = parse_bool(v, ctx);
    } else if (key == "output_scale") {
      g.output_scale = parse_double(v, ctx);
    } else {
      throw ConfigError("unknown key " + ctx);
    }
  }
}

void apply_override(pt::ptree& tree, const std::string& spec) {
  const auto eq = spec.find('=');
  const auto dot = spec.rfind('.', eq);
  if (eq == std::string::npos || dot == std::string::npos || dot == 0) {
    throw ConfigError("override '" + spec + "' is not of the form section.key=value");
  }
  const std::string section = spec.substr(0, dot);
  const std::string key = spec.substr(dot + 1, eq - dot - 1);
  const std::string value = spec.substr(eq + 1);
  for (auto& [name, sec] : tree) {
    if (name == section) {
      sec.put(pt::ptree::path_type(key, '\0'), value);
      return;
    }
  }
  pt::ptree sec;
  sec.put(pt::ptree::path_type(key, '\0'), value);
  tree.push_back({section, sec});
}

std::string fixed6(double v) { return fmt::format("{:.6f}", v); }

Model clone_for_eval(const Model& m) { return m.clone(); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                   text.size()));
}

QuantizeOptions ptq_options(const TrainConfig& t) {
  QuantizeOptions o;
  o.weight_bits = t.weight_bits;
  o.act_bits = t.act_bits;
  o.quantize_network_input = t.quantize_network_input;
  o.act_range_momentum = t.act_range_momentum;
  o.fixed_bns = t.fixed_bns;
  return o;
}

}  // namespace

RunKind parse_run_kind(std::string_view name) {
  if (name == "fp32") return RunKind::kFp32;
  if (name == "ptq") return RunKind::kPtq;
  if (name == "gdfq") return RunKind::kGdfq;
  if (name == "finetune") return RunKind::kFinetune;
  throw ConfigError("unknown run kind '" + std::string(name) + "'");
}

std::string_view to_string(RunKind kind) {
  switch (kind) {
    case RunKind::kFp32: return "fp32";
    case RunKind::kPtq: return "ptq";
    case RunKind::kGdfq: return "gdfq";
    case RunKind::kFinetune: return "finetune";
  }
  return "?";
}

void apply_train_key(TrainConfig& t, const std::string& key, const std::string& raw) {
  const std::string v = boost::trim_copy(raw);
  const std::string ctx = where("train", key);
  auto as_int = [&] { return static_cast<int>(parse_int(v, ctx)); };
  if (key == "beta") t.beta = parse_double(v, ctx);
  else if (key == "gamma") t.gamma = parse_double(v, ctx);
  else if (key == "weight_bits") t.weight_bits = as_int();
  else if (key == "act_bits") t.act_bits = as_int();
  else if (key == "bits") t.weight_bits = t.act_bits = as_int();
  else if (key == "epochs") t.epochs = as_int();
  else if (key == "iters_per_epoch") t.iters_per_epoch = as_int();
  else if (key == "warmup_iters") t.warmup_iters = as_int();
  else if (key == "eta") {
    if (boost::to_lower_copy(v) == "none") t.eta.reset();
    else t.eta = parse_double(v, ctx);
  }
  else if (key == "strategy") t.strategy = parse_strategy(v);
  else if (key == "range_freeze_epochs") t.range_freeze_epochs = as_int();
  else if (key == "act_range_momentum") t.act_range_momentum = parse_double(v, ctx);
  else if (key == "lr_g") t.lr_g = parse_double(v, ctx);
  else if (key == "lr_q") t.lr_q = parse_double(v, ctx);
  else if (key == "lr_decay") t.lr_decay = parse_double(v, ctx);
  else if (key == "lr_decay_period") t.lr_decay_period = as_int();
  else if (key == "momentum") t.momentum = parse_double(v, ctx);
  else if (key == "weight_decay") t.weight_decay = parse_double(v, ctx);
  else if (key == "batch_size") t.batch_size = parse_size(v, ctx);
  else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_size(v, ctx));
  else if (key == "fixed_bns") t.fixed_bns = parse_bool(v, ctx);
  else if (key == "use_ce_g") t.use_ce_g = parse_bool(v, ctx);
  else if (key == "use_bns") t.use_bns = parse_bool(v, ctx);
  else if (key == "use_ce_q") t.use_ce_q = parse_bool(v, ctx);
  else if (key == "use_kd") t.use_kd = parse_bool(v, ctx);
  else if (key == "spread") {
    if (v == "std") t.spread = SpreadKind::kStdDev;
    else if (v == "variance") t.spread = SpreadKind::kVariance;
    else throw ConfigError(ctx + ": expected std or variance");
  }
  else if (key == "refresh_weight_range") t.refresh_weight_range = parse_bool(v, ctx);
  else if (key == "quantize_network_input") t.quantize_network_input = parse_bool(v, ctx);
  else throw ConfigError("unknown key " + ctx);
}

void ExperimentConfig::validate() const {
  if (task != "toy" && task != "csv") throw ConfigError("task must be toy or csv");
  if (task == "csv" && csv_path.empty()) throw ConfigError("csv task needs [experiment] csv");
  if (task == "csv" && !std::filesystem::exists(csv_path)) {
    throw FileError("csv file not found: " + csv_path.string());
  }
  if (task == "toy" && samples < 100) throw ConfigError("toy task needs samples >= 100");
  if (teacher.hidden.empty()) throw ConfigError("teacher needs at least one hidden layer");
  if (grid_res < 1) throw ConfigError("grid_res must be positive");
  if (scatter_samples == 1) throw ConfigError("scatter_samples must be 0 or at least 2");
  generator.validate();
  train.validate();
  std::set<std::string> names;
  for (const auto& r : runs) {
    if (!names.insert(r.name).second) throw ConfigError("duplicate run name '" + r.name + "'");
    r.train.validate();
  }
}

ExperimentConfig parse_experiment_config(std::istream& in,
                                         const std::vector<std::string>& overrides,
                                         const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& o : overrides) apply_override(tree, o);

  ExperimentConfig c;
  bool seed_in_train = false;
  // Sections first, runs after, so run overrides see the final [train].
  for (const auto& [name, sec] : tree) {
    if (name == "experiment") {
      parse_experiment_section(c, sec, base_dir);
    } else if (name == "teacher") {
      parse_teacher_section(c.teacher, sec);
    } else if (name == "generator") {
      parse_generator_section(c.generator, sec);
    } else if (name == "train") {
      for (const auto& [key, node] : sec) {
        apply_train_key(c.train, key, node.data());
        seed_in_train = seed_in_train || key == "seed";
      }
    } else if (!boost::starts_with(name, "run.")) {
      if (!sec.empty() || !sec.data().empty()) throw ConfigError("unknown section [" + name + "]");
    }
  }
  c.teacher.seed = c.seed;
  if (!seed_in_train) c.train.seed = c.seed;

  for (const auto& [name, sec] : tree) {
    if (!boost::starts_with(name, "run.")) continue;
    RunSpec r;
    r.name = name.substr(4);
    if (r.name.empty()) throw ConfigError("run section needs a name");
    r.train = c.train;
    bool has_kind = false, has_method = false;
    for (const auto& [key, node] : sec) {
      const std::string v = boost::trim_copy(node.data());
      if (key == "kind") {
        r.kind = parse_run_kind(v);
        has_kind = true;
      } else if (key == "method") {
        r.method = parse_calibration_method(v);
        has_method = true;
      } else {
        apply_train_key(r.train, key, v);
      }
    }
    if (!has_kind) throw ConfigError("[" + name + "] needs kind");
    if (has_method && r.kind != RunKind::kPtq) {
      throw ConfigError("[" + name + "] method only applies to ptq runs");
    }
    if (!r.train.use_ce_q && !r.train.use_kd && r.kind != RunKind::kFp32 &&
        r.kind != RunKind::kPtq) {
      throw ConfigError("[" + name + "] disables both quantized-model loss terms");
    }
    c.runs.push_back(std::move(r));
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config " + path.string());
  return parse_experiment_config(in, overrides, path.parent_path());
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
  if (const char* env = std::getenv("GDFQ_OUTPUT_DIR"); env && *env) return env;
  return config.output_dir;
}

SplitDataset make_dataset(const ExperimentConfig& config) {
  if (config.task == "toy") return make_toy_dataset(config.seed, config.samples);
  if (config.task == "csv") return load_csv_dataset(config.csv_path, config.label_column, config.seed);
  throw UnsupportedTaskError("unknown task '" + config.task + "'");
}

ScatterSummary export_boundary_scatter(Model& teacher, Generator* generator,
                                       std::size_t n_samples, std::size_t grid_res,
                                       std::uint64_t seed,
                                       const std::filesystem::path& grid_path,
                                       const std::filesystem::path& samples_path,
                                       double lo, double hi) {
  if (teacher.input_dim() != 2) {
    throw UnsupportedTaskError("boundary scatter needs a 2-D input task, got " +
                               std::to_string(teacher.input_dim()) + " features");
  }
  if (grid_res < 1) throw ContractError("grid_res must be positive");
  NoGradGuard no_grad;
  ScatterSummary summary;

  std::vector<double> pts(2 * grid_res * grid_res);
  for (std::size_t i = 0; i < grid_res; ++i) {
    for (std::size_t j = 0; j < grid_res; ++j) {
      const std::size_t r = i * grid_res + j;
      pts[2 * r] = lo + (hi - lo) * (static_cast<double>(j) + 0.5) / grid_res;
      pts[2 * r + 1] = lo + (hi - lo) * (static_cast<double>(i) + 0.5) / grid_res;
    }
  }
  const auto grid_pred = argmax_rows(
      teacher.forward(Tensor::from({grid_res * grid_res, 2}, pts), Phase::kInference));
  std::string grid = "# x1,x2,teacher_class\n";
  for (std::size_t r = 0; r < grid_pred.size(); ++r) {
    grid += fmt::format("{:.6f},{:.6f},{}\n", pts[2 * r], pts[2 * r + 1], grid_pred[r]);
  }
  write_text(grid_path, grid);
  summary.grid_rows = grid_pred.size();

  if (generator && n_samples > 0) {
    if (generator->config().output_dim != 2) {
      throw UnsupportedTaskError("generator output is not 2-D");
    }
    Rng rng = Rng(seed).split("scatter-samples");
    const NoiseBatch nb = sample_noise_and_labels(rng, n_samples, generator->config().noise_dim,
                                                  generator->config().num_classes);
    const Tensor x = generator->generate(nb.z, nb.labels);
    const auto pred = argmax_rows(teacher.forward(x, Phase::kInference));
    std::string out = "# x1,x2,y,teacher_class\n";
    std::size_t hits = 0;
    for (std::size_t r = 0; r < n_samples; ++r) {
      out += fmt::format("{:.6f},{:.6f},{},{}\n", x.at(r, 0), x.at(r, 1), nb.labels[r], pred[r]);
      hits += pred[r] == nb.labels[r];
    }
    write_text(samples_path, out);
    summary.sample_rows = n_samples;
    summary.agreement = static_cast<double>(hits) / static_cast<double>(n_samples);
  }
  return summary;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  ExperimentResult result;
  const auto out = resolve_output_dir(config);
  result.output_dir = out;
  const SplitDataset data = make_dataset(config);
  const std::size_t classes = count_classes(data.train);
  const std::size_t width = data.train.inputs.cols();

  Model teacher;
  if (config.teacher_checkpoint) {
    if (!std::filesystem::exists(*config.teacher_checkpoint)) {
      throw FileError("teacher checkpoint not found: " + config.teacher_checkpoint->string());
    }
    teacher = load_model(*config.teacher_checkpoint);
    if (teacher.input_dim() != width || teacher.num_classes() < classes) {
      throw ConfigError("teacher checkpoint does not match the dataset");
    }
  } else {
    teacher = train_teacher(data, classes, config.teacher).model;
  }
  save_model(teacher, out / "teacher.gdfq");
  {
    Model m = clone_for_eval(teacher);
    result.teacher_train_accuracy = evaluate_accuracy(m, data.train);
    result.teacher_eval_accuracy = evaluate_accuracy(m, data.eval);
    if (width == 2) {
      export_boundary_scatter(m, nullptr, 0, config.grid_res, config.seed,
                              out / "teacher_grid.csv", {});
    }
  }

  LabeledData calibration = data.train;
  if (config.calibration_samples > 0 && config.calibration_samples < data.train.size()) {
    const std::size_t n = config.calibration_samples;
    const auto d = data.train.inputs.data();
    calibration.inputs = Tensor::from({n, width}, std::vector<double>(d.begin(), d.begin() + n * width));
    calibration.labels.assign(data.train.labels.begin(), data.train.labels.begin() + n);
  }

  GeneratorConfig gcfg = config.generator;
  gcfg.num_classes = teacher.num_classes();
  gcfg.output_dim = width;

  std::vector<RunSpec> runs = config.runs;
  const bool has_fp32 = std::any_of(runs.begin(), runs.end(),
                                    [](const RunSpec& r) { return r.kind == RunKind::kFp32; });
  if (!has_fp32) {
    RunSpec fp32;
    fp32.name = "fp32";
    fp32.kind = RunKind::kFp32;
    fp32.train = config.train;
    runs.insert(runs.begin(), fp32);
  }

  for (const auto& run : runs) {
    RunOutcome o;
    o.name = run.name;
    o.kind = run.kind;
    TrainReport report;
    report.config = run.train;
    report.teacher_accuracy = result.teacher_eval_accuracy;
    switch (run.kind) {
      case RunKind::kFp32: {
        o.eval_accuracy = result.teacher_eval_accuracy;
        break;
      }
      case RunKind::kPtq: {
        o.method = run.method;
        o.weight_bits = run.train.weight_bits;
        o.act_bits = run.train.act_bits;
        Model q = ptq_calibrate(teacher, calibration, run.method, ptq_options(run.train));
        o.eval_accuracy = evaluate_accuracy(q, data.eval);
        save_model(q, out / "models" / (run.name + "_quantized.gdfq"));
        break;
      }
      case RunKind::kGdfq: {
        o.weight_bits = run.train.weight_bits;
        o.act_bits = run.train.act_bits;
        GdfqResult r = gdfq_train(teacher, gcfg, run.train, &data.eval);
        report = r.report;
        o.eval_accuracy = *r.report.final_accuracy;
        o.generator_agreement = r.report.generator_agreement;
        save_model(r.quantized, out / "models" / (run.name + "_quantized.gdfq"));
        r.generator.save(out / "models" / (run.name + "_generator.gdfq"));
        if (width == 2) {
          Model m = clone_for_eval(teacher);
          export_boundary_scatter(m, &r.generator, config.scatter_samples, config.grid_res,
                                  run.train.seed, out / "scatter" / (run.name + "_grid.csv"),
                                  out / "scatter" / (run.name + "_samples.csv"));
        }
        break;
      }
      case RunKind::kFinetune: {
        o.weight_bits = run.train.weight_bits;
        o.act_bits = run.train.act_bits;
        GdfqResult r = finetune_real(teacher, data.train, run.train, &data.eval);
        report = r.report;
        o.eval_accuracy = *r.report.final_accuracy;
        save_model(r.quantized, out / "models" / (run.name + "_quantized.gdfq"));
        break;
      }
    }
    if (run.kind != RunKind::kGdfq && run.kind != RunKind::kFinetune) {
      report.final_accuracy = o.eval_accuracy;
    }
    write_text(out / "reports" / (run.name + ".jsonl"), report_to_jsonl(report, run.name));
    result.runs.push_back(o);
  }
  write_text(out / "comparison.csv", comparison_csv(result));
  return result;
}

std::string comparison_csv(const ExperimentResult& result) {
  std::string s = "run,kind,method,weight_bits,act_bits,eval_accuracy,delta_vs_fp32\n";
  for (const auto& r : result.runs) {
    s += fmt::format("{},{},{},{},{},{},{}\n", r.name, to_string(r.kind),
                     r.method ? to_string(*r.method) : std::string_view(""), r.weight_bits,
                     r.act_bits, fixed6(r.eval_accuracy),
                     fixed6(r.eval_accuracy - result.teacher_eval_accuracy));
  }
  return s;
}

}  // namespace gdfq

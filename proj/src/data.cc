// SPDX-License-Identifier: Apache-2.0
#include "gdfq/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/algorithm/string.hpp>

#include "gdfq/errors.h"
#include "gdfq/optim.h"
#include "gdfq/rng.h"

namespace gdfq {
namespace {

LabeledData gather(const std::vector<double>& x, const std::vector<int>& y, std::size_t width,
                   std::span<const std::size_t> idx) {
  std::vector<double> out(idx.size() * width);
  std::vector<int> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(&x[idx[i] * width], width, &out[i * width]);
    labels[i] = y[idx[i]];
  }
  return {Tensor::from({idx.size(), width}, std::move(out)), std::move(labels)};
}

SplitDataset split_80_20(const std::vector<double>& x, const std::vector<int>& y,
                         std::size_t width, std::span<const std::size_t> order,
                         std::uint64_t seed) {
  const std::size_t n_train = order.size() * 8 / 10;
  SplitDataset d;
  d.seed = seed;
  d.train = gather(x, y, width, order.first(n_train));
  d.eval = gather(x, y, width, order.subspan(n_train));
  return d;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.uniform_int(i)]);
  }
}

}  // namespace

int toy_label(double x1, double x2) { return std::sin(x1) * std::sin(x2) > 0.0 ? 1 : 0; }

SplitDataset make_toy_dataset(std::uint64_t seed, std::size_t n) {
  if (n < 100) throw ConfigError("toy dataset needs at least 100 points");
  Rng rng = Rng(seed).split("toy-data");
  std::vector<double> x(2 * n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[2 * i] = rng.uniform(-kToyBound, kToyBound);
    x[2 * i + 1] = rng.uniform(-kToyBound, kToyBound);
    y[i] = toy_label(x[2 * i], x[2 * i + 1]);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  return split_80_20(x, y, 2, order, seed);
}

SplitDataset load_csv_dataset(const std::filesystem::path& path,
                              const std::string& label_column, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FileError(path.string() + ": missing header row");
  std::vector<std::string> header;
  boost::split(header, line, boost::is_any_of(","));
  for (auto& h : header) boost::trim(h);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    throw ConfigError(path.string() + ": no column named '" + label_column + "'");
  }
  const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());
  const std::size_t width = header.size() - 1;
  if (width == 0) throw ConfigError(path.string() + ": no feature columns");

  std::vector<double> x;
  std::vector<int> y;
  std::vector<std::string> cells;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    boost::trim(line);
    if (line.empty()) continue;
    boost::split(cells, line, boost::is_any_of(","));
    if (cells.size() != header.size()) {
      throw FileError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields");
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      boost::trim(cells[c]);
      try {
        std::size_t used = 0;
        if (c == label_idx) {
          const int v = std::stoi(cells[c], &used);
          if (v < 0) throw ConfigError("negative label");
          y.push_back(v);
        } else {
          x.push_back(std::stod(cells[c], &used));
        }
        if (used != cells[c].size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw FileError(path.string() + ":" + std::to_string(line_no) + ": bad value '" +
                        cells[c] + "'");
      }
    }
  }
  if (y.size() < 10) throw ConfigError(path.string() + ": fewer than 10 rows");
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).split("csv-split");
  shuffle(order, rng);
  return split_80_20(x, y, width, order, seed);
}

std::size_t count_classes(const LabeledData& data) {
  int hi = 0;
  for (int v : data.labels) hi = std::max(hi, v);
  return static_cast<std::size_t>(hi) + 1;
}

TeacherResult train_teacher(const SplitDataset& data, std::size_t num_classes,
                            const TeacherConfig& config) {
  if (data.train.size() < 2) throw ContractError("train_teacher: training split too small");
  if (config.epochs < 1 || config.batch_size < 2 || !(config.lr > 0.0)) {
    throw ConfigError("train_teacher: bad configuration");
  }
  const Rng root(config.seed);
  Rng init_rng = root.split("teacher-init");
  Rng batch_rng = root.split("teacher-batches");
  const std::size_t width = data.train.inputs.cols();

  TeacherResult result;
  result.model = Model::mlp(width, config.hidden, num_classes, init_rng);
  AdamOptions aopt;
  aopt.lr = config.lr;
  aopt.weight_decay = config.weight_decay;
  Adam adam(result.model.parameters(), aopt);

  const std::size_t n = data.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  double lr = config.lr;
  const auto x = data.train.inputs.data();
  for (int e = 0; e < config.epochs; ++e) {
    if (std::find(config.lr_milestones.begin(), config.lr_milestones.end(), e) !=
        config.lr_milestones.end()) {
      lr *= config.lr_decay;
    }
    adam.set_lr(lr);
    shuffle(order, batch_rng);
    // Drop the ragged tail so every BN batch has at least two rows.
    for (std::size_t start = 0; start + config.batch_size <= n; start += config.batch_size) {
      std::vector<double> bx(config.batch_size * width);
      std::vector<int> by(config.batch_size);
      for (std::size_t i = 0; i < config.batch_size; ++i) {
        const std::size_t idx = order[start + i];
        std::copy_n(&x[idx * width], width, &bx[i * width]);
        by[i] = data.train.labels[idx];
      }
      Tensor logits =
          result.model.forward(Tensor::from({config.batch_size, width}, std::move(bx)));
      Tensor loss = cross_entropy_loss(logits, by);
      if (!std::isfinite(loss.item())) {
        throw NumericError("teacher training diverged at epoch " + std::to_string(e) +
                           " (loss " + std::to_string(loss.item()) + ")");
      }
      result.model.zero_grad();
      backward(loss);
      adam.step();
    }
  }
  result.train_accuracy = evaluate_accuracy(result.model, data.train);
  if (data.eval.size() > 0) result.eval_accuracy = evaluate_accuracy(result.model, data.eval);
  return result;
}

}  // namespace gdfq

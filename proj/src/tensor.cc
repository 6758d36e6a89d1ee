// SPDX-License-Identifier: Apache-2.0
#include "gdfq/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "gdfq/errors.h"

namespace gdfq {
namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_2d(const Tensor& a, const char* op) {
  if (a.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         shape_str(a.shape()));
  }
}

void require_rowvec(const Tensor& x, const Tensor& v, const char* op) {
  require_2d(x, op);
  if (v.numel() != x.cols()) {
    throw DimensionError(std::string(op) + ": row vector of " +
                         std::to_string(v.numel()) + " elements vs " +
                         std::to_string(x.cols()) + " columns");
  }
}

template <class F>
Tensor unary(const Tensor& x, F&& forward,
             std::function<double(double x, double y)> dydx) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return Tensor::make_op(
      x.shape(), std::move(out), {x},
      [x, dydx = std::move(dydx)](const BackwardContext& ctx) {
        auto gx = ctx.parent_grads[0];
        const auto in = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gx[i] += ctx.grad[i] * dydx(in[i], ctx.value[i]);
        }
      });
}

enum class RowOp { kAdd, kSub, kMul, kDiv };

Tensor rowvec_op(const Tensor& x, const Tensor& v, RowOp op, const char* name) {
  require_rowvec(x, v, name);
  const std::size_t rows = x.rows(), cols = x.cols();
  const auto xd = x.data();
  const auto vd = v.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double a = xd[r * cols + c], b = vd[c];
      double y = 0.0;
      switch (op) {
        case RowOp::kAdd: y = a + b; break;
        case RowOp::kSub: y = a - b; break;
        case RowOp::kMul: y = a * b; break;
        case RowOp::kDiv: y = a / b; break;
      }
      out[r * cols + c] = y;
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, v},
      [x, v, op, rows, cols](const BackwardContext& ctx) {
        auto gx = ctx.parent_grads[0];
        auto gv = ctx.parent_grads[1];
        const auto xd = x.data();
        const auto vd = v.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const double g = ctx.grad[i];
            switch (op) {
              case RowOp::kAdd:
                if (!gx.empty()) gx[i] += g;
                if (!gv.empty()) gv[c] += g;
                break;
              case RowOp::kSub:
                if (!gx.empty()) gx[i] += g;
                if (!gv.empty()) gv[c] -= g;
                break;
              case RowOp::kMul:
                if (!gx.empty()) gx[i] += g * vd[c];
                if (!gv.empty()) gv[c] += g * xd[i];
                break;
              case RowOp::kDiv:
                if (!gx.empty()) gx[i] += g / vd[c];
                if (!gv.empty()) gv[c] -= g * xd[i] / (vd[c] * vd[c]);
                break;
            }
          }
        }
      });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->data = {0.0}; }

Tensor::Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) +
                         " elements, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

Tensor Tensor::make_op(Shape shape, std::vector<double> data,
                       std::vector<Tensor> parents, BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward = std::move(backward);
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
  return node_->shape.size() >= 2 ? node_->shape[0] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  return numel() / s[0];
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item: tensor of shape " + shape_str(shape()) +
                         " is not a scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad: not a leaf tensor");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return node_->parents.empty(); }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (node_->grad.size() != node_->data.size()) {
    node_->grad.assign(node_->data.size(), 0.0);
  }
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (node_->grad.size() != node_->data.size()) {
    node_->grad.assign(node_->data.size(), 0.0);
  }
  return node_->grad;
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone() const {
  return from(shape(), node_->data, node_->requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

GradTape GradTape::record(const Tensor& root) {
  GradTape tape;
  std::unordered_set<const Tensor::Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Tensor::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void GradTape::backward(const Tensor& loss) const {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.item())) {
    throw NumericError("backward: loss is not finite");
  }
  if (order_.empty() || order_.back() != loss.node().get()) {
    throw ContractError("backward: tape was not recorded from this loss");
  }
  for (Tensor::Node* n : order_) {
    if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
  }
  Tensor::Node* root = order_.back();
  if (root->grad.size() != 1) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;

  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Tensor::Node* n = *it;
    if (n->parents.empty() || !n->backward) continue;
    BackwardContext ctx;
    ctx.value = n->data;
    ctx.grad = n->grad;
    ctx.parent_grads.reserve(n->parents.size());
    for (auto& p : n->parents) {
      if (p->requires_grad) {
        if (p->grad.size() != p->data.size()) p->grad.assign(p->data.size(), 0.0);
        ctx.parent_grads.emplace_back(p->grad);
      } else {
        ctx.parent_grads.emplace_back();
      }
    }
    n->backward(ctx);
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    if (!std::isfinite(loss.item())) throw NumericError("backward: loss is not finite");
    return;  // nothing on the path requires a gradient
  }
  GradTape::record(loss).backward(loss);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = &bd[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return Tensor::make_op(
      {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const BackwardContext& ctx) {
        auto ga = ctx.parent_grads[0];
        auto gb = ctx.parent_grads[1];
        const auto ad = a.data();
        const auto bd = b.data();
        const auto g = ctx.grad;
        if (!ga.empty()) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bd[p * n + j];
              ga[i * k + p] += s;
            }
          }
        }
        if (!gb.empty()) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double av = ad[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_2d(x, "linear");
  require_2d(weight, "linear");
  const std::size_t batch = x.rows(), in = x.cols(), out_dim = weight.rows();
  if (weight.cols() != in) {
    throw DimensionError("linear: input width " + std::to_string(in) +
                         " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.numel() != out_dim) {
    throw DimensionError("linear: bias has " + std::to_string(bias.numel()) +
                         " elements, expected " + std::to_string(out_dim));
  }
  const auto xd = x.data();
  const auto wd = weight.data();
  const auto bd = bias.data();
  // Accumulate over a transposed copy of W so the inner loop runs along
  // contiguous outputs.
  std::vector<double> wt(in * out_dim);
  for (std::size_t o = 0; o < out_dim; ++o) {
    for (std::size_t p = 0; p < in; ++p) wt[p * out_dim + o] = wd[o * in + p];
  }
  std::vector<double> out(batch * out_dim);
  for (std::size_t i = 0; i < batch; ++i) {
    double* orow = &out[i * out_dim];
    std::copy(bd.begin(), bd.end(), orow);
    for (std::size_t p = 0; p < in; ++p) {
      const double xv = xd[i * in + p];
      if (xv == 0.0) continue;
      const double* wrow = &wt[p * out_dim];
      for (std::size_t o = 0; o < out_dim; ++o) orow[o] += xv * wrow[o];
    }
  }
  return Tensor::make_op(
      {batch, out_dim}, std::move(out), {x, weight, bias},
      [x, weight, batch, in, out_dim](const BackwardContext& ctx) {
        auto gx = ctx.parent_grads[0];
        auto gw = ctx.parent_grads[1];
        auto gb = ctx.parent_grads[2];
        const double* __restrict xd = x.data().data();
        const double* __restrict wd = weight.data().data();
        const double* __restrict g = ctx.grad.data();
        for (std::size_t i = 0; i < batch; ++i) {
          double* __restrict gxr = gx.empty() ? nullptr : gx.data() + i * in;
          const double* __restrict xr = xd + i * in;
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double go = g[i * out_dim + o];
            if (go == 0.0) continue;
            const double* __restrict wr = wd + o * in;
            if (gxr) {
              for (std::size_t p = 0; p < in; ++p) gxr[p] += go * wr[p];
            }
            if (!gw.empty()) {
              double* __restrict gwr = gw.data() + o * in;
              for (std::size_t p = 0; p < in; ++p) gwr[p] += go * xr[p];
            }
            if (!gb.empty()) gb[o] += go;
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [](const BackwardContext& ctx) {
                           for (auto g : ctx.parent_grads) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.grad[i];
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [](const BackwardContext& ctx) {
                           auto ga = ctx.parent_grads[0];
                           auto gb = ctx.parent_grads[1];
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ctx.grad[i];
                           for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= ctx.grad[i];
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [a, b](const BackwardContext& ctx) {
                           auto ga = ctx.parent_grads[0];
                           auto gb = ctx.parent_grads[1];
                           for (std::size_t i = 0; i < ga.size(); ++i) {
                             ga[i] += ctx.grad[i] * b.data()[i];
                           }
                           for (std::size_t i = 0; i < gb.size(); ++i) {
                             gb[i] += ctx.grad[i] * a.data()[i];
                           }
                         });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v * s; },
               [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v + s; },
               [](double, double) { return 1.0; });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  return rowvec_op(x, v, RowOp::kAdd, "add_rowvec");
}
Tensor sub_rowvec(const Tensor& x, const Tensor& v) {
  return rowvec_op(x, v, RowOp::kSub, "sub_rowvec");
}
Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  return rowvec_op(x, v, RowOp::kMul, "mul_rowvec");
}
Tensor div_rowvec(const Tensor& x, const Tensor& v) {
  return rowvec_op(x, v, RowOp::kDiv, "div_rowvec");
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; },
               [](double in, double) { return 2.0 * in; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](double v) { return std::sqrt(v); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); },
               [](double in, double) { return 1.0 / in; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_op({}, {s}, {x}, [](const BackwardContext& ctx) {
    auto gx = ctx.parent_grads[0];
    for (auto& g : gx) g += ctx.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor col_mean(const Tensor& x) {
  require_2d(x, "col_mean");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (rows == 0) throw ContractError("col_mean: no rows");
  std::vector<double> out(cols, 0.0);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += xd[r * cols + c];
  }
  const double inv = 1.0 / static_cast<double>(rows);
  for (auto& v : out) v *= inv;
  return Tensor::make_op({1, cols}, std::move(out), {x},
                         [rows, cols, inv](const BackwardContext& ctx) {
                           auto gx = ctx.parent_grads[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < cols; ++c) {
                               gx[r * cols + c] += ctx.grad[c] * inv;
                             }
                           }
                         });
}

Tensor log_softmax(const Tensor& logits) {
  require_2d(logits, "log_softmax");
  const std::size_t rows = logits.rows(), cols = logits.cols();
  const auto xd = logits.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xd[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] - lse;
  }
  return Tensor::make_op(logits.shape(), std::move(out), {logits},
                         [rows, cols](const BackwardContext& ctx) {
                           auto gx = ctx.parent_grads[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             double gs = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) gs += ctx.grad[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c) {
                               const std::size_t i = r * cols + c;
                               gx[i] += ctx.grad[i] - std::exp(ctx.value[i]) * gs;
                             }
                           }
                         });
}

Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts differ " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  std::vector<double> out(rows * c);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&a.data()[r * ca], ca, &out[r * c]);
    std::copy_n(&b.data()[r * cb], cb, &out[r * c + ca]);
  }
  return Tensor::make_op({rows, c}, std::move(out), {a, b},
                         [rows, ca, cb, c](const BackwardContext& ctx) {
                           auto ga = ctx.parent_grads[0];
                           auto gb = ctx.parent_grads[1];
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < ca && !ga.empty(); ++j) {
                               ga[r * ca + j] += ctx.grad[r * c + j];
                             }
                             for (std::size_t j = 0; j < cb && !gb.empty(); ++j) {
                               gb[r * cb + j] += ctx.grad[r * c + ca + j];
                             }
                           }
                         });
}

Tensor gather_rows(const Tensor& table, std::span<const int> index) {
  require_2d(table, "gather_rows");
  const std::size_t n = table.rows(), width = table.cols();
  std::vector<int> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw IndexError("gather_rows: index " + std::to_string(idx[i]) +
                       " outside [0, " + std::to_string(n) + ")");
    }
    std::copy_n(&table.data()[idx[i] * width], width, &out[i * width]);
  }
  const std::size_t count = idx.size();
  return Tensor::make_op({count, width}, std::move(out), {table},
                         [idx = std::move(idx), width](const BackwardContext& ctx) {
                           auto gt = ctx.parent_grads[0];
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             for (std::size_t j = 0; j < width; ++j) {
                               gt[idx[i] * width + j] += ctx.grad[i * width + j];
                             }
                           }
                         });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  require_2d(x, "pick");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (index.size() != rows) {
    throw DimensionError("pick: " + std::to_string(index.size()) +
                         " indices for " + std::to_string(rows) + " rows");
  }
  std::vector<int> idx(index.begin(), index.end());
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) {
      throw IndexError("pick: index " + std::to_string(idx[r]) +
                       " outside [0, " + std::to_string(cols) + ")");
    }
    out[r] = x.data()[r * cols + idx[r]];
  }
  return Tensor::make_op({rows, 1}, std::move(out), {x},
                         [idx = std::move(idx), cols](const BackwardContext& ctx) {
                           auto gx = ctx.parent_grads[0];
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                             gx[r * cols + idx[r]] += ctx.grad[r];
                           }
                         });
}

double finite_diff_check(const std::function<Tensor()>& f,
                         std::span<Tensor> params, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    throw NumericError("finite_diff_check: eps must be positive and finite");
  }
  for (auto& p : params) {
    if (!p.is_leaf()) throw ContractError("finite_diff_check: parameter is not a leaf");
    p.mutable_grad();
    p.zero_grad();
  }
  const Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: f is not finite");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto d = params[k].mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double orig = d[i];
      d[i] = orig + eps;
      const double fp = f().item();
      d[i] = orig - eps;
      const double fm = f().item();
      d[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("finite_diff_check: f is not finite at a perturbed point");
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace gdfq

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace gdfq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

/// Passed to a node's backward function. `parent_grads[i]` is empty when
/// parent i does not require a gradient.
struct BackwardContext {
  std::span<const double> value;
  std::span<const double> grad;
  std::vector<std::span<double>> parent_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage and graph
/// node. Use clone() for an independent leaf.
class Tensor {
 public:
  struct Node;

  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Builds the output of a differentiable operation. When grad mode is off
  /// or no parent requires a gradient, the result is a plain leaf.
  static Tensor make_op(Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents, BackwardFn backward);

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  /// Leading dimension of a 2-D tensor; 1 for vectors and scalars.
  std::size_t rows() const;
  /// Trailing dimension; numel() for 1-D tensors.
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Direct write access. Only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  /// Gradient view; an all-zero buffer is materialized on first access.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// New leaf sharing no graph history; copies the values.
  Tensor detach() const;
  /// Independent leaf with copied values and the same requires_grad flag.
  Tensor clone() const;

  bool same(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node);
  std::shared_ptr<Node> node_;
};

struct Tensor::Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

/// Records of a graph in topological order (inputs before outputs).
class GradTape {
 public:
  static GradTape record(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<Tensor::Node*>& order() const { return order_; }

  /// Reverse traversal; visits each node once. Leaf gradients accumulate
  /// across calls, interior gradients are reset first.
  void backward(const Tensor& loss) const;

 private:
  std::vector<Tensor::Node*> order_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates to every tensor on the tape.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording for its lifetime (per thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Differentiable primitives. 2-D operands are [rows x cols]; "rowvec"
// operands have cols() elements and broadcast over rows.

Tensor matmul(const Tensor& a, const Tensor& b);
/// x * W^T + b for x [batch x in], W [out x in], b [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor sub_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor div_rowvec(const Tensor& x, const Tensor& v);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor square(const Tensor& x);
/// Gradient is taken as 0 where the output is 0.
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Column means of a 2-D tensor, shape [1 x cols].
Tensor col_mean(const Tensor& x);

Tensor log_softmax(const Tensor& logits);
Tensor softmax(const Tensor& logits);

/// Horizontal concatenation of two tensors with equal row counts.
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Row lookup table[index[i], :].
Tensor gather_rows(const Tensor& table, std::span<const int> index);
/// x[i, index[i]] as a [rows x 1] tensor.
Tensor pick(const Tensor& x, std::span<const int> index);

/// Maximum over `params` of |analytic - central difference| / max(1, |analytic|).
/// `f` must rebuild the graph on every call.
double finite_diff_check(const std::function<Tensor()>& f,
                         std::span<Tensor> params, double eps);

}  // namespace gdfq

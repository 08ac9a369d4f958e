#pragma once

// Small define-by-run differentiation core.
//
// Every value is a 2-D row-major matrix of doubles. A batch of samples is a
// matrix with one sample per row; a scalar is 1x1. The primitive set is closed
// under differentiation: the forward-mode and reverse-mode rule of every
// primitive is written in terms of the same primitives, so derivatives can be
// differentiated again (gradients of vector-Jacobian products, Jacobian-vector
// products, and so on).

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace micn::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Div,
  Affine,  // a * x + b, scalar a and b
  Sigmoid,
  SumRows,        // (r, c) -> (1, c)
  SumCols,        // (r, c) -> (r, 1)
  BroadcastRows,  // (1, c) -> (n, c)
  BroadcastCols,  // (r, 1) -> (r, n)
  Transpose,
  SliceCols,   // columns [offset, offset + width)
  PadCols,     // embed into zero matrix of `total` columns at `offset`
  ConcatCols,  // [a | b]
  Clamp,
};

std::string_view op_name(Op op);

/// Raised when operand shapes disagree. The message names the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  /// A leaf that participates in differentiation.
  static Tensor variable(Matrix value);
  static Tensor zeros(Index rows, Index cols);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const;
  /// Writable storage of a leaf (parameter updates). Throws for non-leaves.
  Matrix& leaf_value();
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  Op op() const;
  std::uint64_t id() const;
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Op op = Op::Leaf;
  Matrix value;
  std::vector<std::shared_ptr<Node>> parents;
  bool requires_grad = false;
  std::uint64_t id = 0;
  double a = 0.0;
  double b = 0.0;
  Index i0 = 0;
  Index i1 = 0;
};

// Recording of parent links is on by default and thread-local. Under a
// NoGradGuard every new tensor is a constant.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// Primitives.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double scale, double shift);
Tensor sigmoid(const Tensor& x);
Tensor sum_rows(const Tensor& x);
Tensor sum_cols(const Tensor& x);
Tensor broadcast_rows(const Tensor& x, Index count);
Tensor broadcast_cols(const Tensor& x, Index count);
Tensor transpose(const Tensor& x);
Tensor slice_cols(const Tensor& x, Index offset, Index width);
Tensor pad_cols(const Tensor& x, Index offset, Index total);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& x, double lo, double hi);

// Composites.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return affine(x, s, 0.0); }
inline Tensor operator-(const Tensor& x) { return affine(x, -1.0, 0.0); }
Tensor silu(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// Row-wise inner products: (r, c) x (r, c) -> (r, 1).
Tensor dot_rows(const Tensor& a, const Tensor& b);
/// x W^T + b with W (out, in) and b (1, out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Multiply row r of x by column entry r of `coef` (r, 1).
Tensor scale_rows(const Tensor& x, const Tensor& coef);
/// Constant copy of the value; severs derivative tracking.
Tensor detach(const Tensor& x);

/// d scalar / d wrt for each element of `wrt`. `scalar` must be 1x1. With
/// `create_graph` the returned tensors are themselves differentiable.
std::vector<Tensor> gradient(const Tensor& scalar, std::span<const Tensor> wrt,
                             bool create_graph = false);

/// cotangent^T d outputs / d inputs, row-major batched: for a batch of
/// independent rows this is the per-row vector-Jacobian product.
Tensor vjp(const Tensor& outputs, const Tensor& inputs, const Tensor& cotangent,
           bool create_graph = true);

/// d outputs / d inputs applied to `tangent` (forward mode). The result is
/// built from recorded primitives and can be differentiated again.
Tensor jvp(const Tensor& outputs, const Tensor& inputs, const Tensor& tangent);

/// A recorded computation that can be replayed on new input values.
class Graph {
 public:
  /// `inputs` must be variables; `outputs` must be computed from them with
  /// recording enabled.
  Graph(std::vector<Tensor> inputs, std::vector<Tensor> outputs);

  std::vector<Tensor> evaluate(std::span<const Tensor> inputs) const;

  std::size_t num_operations() const { return order_.size(); }
  std::vector<Op> operations() const;

 private:
  std::vector<Tensor> inputs_;
  std::vector<Tensor> outputs_;
  std::vector<std::shared_ptr<Node>> order_;  // non-leaf nodes, topological
};

}  // namespace micn::ad

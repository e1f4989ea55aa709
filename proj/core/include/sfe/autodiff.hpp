#pragma once

// Tensor-level reverse-mode automatic differentiation.
//
// Every value is a dense row-major matrix of doubles. Batches of points are
// stored one per row. Backward rules are written in terms of the same
// differentiable ops, so gradients can themselves be differentiated when
// gradients() is called with create_graph = true (needed for the R1 penalty).

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sfe::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Var;
struct Node;

using BackwardFn = std::function<std::vector<Var>(const Var& grad_output)>;

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf that participates in differentiation.
  static Var parameter(Matrix value);
  static Var scalar(double v);
  static Var zeros(Eigen::Index rows, Eigen::Index cols);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Matrix& value() const { return node_->value; }
  /// Direct access for optimizers; only meaningful on leaves.
  [[nodiscard]] Matrix& mutable_value() { return node_->value; }
  [[nodiscard]] Eigen::Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return node_->value.cols(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  [[nodiscard]] double item() const;
  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }
  /// Turns gradient tracking on or off for a leaf. Ops built afterwards see the
  /// new flag; existing graphs are unaffected.
  void set_requires_grad(bool on);
  /// Same value, cut from the graph.
  [[nodiscard]] Var detach() const { return Var(node_->value); }

 private:
  std::shared_ptr<Node> node_;
};

// ---- grad mode -------------------------------------------------------------

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

/// Builds the result of an op. When grad mode is off or no parent requires a
/// gradient the result is a constant and `backward` is dropped.
Var make_result(Matrix value, const std::vector<Var>& parents, BackwardFn backward);

/// d(output)/d(inputs) for a 1x1 output. Inputs not reachable from output get
/// zero gradients of matching shape.
std::vector<Var> gradients(const Var& output, const std::vector<Var>& inputs,
                           bool create_graph = false);

// ---- index tables ----------------------------------------------------------

/// Row-index table with `width` entries per output row. Entry -1 selects a zero
/// block. Shared so that closures can capture it cheaply.
struct IndexTable {
  std::vector<std::int64_t> indices;
  Eigen::Index width = 1;
  [[nodiscard]] Eigen::Index rows() const {
    return static_cast<Eigen::Index>(indices.size()) / width;
  }
};
using IndexTablePtr = std::shared_ptr<const IndexTable>;

IndexTablePtr make_index(std::vector<std::int64_t> indices, Eigen::Index width = 1);

// ---- elementwise and broadcasting ------------------------------------------
//
// Binary ops broadcast a (1,C), (R,1) or (1,1) operand against an (R,C) one.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var sin(const Var& a);
Var cos(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var leaky_relu(const Var& a, double slope);

// ---- linear algebra and shape ----------------------------------------------

/// op(a) * op(b) with optional transposes.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var transpose(const Var& a);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var expand(const Var& a, Eigen::Index rows, Eigen::Index cols);
/// Sums a broadcast gradient back to the given shape.
Var reduce_to(const Var& g, Eigen::Index rows, Eigen::Index cols);

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// Column sums, shape (1, C).
Var sum_rows(const Var& a);
/// Row sums, shape (R, 1).
Var sum_cols(const Var& a);

Var softmax_rows(const Var& a);

// ---- gather / scatter ------------------------------------------------------

/// out(r, t*C + c) = a(idx(r, t), c); adjoint of scatter_add.
Var gather(const Var& a, const IndexTablePtr& idx);
/// out(idx(r, t), c) += a(r, t*C + c); result has `out_rows` rows.
Var scatter_add(const Var& a, const IndexTablePtr& idx, Eigen::Index out_rows);

// ---- convenience operators -------------------------------------------------

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

/// Mean of squared differences.
Var mse(const Var& a, const Var& b);

}  // namespace sfe::ad

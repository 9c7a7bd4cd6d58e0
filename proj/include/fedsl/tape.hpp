#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "fedsl/param_vector.hpp"

namespace fedsl {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Eigen::MatrixXd& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Record-then-replay reverse-mode differentiation over dense matrices.
///
/// Every op evaluates eagerly and appends a node holding its value and a
/// closure that maps the node's output gradient onto its parents. Nodes
/// whose ancestry contains no parameter carry no closure. Any non-finite
/// value produced by an op raises NumericError naming the op.
class Tape {
 public:
  /// Receives the output gradient and the output value of the node being replayed.
  using Backward =
      std::function<void(Tape&, const Eigen::MatrixXd& grad, const Eigen::MatrixXd& value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Eigen::MatrixXd value);
  Var scalar_constant(double value);

  /// Leaf bound to one segment of `params`; its gradient lands in that segment.
  Var parameter(const ParamVector& params, std::size_t segment);

  /// Appends a derived node. `backward` is dropped unless some parent needs a gradient.
  Var record(const char* op, Eigen::MatrixXd value, std::initializer_list<Var> parents,
             Backward backward);
  Var record(const char* op, Eigen::MatrixXd value, std::span<const Var> parents,
             Backward backward);

  const Eigen::MatrixXd& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Adds `g` into the gradient accumulator of `v` (no-op for constants).
  template <class Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  void accumulate_at(Var v, Eigen::Index row, Eigen::Index col, double g);

  /// Reverse sweep from a 1x1 node; returns d(loss)/d(params) in the layout
  /// of `params`. Segments never bound on this tape get zero gradient.
  Gradient backward(Var loss, const ParamVector& params);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    Backward backward;
    const char* op = "";
    int segment = -1;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

// Elementwise and linear algebra ops. Shapes must agree exactly unless the
// op name says otherwise; violations throw std::invalid_argument.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(double s, Var a);
Var cwise_product(Var a, Var b);
Var matmul(Var a, Var b);
/// a * b^T, the natural shape for row-per-timestep inputs against weight matrices.
Var matmul_nt(Var a, Var b);
/// Adds column vector `bias` (n x 1) to every row of `a` (r x n).
Var add_bias_rows(Var a, Var bias);
Var tanh(Var a);
Var sigmoid(Var a);
Var log(Var a);
Var sum(Var a);
Var logsumexp(Var a);
Var log_softmax_rows(Var a);
/// Column vector log-softmax of an n x 1 node.
Var log_softmax(Var a);
Var dot(Var a, const Eigen::MatrixXd& weights);
Var element(Var a, Eigen::Index row, Eigen::Index col);
/// Stacks 1x1 nodes into an n x 1 column.
Var stack(std::span<const Var> scalars);
/// Selects rows of `table` by index (embedding lookup).
Var gather_rows(Var table, std::span<const int> rows);
/// Row t*b.rows()+u of the result is a.row(t) + b.row(u).
Var pair_sum(Var a, Var b);
/// Rows in reverse order.
Var reverse_rows(Var a);
/// Value copy with no gradient path.
Var stop_gradient(Var a);

/// Single-gate recurrent layer over a sequence. `input_proj` is T x 2H (row t
/// holds the candidate pre-activation followed by the gate pre-activation
/// from the input side), `recurrent` is 2H x H. Returns T x H hidden states:
///   a_t = input_proj_t + recurrent * h_{t-1}
///   c_t = tanh(a_t[0:H]), z_t = sigmoid(a_t[H:2H])
///   h_t = (1 - z_t) * h_{t-1} + z_t * c_t,  h_{-1} = 0
Var gated_recurrence(Var input_proj, Var recurrent);

/// One step of the cell above outside any tape; shared by inference paths.
Eigen::VectorXd gated_cell_step(const Eigen::Ref<const Eigen::VectorXd>& input_proj,
                                const Eigen::MatrixXd& recurrent,
                                const Eigen::Ref<const Eigen::VectorXd>& h_prev);

template <class Derived>
double logsumexp_of(const Eigen::MatrixBase<Derived>& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace fedsl

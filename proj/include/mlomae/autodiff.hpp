#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mlomae/types.hpp"

namespace mlomae::ad {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;
};

// Append-only record of operations for first-order reverse mode.
//
// Nodes are stored in creation order, so operands always precede their
// consumers and a reverse sweep is a valid topological order. One tape is
// meant to be used from one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var scalar(double value);
  // Leaf tracked by name. Registering the same name twice returns the same
  // leaf (the value given the second time is ignored).
  Var param(const std::string& name, const Matrix& value);
  // Registers every tensor of a map under `prefix + name`.
  std::map<std::string, Var> params(const TensorMap& tensors, const std::string& prefix = "");

  // Gradients of a scalar loss with respect to every registered parameter.
  // Unreached parameters get explicit zero entries. The sweep resets all
  // accumulators first, so calling it twice gives identical results.
  GradMap backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Matrix value, std::vector<std::size_t> operands, BackwardFn backward);
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> operands;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
  std::unordered_map<std::string, std::size_t> param_ids_;
};

// --- operators ------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// a[m×n] + bias[1×n] on every row.
Var add_row(Var a, Var bias);
Var relu(Var a);
// Gradient passes where lo <= x <= hi, zero elsewhere.
Var clamp(Var a, double lo, double hi);
Var sigmoid(Var a);
Var softmax_rows(Var a);
// Normalizes along the last axis with biased variance, then gamma/beta [1×d].
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
Var sum(Var a);
Var mean(Var a);
// axis 0 collapses rows (result 1×n), axis 1 collapses columns (result m×1).
Var sum(Var a, int axis);
Var mean(Var a, int axis);
Var gather_rows(Var a, const IndexList& idx);
Var reshape(Var a, Index rows, Index cols);
Var slice_cols(Var a, Index start, Index count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
// Mean over rows of -log softmax(logits)[label].
Var cross_entropy_logits(Var logits, const IndexList& labels);

// Rows are stacked in consecutive groups of `group` (one group per sample).
// Scaled dot-product attention inside each group and each of `heads` column
// slices: softmax(q k^T / sqrt(d_head)) v. Shapes [B·group × d].
Var grouped_attention(Var q, Var k, Var v, Index group, Index heads);
// Mean of each group of `group` consecutive rows: [B·group × d] -> [B × d].
Var group_mean(Var a, Index group);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// Numerically stable logistic function on plain values.
double stable_sigmoid(double x);

// --- gradient checking ----------------------------------------------------

// Scalar function of one input tensor, built on the supplied tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  Matrix analytic;
  Matrix numeric;
};

// Compares reverse-mode gradients against central differences
// (f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps). Relative error per coordinate uses
// max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckResult grad_check(const ScalarFn& f, const Matrix& x, double eps = 1e-5);

}  // namespace mlomae::ad

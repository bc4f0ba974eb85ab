#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every op records a closure that scatters the output gradient
// into its inputs; backward() replays them in reverse topological order.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace ovseg::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Empty until a backward pass reaches this node.
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// While alive on the current thread, ops record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

Var constant(Matrix value);
Var parameter(Matrix value);
Var detach(const Var& x);

// Seeds a 1x1 root with 1 and propagates.
void backward(const Var& root);
void backward(std::span<const Var> roots, std::span<const Matrix> seeds);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& x);
Var linear(const Var& x, const Var& weight, const Var& bias);  // x W + b, bias may be undefined

// Elementwise and broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_row(const Var& x, const Var& row);       // x + 1 row broadcast
Var div_rows(const Var& x, const Var& divisor);  // x_ij / d_i, d is n x 1
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
Var mul_scalar(const Var& x, const Var& s);  // s is 1x1
Var exp(const Var& x);
Var log(const Var& x);
Var sigmoid(const Var& x);
Var gelu(const Var& x);

// Reductions.
Var sum(const Var& x);
Var mean(const Var& x);
Var sum_rows(const Var& x);   // column sums, 1 x cols
Var mean_rows(const Var& x);  // 1 x cols
Var sum_cols(const Var& x);   // row sums, rows x 1

// Shape.
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, Index start, Index count);
Var gather_rows(const Var& x, std::span<const int> rows);
Var gather_cols(const Var& x, std::span<const int> cols);
Var row(const Var& x, Index i);

// Neural-network primitives.
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Rows rescaled to unit L2 norm; throws NumericError on a zero row.
Var l2_normalize_rows(const Var& x);
// mean_i -log softmax(logits_i)[i] for a square logit matrix.
Var cross_entropy_diagonal(const Var& logits);

struct AttentionOptions {
  int heads = 1;
  // Only the first key_len keys are attended; -1 means all.
  Index key_len = -1;
  double scale = 1.0;
};
// Multi-head scaled dot-product attention over already-projected q, k, v.
// q: n x D, k and v: m x D. Heads split the D columns evenly.
Var attention(const Var& q, const Var& k, const Var& v, const AttentionOptions& opts,
              std::vector<Matrix>* weights_out = nullptr);

}  // namespace ovseg::ag

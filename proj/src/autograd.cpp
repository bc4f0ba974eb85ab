#include "ovseg/autograd.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>

#include "ovseg/error.hpp"

namespace ovseg::ag {
namespace {

thread_local bool g_grad_enabled = true;

using Backward = std::function<void(Node&)>;

Var make(Matrix value, std::initializer_list<Var> inputs, Backward bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const Var& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(bw);
    }
  }
  return Var(std::move(node));
}

Var make_n(Matrix value, std::span<const Var> inputs, Backward bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Var& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(bw);
    }
  }
  return Var(std::move(node));
}

inline bool wants(const Node& self, size_t i) { return self.inputs[i]->requires_grad; }
inline Node& in(Node& self, size_t i) { return *self.inputs[i]; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

void Node::accumulate(const Matrix& g) { accumulate_expr(g); }

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw UsageError("item() on non-scalar");
  return node_->value(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var detach(const Var& x) { return constant(x.value()); }

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw UsageError("backward: root must be scalar");
  Matrix seed = Matrix::Ones(1, 1);
  backward(std::span<const Var>(&root, 1), std::span<const Matrix>(&seed, 1));
}

void backward(std::span<const Var> roots, std::span<const Matrix> seeds) {
  if (roots.size() != seeds.size()) throw UsageError("backward: roots/seeds size mismatch");
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  for (const Var& r : roots) {
    if (!r.defined() || !r.requires_grad()) continue;
    Node* start = r.node().get();
    if (!visited.insert(start).second) continue;
    stack.emplace_back(start, 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  for (size_t i = 0; i < roots.size(); ++i) {
    if (!roots[i].defined() || !roots[i].requires_grad()) continue;
    require_same_shape(roots[i], constant(seeds[i]), "backward seed");
    roots[i].node()->accumulate(seeds[i]);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    if (node->grad.size() != 0) node->backward(*node);
    node->grad.resize(0, 0);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dimension mismatch");
  return make(a.value() * b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad * in(self, 1).value.transpose());
    if (wants(self, 1)) in(self, 1).accumulate_expr(in(self, 0).value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw UsageError("matmul_nt: inner dimension mismatch");
  return make(a.value() * b.value().transpose(), {a, b}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad * in(self, 1).value);
    if (wants(self, 1)) in(self, 1).accumulate_expr(self.grad.transpose() * in(self, 0).value);
  });
}

Var transpose(const Var& x) {
  return make(x.value().transpose(), {x}, [](Node& self) {
    in(self, 0).accumulate_expr(self.grad.transpose());
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (x.cols() != weight.rows()) throw UsageError("linear: input width mismatch");
  Matrix out = x.value() * weight.value();
  if (bias.defined()) {
    if (bias.rows() != 1 || bias.cols() != weight.cols()) throw UsageError("linear: bad bias");
    out.rowwise() += bias.value().row(0);
    return make(std::move(out), {x, weight, bias}, [](Node& self) {
      if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad * in(self, 1).value.transpose());
      if (wants(self, 1)) in(self, 1).accumulate_expr(in(self, 0).value.transpose() * self.grad);
      if (wants(self, 2)) in(self, 2).accumulate_expr(self.grad.colwise().sum());
    });
  }
  return make(std::move(out), {x, weight}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad * in(self, 1).value.transpose());
    if (wants(self, 1)) in(self, 1).accumulate_expr(in(self, 0).value.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate(self.grad);
    if (wants(self, 1)) in(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate(self.grad);
    if (wants(self, 1)) in(self, 1).accumulate_expr(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad.cwiseProduct(in(self, 1).value));
    if (wants(self, 1)) in(self, 1).accumulate_expr(self.grad.cwiseProduct(in(self, 0).value));
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  return make(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& self) {
    const Matrix& bv = in(self, 1).value;
    if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad.cwiseQuotient(bv));
    if (wants(self, 1)) {
      in(self, 1).accumulate_expr(-self.grad.cwiseProduct(self.value).cwiseQuotient(bv));
    }
  });
}

Var add_row(const Var& x, const Var& r) {
  if (r.rows() != 1 || r.cols() != x.cols()) throw UsageError("add_row: bad row shape");
  Matrix out = x.value();
  out.rowwise() += r.value().row(0);
  return make(std::move(out), {x, r}, [](Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate(self.grad);
    if (wants(self, 1)) in(self, 1).accumulate_expr(self.grad.colwise().sum());
  });
}

Var div_rows(const Var& x, const Var& d) {
  if (d.cols() != 1 || d.rows() != x.rows()) throw UsageError("div_rows: divisor must be n x 1");
  Matrix out = x.value();
  for (Index i = 0; i < out.rows(); ++i) out.row(i) /= d.value()(i, 0);
  return make(std::move(out), {x, d}, [](Node& self) {
    const Matrix& dv = in(self, 1).value;
    if (wants(self, 0)) {
      Matrix g = self.grad;
      for (Index i = 0; i < g.rows(); ++i) g.row(i) /= dv(i, 0);
      in(self, 0).accumulate(g);
    }
    if (wants(self, 1)) {
      Matrix g(dv.rows(), 1);
      for (Index i = 0; i < g.rows(); ++i) {
        g(i, 0) = -self.grad.row(i).dot(self.value.row(i)) / dv(i, 0);
      }
      in(self, 1).accumulate(g);
    }
  });
}

Var scale(const Var& x, double s) {
  return make(x.value() * s, {x}, [s](Node& self) { in(self, 0).accumulate_expr(self.grad * s); });
}

Var add_scalar(const Var& x, double s) {
  return make(x.value().array() + s, {x}, [](Node& self) { in(self, 0).accumulate(self.grad); });
}

Var mul_scalar(const Var& x, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw UsageError("mul_scalar: scalar must be 1x1");
  return make(x.value() * s.item(), {x, s}, [](Node& self) {
    const double sv = in(self, 1).value(0, 0);
    if (wants(self, 0)) in(self, 0).accumulate_expr(self.grad * sv);
    if (wants(self, 1)) {
      Matrix g(1, 1);
      g(0, 0) = self.grad.cwiseProduct(in(self, 0).value).sum();
      in(self, 1).accumulate(g);
    }
  });
}

Var exp(const Var& x) {
  return make(x.value().array().exp().matrix(), {x}, [](Node& self) {
    in(self, 0).accumulate_expr(self.grad.cwiseProduct(self.value));
  });
}

Var log(const Var& x) {
  return make(x.value().array().log().matrix(), {x}, [](Node& self) {
    in(self, 0).accumulate_expr(self.grad.cwiseQuotient(in(self, 0).value));
  });
}

Var sigmoid(const Var& x) {
  Matrix y = x.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return make(std::move(y), {x}, [](Node& self) {
    Matrix d = self.value.array() * (1.0 - self.value.array());
    in(self, 0).accumulate_expr(self.grad.cwiseProduct(d));
  });
}

Var gelu(const Var& x) {
  Matrix y = x.value().unaryExpr(
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
  return make(std::move(y), {x}, [](Node& self) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = in(self, 0).value.unaryExpr([inv_sqrt_2pi](double v) {
      return 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)) +
             v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    in(self, 0).accumulate_expr(self.grad.cwiseProduct(d));
  });
}

Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make(std::move(out), {x}, [](Node& self) {
    Node& src = in(self, 0);
    src.accumulate_expr(Matrix::Constant(src.value.rows(), src.value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var sum_rows(const Var& x) {
  return make(x.value().colwise().sum(), {x}, [](Node& self) {
    Node& src = in(self, 0);
    src.accumulate_expr(self.grad.replicate(src.value.rows(), 1));
  });
}

Var mean_rows(const Var& x) { return scale(sum_rows(x), 1.0 / static_cast<double>(x.rows())); }

Var sum_cols(const Var& x) {
  return make(x.value().rowwise().sum(), {x}, [](Node& self) {
    Node& src = in(self, 0);
    src.accumulate_expr(self.grad.replicate(1, src.value.cols()));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts[0].cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw UsageError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_n(std::move(out), parts, [](Node& self) {
    Index at = 0;
    for (auto& src : self.inputs) {
      const Index r = src->value.rows();
      if (src->requires_grad) src->accumulate_expr(self.grad.middleRows(at, r));
      at += r;
    }
  });
}

Var slice_rows(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw UsageError("slice_rows: out of range");
  return make(x.value().middleRows(start, count), {x}, [start, count](Node& self) {
    Node& src = in(self, 0);
    Matrix g = Matrix::Zero(src.value.rows(), src.value.cols());
    g.middleRows(start, count) = self.grad;
    src.accumulate(g);
  });
}

Var gather_rows(const Var& x, std::span<const int> rows) {
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows()) throw UsageError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.value().row(idx[i]);
  }
  return make(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& src = in(self, 0);
    Matrix g = Matrix::Zero(src.value.rows(), src.value.cols());
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    src.accumulate(g);
  });
}

Var gather_cols(const Var& x, std::span<const int> cols) {
  std::vector<int> idx(cols.begin(), cols.end());
  Matrix out(x.rows(), static_cast<Index>(idx.size()));
  for (size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= x.cols()) throw UsageError("gather_cols: index out of range");
    out.col(static_cast<Index>(j)) = x.value().col(idx[j]);
  }
  return make(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& src = in(self, 0);
    Matrix g = Matrix::Zero(src.value.rows(), src.value.cols());
    for (size_t j = 0; j < idx.size(); ++j) g.col(idx[j]) += self.grad.col(static_cast<Index>(j));
    src.accumulate(g);
  });
}

Var row(const Var& x, Index i) { return slice_rows(x, i, 1); }

namespace {

void softmax_inplace(Eigen::Ref<Matrix> m) {
  for (Index i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const double mx = r.maxCoeff();
    r = (r.array() - mx).exp();
    r /= r.sum();
  }
}

}  // namespace

Var softmax_rows(const Var& x) {
  Matrix y = x.value();
  softmax_inplace(y);
  return make(std::move(y), {x}, [](Node& self) {
    const Matrix& y = self.value;
    Matrix gy = self.grad.cwiseProduct(y);
    Eigen::VectorXd dots = gy.rowwise().sum();
    Matrix g = gy - (y.array().colwise() * dots.array()).matrix();
    in(self, 0).accumulate(g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (gamma.cols() != d || beta.cols() != d) throw UsageError("layer_norm: width mismatch");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const auto r = x.value().row(i);
    const double mu = r.mean();
    const double var = (r.array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (r.array() - mu) * inv_std(i);
  }
  Matrix y = xhat.array().rowwise() * gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  return make(std::move(y), {x, gamma, beta},
              [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                const Matrix& g = self.grad;
                if (wants(self, 1)) in(self, 1).accumulate_expr(g.cwiseProduct(xhat).colwise().sum());
                if (wants(self, 2)) in(self, 2).accumulate_expr(g.colwise().sum());
                if (wants(self, 0)) {
                  Matrix gx = g.array().rowwise() * in(self, 1).value.row(0).array();
                  const double inv_d = 1.0 / static_cast<double>(gx.cols());
                  for (Index i = 0; i < gx.rows(); ++i) {
                    const double m1 = gx.row(i).sum() * inv_d;
                    const double m2 = gx.row(i).dot(xhat.row(i)) * inv_d;
                    gx.row(i) = (gx.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
                  }
                  in(self, 0).accumulate(gx);
                }
              });
}

Var l2_normalize_rows(const Var& x) {
  Matrix y = x.value();
  Eigen::VectorXd norms(y.rows());
  for (Index i = 0; i < y.rows(); ++i) {
    norms(i) = y.row(i).norm();
    if (!(norms(i) > 1e-12)) throw NumericError("degenerate embedding");
    y.row(i) /= norms(i);
  }
  return make(std::move(y), {x}, [norms = std::move(norms)](Node& self) {
    const Matrix& y = self.value;
    Matrix g = self.grad;
    for (Index i = 0; i < g.rows(); ++i) {
      const double proj = g.row(i).dot(y.row(i));
      g.row(i) = (g.row(i) - proj * y.row(i)) / norms(i);
    }
    in(self, 0).accumulate(g);
  });
}

Var cross_entropy_diagonal(const Var& logits) {
  const Index b = logits.rows();
  if (logits.cols() != b || b == 0) throw UsageError("cross_entropy_diagonal: logits must be square");
  Matrix p = logits.value();
  softmax_inplace(p);
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    const auto r = logits.value().row(i);
    const double mx = r.maxCoeff();
    const double lse = mx + std::log((r.array() - mx).exp().sum());
    loss += lse - r(i);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(b);
  return make(std::move(out), {logits}, [p = std::move(p)](Node& self) {
    const Index b = p.rows();
    Matrix g = p;
    g.diagonal().array() -= 1.0;
    g *= self.grad(0, 0) / static_cast<double>(b);
    in(self, 0).accumulate(g);
  });
}

Var attention(const Var& q, const Var& k, const Var& v, const AttentionOptions& opts,
              std::vector<Matrix>* weights_out) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw UsageError("attention: shape mismatch");
  if (opts.heads < 1 || d % opts.heads != 0) throw UsageError("attention: heads must divide width");
  const Index m = opts.key_len < 0 ? k.rows() : opts.key_len;
  if (m < 1 || m > k.rows()) throw UsageError("attention: key_len out of range");
  const Index dh = d / opts.heads;
  const Index n = q.rows();
  Matrix ctx(n, d);
  std::vector<Matrix> probs(static_cast<size_t>(opts.heads));
  for (int h = 0; h < opts.heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().topRows(m).middleCols(h * dh, dh);
    const auto vh = v.value().topRows(m).middleCols(h * dh, dh);
    Matrix s = (qh * kh.transpose()) * opts.scale;
    softmax_inplace(s);
    ctx.middleCols(h * dh, dh).noalias() = s * vh;
    probs[static_cast<size_t>(h)] = std::move(s);
  }
  if (weights_out) *weights_out = probs;
  const double sc = opts.scale;
  return make(std::move(ctx), {q, k, v}, [probs = std::move(probs), m, dh, sc](Node& self) {
    const Matrix& qv = in(self, 0).value;
    const Matrix& kv = in(self, 1).value;
    const Matrix& vv = in(self, 2).value;
    Matrix gq, gk, gv;
    if (wants(self, 0)) gq = Matrix::Zero(qv.rows(), qv.cols());
    if (wants(self, 1)) gk = Matrix::Zero(kv.rows(), kv.cols());
    if (wants(self, 2)) gv = Matrix::Zero(vv.rows(), vv.cols());
    for (size_t h = 0; h < probs.size(); ++h) {
      const Index c0 = static_cast<Index>(h) * dh;
      const Matrix& p = probs[h];
      const auto gctx = self.grad.middleCols(c0, dh);
      if (wants(self, 2)) gv.topRows(m).middleCols(c0, dh).noalias() = p.transpose() * gctx;
      if (!wants(self, 0) && !wants(self, 1)) continue;
      Matrix gp = gctx * vv.topRows(m).middleCols(c0, dh).transpose();
      Matrix gpp = gp.cwiseProduct(p);
      Eigen::VectorXd dots = gpp.rowwise().sum();
      Matrix gs = (gpp - (p.array().colwise() * dots.array()).matrix()) * sc;
      if (wants(self, 0)) gq.middleCols(c0, dh).noalias() = gs * kv.topRows(m).middleCols(c0, dh);
      if (wants(self, 1)) gk.topRows(m).middleCols(c0, dh).noalias() = gs.transpose() * qv.middleCols(c0, dh);
    }
    if (wants(self, 0)) in(self, 0).accumulate(gq);
    if (wants(self, 1)) in(self, 1).accumulate(gk);
    if (wants(self, 2)) in(self, 2).accumulate(gv);
  });
}

}  // namespace ovseg::ag

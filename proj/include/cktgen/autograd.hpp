#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a handle to a graph node holding a value and, after backward(), a
// gradient. Operations record a closure that pushes the output gradient into
// their inputs. Sequences of different lengths are packed row-wise ("ragged"
// layout) and described by Segments; attention is the only op that needs to
// know about them.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "cktgen/error.hpp"
#include "cktgen/rng.hpp"

namespace cktgen::ag {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    grad += g;
  }
  Matrix& grad_buffer() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

inline bool& grad_mode_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

// Suspends graph recording for the current thread (inference).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_disabled()) { grad_mode_disabled() = true; }
  ~NoGradGuard() { grad_mode_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var scalar(double x) { return Var(Matrix::Constant(1, 1, x)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Gradient accumulated by backward(); zeros if none reached this node.
  Matrix grad() const {
    if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var record(Matrix value, std::initializer_list<Var> inputs, std::function<void(Node&)> fn) {
  bool needs = false;
  if (!grad_mode_disabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

inline Var record(Matrix value, const std::vector<Var>& inputs, std::function<void(Node&)> fn) {
  bool needs = false;
  if (!grad_mode_disabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

inline void push(const Var& v, const Matrix& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ArgumentError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
}

}  // namespace detail

inline void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw ArgumentError("backward() needs a scalar");
  if (!requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  return detail::record(a.value() + b.value(), {a, b}, [a, b](Node& n) {
    detail::push(a, n.grad);
    detail::push(b, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::record(a.value() - b.value(), {a, b}, [a, b](Node& n) {
    detail::push(a, n.grad);
    detail::push(b, -n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  return detail::record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Node& n) {
    if (a.requires_grad()) detail::push(a, n.grad.cwiseProduct(b.value()));
    if (b.requires_grad()) detail::push(b, n.grad.cwiseProduct(a.value()));
  });
}

inline Var scale(const Var& a, double s) {
  return detail::record(a.value() * s, {a}, [a, s](Node& n) { detail::push(a, n.grad * s); });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::record(a.value().array() + s, {a}, [a](Node& n) { detail::push(a, n.grad); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

inline Var exp(const Var& a) {
  Matrix y = a.value().array().exp();
  return detail::record(y, {a}, [a, y](Node& n) { detail::push(a, n.grad.cwiseProduct(y)); });
}

inline Var log(const Var& a) {
  return detail::record(a.value().array().log(), {a},
                        [a](Node& n) { detail::push(a, n.grad.cwiseQuotient(a.value())); });
}

inline Var square(const Var& a) {
  return detail::record(a.value().array().square(), {a},
                        [a](Node& n) { detail::push(a, 2.0 * n.grad.cwiseProduct(a.value())); });
}

inline Var abs(const Var& a) {
  return detail::record(a.value().cwiseAbs(), {a}, [a](Node& n) {
    detail::push(a, n.grad.cwiseProduct(Matrix(a.value().array().sign())));
  });
}

inline Var tanh(const Var& a) {
  Matrix y = a.value().array().tanh();
  return detail::record(y, {a}, [a, y](Node& n) {
    detail::push(a, n.grad.cwiseProduct(Matrix(1.0 - y.array().square())));
  });
}

inline Var sigmoid(const Var& a) {
  Matrix y = (1.0 + (-a.value().array()).exp()).inverse();
  return detail::record(y, {a}, [a, y](Node& n) {
    detail::push(a, n.grad.cwiseProduct(Matrix(y.array() * (1.0 - y.array()))));
  });
}

inline Var relu(const Var& a) {
  return detail::record(a.value().cwiseMax(0.0), {a}, [a](Node& n) {
    detail::push(a, Matrix((a.value().array() > 0.0).select(n.grad.array(), 0.0)));
  });
}

// tanh-approximated GELU; smooth everywhere, which keeps finite-difference
// checks meaningful.
inline Var gelu(const Var& a) {
  static constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  static constexpr double c = 0.044715;
  const auto& x = a.value().array();
  Matrix t = (k * (x + c * x.cube())).tanh();
  Matrix y = 0.5 * x * (1.0 + t.array());
  return detail::record(y, {a}, [a, t](Node& n) {
    const auto& x = a.value().array();
    const auto dt = (1.0 - t.array().square()) * k * (1.0 + 3.0 * c * x.square());
    detail::push(a, Matrix(n.grad.array() * (0.5 * (1.0 + t.array()) + 0.5 * x * dt)));
  });
}

// Elementwise smooth-L1 with transition point beta.
inline Var smooth_l1(const Var& e, double beta) {
  const auto& x = e.value().array();
  Matrix y = (x.abs() < beta).select(0.5 * x.square() / beta, x.abs() - 0.5 * beta);
  return detail::record(y, {e}, [e, beta](Node& n) {
    const auto& x = e.value().array();
    Matrix d = (x.abs() < beta).select(x / beta, x.sign());
    detail::push(e, n.grad.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimensions differ");
  return detail::record(a.value() * b.value(), {a, b}, [a, b](Node& n) {
    if (a.requires_grad()) detail::push(a, n.grad * b.value().transpose());
    if (b.requires_grad()) detail::push(b, a.value().transpose() * n.grad);
  });
}

inline Var transpose(const Var& a) {
  return detail::record(a.value().transpose(), {a}, [a](Node& n) { detail::push(a, n.grad.transpose()); });
}

// x W + b with b broadcast over rows.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
    throw ArgumentError("linear: shape mismatch");
  Matrix y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  return detail::record(std::move(y), {x, w, b}, [x, w, b](Node& n) {
    if (x.requires_grad()) detail::push(x, n.grad * w.value().transpose());
    if (w.requires_grad()) detail::push(w, x.value().transpose() * n.grad);
    if (b.requires_grad()) detail::push(b, n.grad.colwise().sum());
  });
}

// Adds a 1 x C row to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ArgumentError("add_row: shape mismatch");
  Matrix y = a.value();
  y.rowwise() += row.value().row(0);
  return detail::record(std::move(y), {a, row}, [a, row](Node& n) {
    detail::push(a, n.grad);
    if (row.requires_grad()) detail::push(row, n.grad.colwise().sum());
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  return detail::record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Node& n) {
    detail::push(a, Matrix::Constant(a.rows(), a.cols(), n.grad(0, 0)));
  });
}

inline Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return detail::record(Matrix::Constant(1, 1, a.value().sum() * inv), {a}, [a, inv](Node& n) {
    detail::push(a, Matrix::Constant(a.rows(), a.cols(), n.grad(0, 0) * inv));
  });
}

// Row sums: R x C -> R x 1.
inline Var sum_rows(const Var& a) {
  return detail::record(a.value().rowwise().sum(), {a}, [a](Node& n) {
    Matrix g(a.rows(), a.cols());
    for (Index r = 0; r < a.rows(); ++r) g.row(r).setConstant(n.grad(r, 0));
    detail::push(a, g);
  });
}

// Main diagonal of a square matrix as a column.
inline Var diagonal(const Var& a) {
  if (a.rows() != a.cols()) throw ArgumentError("diagonal: matrix not square");
  return detail::record(a.value().diagonal(), {a}, [a](Node& n) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    g.diagonal() = n.grad.col(0);
    detail::push(a, g);
  });
}

// ---------------------------------------------------------------- shape ops

inline Var concat_cols(const std::vector<Var>& parts) {
  Index rows = parts.at(0).rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ArgumentError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::record(std::move(y), parts, [parts](Node& n) {
    Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) detail::push(p, n.grad.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  Index rows = 0, cols = parts.at(0).cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ArgumentError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix y(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::record(std::move(y), parts, [parts](Node& n) {
    Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) detail::push(p, n.grad.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || start + count > a.cols()) throw ArgumentError("slice_cols: out of range");
  return detail::record(a.value().middleCols(start, count), {a}, [a, start, count](Node& n) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    g.middleCols(start, count) = n.grad;
    detail::push(a, g);
  });
}

// Selects rows by index (repeats allowed); also serves as embedding lookup.
inline Var gather_rows(const Var& a, std::vector<Index> idx) {
  Matrix y(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.rows()) throw ArgumentError("gather_rows: index out of range");
    y.row(static_cast<Index>(k)) = a.value().row(idx[k]);
  }
  return detail::record(std::move(y), {a}, [a, idx = std::move(idx)](Node& n) {
    Matrix& g = a.node()->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k) g.row(idx[k]) += n.grad.row(static_cast<Index>(k));
  });
}

// Row-major reinterpretation.
inline Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ArgumentError("reshape: size mismatch");
  Matrix y = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return detail::record(std::move(y), {a}, [a](Node& n) {
    detail::push(a, Eigen::Map<const Matrix>(n.grad.data(), a.rows(), a.cols()));
  });
}

// out_r = sum_s w_rs x_s for a sparse list of (r, s, w) triples.
struct RowMix {
  Index out_rows = 0;
  std::vector<Index> target, source;
  std::vector<double> weight;

  void add(Index r, Index s, double w) {
    target.push_back(r);
    source.push_back(s);
    weight.push_back(w);
  }
};

inline Var row_mix(const Var& x, std::shared_ptr<const RowMix> mix) {
  Matrix y = Matrix::Zero(mix->out_rows, x.cols());
  for (std::size_t k = 0; k < mix->target.size(); ++k) y.row(mix->target[k]) += mix->weight[k] * x.value().row(mix->source[k]);
  return detail::record(std::move(y), {x}, [x, mix](Node& n) {
    Matrix& g = x.node()->grad_buffer();
    for (std::size_t k = 0; k < mix->target.size(); ++k) g.row(mix->source[k]) += mix->weight[k] * n.grad.row(mix->target[k]);
  });
}

// ---------------------------------------------------------------- normalization

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Index r = x.rows(), c = x.cols();
  Matrix xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix y = xhat.array().rowwise() * gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  return detail::record(std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Node& n) {
    const Index c = x.cols();
    if (gamma.requires_grad()) detail::push(gamma, n.grad.cwiseProduct(xhat).colwise().sum());
    if (beta.requires_grad()) detail::push(beta, n.grad.colwise().sum());
    if (x.requires_grad()) {
      Matrix dxhat = n.grad.array().rowwise() * gamma.value().row(0).array();
      Matrix dx(x.rows(), c);
      for (Index i = 0; i < x.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
      detail::push(x, dx);
    }
  });
}

// Unit-L2 rows. Zero or non-finite rows are a hard error.
inline Var normalize_rows(const Var& x) {
  Eigen::VectorXd norms = x.value().rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (!std::isfinite(norms(i))) throw NumericError("non-finite latent vector in cosine similarity");
    if (!(norms(i) > 0.0)) throw NumericError("zero-norm latent vector in cosine similarity");
  }
  Matrix y = x.value().array().colwise() / norms.array();
  return detail::record(y, {x}, [x, y, norms](Node& n) {
    Matrix g(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      const double d = n.grad.row(i).dot(y.row(i));
      g.row(i) = (n.grad.row(i) - d * y.row(i)) / norms(i);
    }
    detail::push(x, g);
  });
}

// Row-wise log-softmax. Entries with mask == false are excluded (treated as
// -inf logits); their output is -inf and they receive no gradient.
inline Var log_softmax_rows(const Var& x, const BoolMatrix* mask = nullptr) {
  const Index r = x.rows(), c = x.cols();
  if (mask && (mask->rows() != r || mask->cols() != c)) throw ArgumentError("log_softmax_rows: mask shape");
  Matrix y(r, c);
  Matrix p(r, c);
  for (Index i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < c; ++j)
      if (!mask || (*mask)(i, j)) mx = std::max(mx, x.value()(i, j));
    double s = 0.0;
    for (Index j = 0; j < c; ++j)
      if (!mask || (*mask)(i, j)) s += std::exp(x.value()(i, j) - mx);
    const double lse = mx + std::log(s);
    for (Index j = 0; j < c; ++j) {
      const bool on = !mask || (*mask)(i, j);
      y(i, j) = on ? x.value()(i, j) - lse : -std::numeric_limits<double>::infinity();
      p(i, j) = on ? std::exp(y(i, j)) : 0.0;
    }
  }
  BoolMatrix m = mask ? *mask : BoolMatrix::Constant(r, c, true);
  return detail::record(std::move(y), {x}, [x, p, m](Node& n) {
    Matrix g(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      double s = 0.0;
      for (Index j = 0; j < x.cols(); ++j)
        if (m(i, j)) s += n.grad(i, j);
      for (Index j = 0; j < x.cols(); ++j) g(i, j) = m(i, j) ? n.grad(i, j) - p(i, j) * s : 0.0;
    }
    detail::push(x, g);
  });
}

// ---------------------------------------------------------------- losses

// sum_r w_r * CE(softmax(logits_r), target_r); rows with w_r == 0 are skipped.
inline Var weighted_cross_entropy(const Var& logits, std::vector<int> targets, std::vector<double> weights) {
  const Index r = logits.rows(), c = logits.cols();
  if (static_cast<Index>(targets.size()) != r || static_cast<Index>(weights.size()) != r)
    throw ArgumentError("cross_entropy: target count mismatch");
  Matrix p(r, c);
  double loss = 0.0;
  for (Index i = 0; i < r; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= c) throw ArgumentError("cross_entropy: target class out of range");
    const double mx = logits.value().row(i).maxCoeff();
    const auto e = (logits.value().row(i).array() - mx).exp();
    const double s = e.sum();
    p.row(i) = e / s;
    loss -= weights[static_cast<std::size_t>(i)] * (logits.value()(i, t) - mx - std::log(s));
  }
  return detail::record(Matrix::Constant(1, 1, loss), {logits},
                        [logits, p, targets = std::move(targets), weights = std::move(weights)](Node& n) {
                          Matrix g = p;
                          for (Index i = 0; i < g.rows(); ++i) {
                            g(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
                            g.row(i) *= weights[static_cast<std::size_t>(i)] * n.grad(0, 0);
                          }
                          detail::push(logits, g);
                        });
}

// sum_r w_r * BCE(sigmoid(logit_r), target_r) over a column of logits.
inline Var weighted_bce_with_logits(const Var& logits, std::vector<double> targets, std::vector<double> weights) {
  if (logits.cols() != 1 || static_cast<Index>(targets.size()) != logits.rows() ||
      static_cast<Index>(weights.size()) != logits.rows())
    throw ArgumentError("bce: shape mismatch");
  double loss = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double x = logits.value()(i, 0);
    const double y = targets[static_cast<std::size_t>(i)];
    // max(x,0) - x y + log(1 + exp(-|x|))
    loss += weights[static_cast<std::size_t>(i)] * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
  }
  return detail::record(Matrix::Constant(1, 1, loss), {logits},
                        [logits, targets = std::move(targets), weights = std::move(weights)](Node& n) {
                          Matrix g(logits.rows(), 1);
                          for (Index i = 0; i < logits.rows(); ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-logits.value()(i, 0)));
                            g(i, 0) = weights[static_cast<std::size_t>(i)] * (s - targets[static_cast<std::size_t>(i)]) * n.grad(0, 0);
                          }
                          detail::push(logits, g);
                        });
}

// sum over entries of w * (pred - target)^2.
inline Var weighted_squared_error(const Var& pred, Matrix target, Matrix weights) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || weights.rows() != target.rows() ||
      weights.cols() != target.cols())
    throw ArgumentError("squared_error: shape mismatch");
  Matrix diff = pred.value() - target;
  const double loss = (diff.array().square() * weights.array()).sum();
  return detail::record(Matrix::Constant(1, 1, loss), {pred}, [pred, diff, weights](Node& n) {
    detail::push(pred, Matrix(2.0 * n.grad(0, 0) * diff.array() * weights.array()));
  });
}

// ---------------------------------------------------------------- stochastic

inline Var dropout(const Var& x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return x;
  if (!rng) throw ArgumentError("dropout needs an Rng in training mode");
  const double keep = 1.0 - rate;
  Matrix m(x.rows(), x.cols());
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return detail::record(x.value().cwiseProduct(m), {x}, [x, m](Node& n) { detail::push(x, n.grad.cwiseProduct(m)); });
}

// ---------------------------------------------------------------- attention

// Packed variable-length sequences: sequence s occupies rows
// [offset[s], offset[s] + length[s]).
struct Segments {
  std::vector<Index> offset;
  std::vector<Index> length;

  Index total() const { return offset.empty() ? 0 : offset.back() + length.back(); }
  std::size_t count() const { return offset.size(); }

  static Segments from_lengths(std::span<const Index> lengths) {
    Segments s;
    Index at = 0;
    for (Index l : lengths) {
      s.offset.push_back(at);
      s.length.push_back(l);
      at += l;
    }
    return s;
  }
};

// Scaled dot-product attention, split into `heads` column groups. Queries in
// one sequence only see keys of the same sequence; with `causal` a query at
// step t sees steps <= t.
inline Var attention(const Var& q, const Var& k, const Var& v, const Segments& seg, int heads, bool causal) {
  const Index rows = q.rows(), width = q.cols();
  if (k.rows() != rows || v.rows() != rows || k.cols() != width || v.cols() != width || seg.total() != rows)
    throw ArgumentError("attention: shape mismatch");
  if (heads <= 0 || width % heads != 0) throw ArgumentError("attention: width not divisible by heads");
  const Index dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(seg.count() * static_cast<std::size_t>(heads));
  Matrix out = Matrix::Zero(rows, width);
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const Index o = seg.offset[s], len = seg.length[s];
    for (int h = 0; h < heads; ++h) {
      const auto qs = q.value().block(o, h * dh, len, dh);
      const auto ks = k.value().block(o, h * dh, len, dh);
      const auto vs = v.value().block(o, h * dh, len, dh);
      Matrix sc = (qs * ks.transpose()) * scale;
      for (Index i = 0; i < len; ++i) {
        const Index visible = causal ? i + 1 : len;
        const double mx = sc.row(i).head(visible).maxCoeff();
        double z = 0.0;
        for (Index j = 0; j < len; ++j) {
          const double e = j < visible ? std::exp(sc(i, j) - mx) : 0.0;
          sc(i, j) = e;
          z += e;
        }
        sc.row(i) /= z;
      }
      out.block(o, h * dh, len, dh) = sc * vs;
      probs->push_back(std::move(sc));
    }
  }
  return detail::record(std::move(out), {q, k, v}, [q, k, v, seg, heads, dh, scale, probs](Node& n) {
    Matrix gq = Matrix::Zero(q.rows(), q.cols());
    Matrix gk = Matrix::Zero(k.rows(), k.cols());
    Matrix gv = Matrix::Zero(v.rows(), v.cols());
    std::size_t at = 0;
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const Index o = seg.offset[s], len = seg.length[s];
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[at++];
        const auto go = n.grad.block(o, h * dh, len, dh);
        const auto qs = q.value().block(o, h * dh, len, dh);
        const auto ks = k.value().block(o, h * dh, len, dh);
        const auto vs = v.value().block(o, h * dh, len, dh);
        gv.block(o, h * dh, len, dh) += p.transpose() * go;
        Matrix dp = go * vs.transpose();
        Matrix ds = p.array() * (dp.colwise() - dp.cwiseProduct(p).rowwise().sum()).array();
        ds *= scale;
        gq.block(o, h * dh, len, dh) += ds * ks;
        gk.block(o, h * dh, len, dh) += ds.transpose() * qs;
      }
    }
    detail::push(q, gq);
    detail::push(k, gk);
    detail::push(v, gv);
  });
}

}  // namespace cktgen::ag

#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A BasicTape records every primitive in creation order; inputs always
// precede their consumers, so a reverse sweep over the node list is a valid
// topological order for backpropagation.

#include "bincf/common.hpp"

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace bincf::ad {

template <typename Scalar>
class BasicTape;

template <typename Scalar>
class BasicVar {
 public:
  BasicVar() = default;

  [[nodiscard]] const Matrix<Scalar>& value() const { return tape_->value(*this); }
  [[nodiscard]] const Matrix<Scalar>& grad() const { return tape_->grad(*this); }
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] BasicTape<Scalar>* tape() const { return tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class BasicTape<Scalar>;
  BasicVar(BasicTape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class BasicTape {
 public:
  using Mat = Matrix<Scalar>;
  using Var = BasicVar<Scalar>;
  /// Receives the upstream gradient and the node's own forward value.
  using Backward = std::function<void(const Mat& upstream, const Mat& output)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var leaf(Mat value) { return push(std::move(value), true, {}); }
  Var constant(Mat value) { return push(std::move(value), false, {}); }

  /// Records a derived node. The backward closure is dropped when no input
  /// needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  /// Same as record() for a variable-length input list.
  Var record(Mat value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  /// Backpropagates from a 1x1 node. Gradients of earlier sweeps are cleared.
  void backward(const Var& loss) {
    check_owner(loss);
    const Mat& v = nodes_[loss.id()].value;
    if (v.rows() != 1 || v.cols() != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + std::to_string(v.rows()) + "x" +
                       std::to_string(v.cols()));
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id()].grad = Mat::Ones(1, 1);
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad, n.value);
    }
  }

  template <typename Derived>
  void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Derived>
  void accumulate(const Var& v, const Eigen::ArrayBase<Derived>& g) {
    accumulate(v, g.matrix());
  }

  [[nodiscard]] bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  [[nodiscard]] const Mat& value(const Var& v) const { return nodes_[v.id()].value; }

  /// Zero-filled when nothing flowed into the node.
  [[nodiscard]] const Mat& grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Mat value, bool requires_grad, Backward backward) {
    if (!value.allFinite()) throw NumericError("tape: non-finite value produced");
    nodes_.push_back(Node{std::move(value), Mat{}, std::move(backward), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(const Var& v) const {
    if (v.tape() != this) throw std::invalid_argument("tape: variable belongs to another tape");
  }

  // deque keeps references returned by value() stable across push_back.
  std::deque<Node> nodes_;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;

enum class BatchNormMode { train, eval };

template <typename Scalar>
struct BatchNormState {
  // All 1 x features.
  Matrix<Scalar> gamma;
  Matrix<Scalar> beta;
  Matrix<Scalar> running_mean;
  Matrix<Scalar> running_var;
  Scalar momentum = Scalar(0.9);
  Scalar epsilon = Scalar(1e-5);

  static BatchNormState fresh(Eigen::Index features) {
    BatchNormState s;
    s.gamma = Matrix<Scalar>::Ones(1, features);
    s.beta = Matrix<Scalar>::Zero(1, features);
    s.running_mean = Matrix<Scalar>::Zero(1, features);
    s.running_var = Matrix<Scalar>::Ones(1, features);
    return s;
  }
};

namespace detail {

template <typename Scalar>
void require_same_shape(const char* op, const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(shape_message(op, a, b));
}

template <typename Scalar>
void require_column(const char* op, const BasicVar<Scalar>& v, Eigen::Index rows) {
  if (v.cols() != 1 || v.rows() != rows) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(rows) + "x1 column, got " +
                     std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
  }
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (a.cols() != b.rows()) throw ShapeError(shape_message("matmul", a, b));
  auto* t = a.tape();
  Matrix<Scalar> out = a.value() * b.value();
  return t->record(std::move(out), {a, b}, [t, a, b](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    if (t->requires_grad(a)) t->accumulate(a, g * b.value().transpose());
    if (t->requires_grad(b)) t->accumulate(b, a.value().transpose() * g);
  });
}

/// `lhs` is captured by reference and must outlive the tape.
template <typename Scalar>
BasicVar<Scalar> sparse_dense_matmul(const SparseRowMatrix<Scalar>& lhs, const BasicVar<Scalar>& x) {
  if (lhs.cols() != x.rows()) throw ShapeError(shape_message("sparse_dense_matmul", lhs, x));
  auto* t = x.tape();
  Matrix<Scalar> out = lhs * x.value();
  return t->record(std::move(out), {x}, [t, x, &lhs](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(x, lhs.transpose() * g);
  });
}

template <typename Scalar>
BasicVar<Scalar> add(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_shape("add", a, b);
  auto* t = a.tape();
  return t->record(a.value() + b.value(), {a, b}, [t, a, b](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(a, g);
    t->accumulate(b, g);
  });
}

template <typename Scalar>
BasicVar<Scalar> sub(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_shape("sub", a, b);
  auto* t = a.tape();
  return t->record(a.value() - b.value(), {a, b}, [t, a, b](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(a, g);
    t->accumulate(b, -g);
  });
}

template <typename Scalar>
BasicVar<Scalar> hadamard(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_shape("hadamard", a, b);
  auto* t = a.tape();
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return t->record(std::move(out), {a, b}, [t, a, b](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    if (t->requires_grad(a)) t->accumulate(a, g.cwiseProduct(b.value()));
    if (t->requires_grad(b)) t->accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
BasicVar<Scalar> scale(const BasicVar<Scalar>& a, Scalar s) {
  auto* t = a.tape();
  return t->record(a.value() * s, {a}, [t, a, s](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(a, g * s);
  });
}

template <typename Scalar>
BasicVar<Scalar> operator+(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) { return add(a, b); }
template <typename Scalar>
BasicVar<Scalar> operator-(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
BasicVar<Scalar> operator*(Scalar s, const BasicVar<Scalar>& a) { return scale(a, s); }

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::span<const BasicVar<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto* t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError(shape_message("concat_cols", parts.front(), p));
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  std::vector<BasicVar<Scalar>> inputs(parts.begin(), parts.end());
  return t->record(std::move(out), parts, [t, inputs](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Eigen::Index off = 0;
    for (const auto& p : inputs) {
      t->accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

template <typename Scalar>
BasicVar<Scalar> concat_rows(std::span<const BasicVar<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  auto* t = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError(shape_message("concat_rows", parts.front(), p));
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  std::vector<BasicVar<Scalar>> inputs(parts.begin(), parts.end());
  return t->record(std::move(out), parts, [t, inputs](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Eigen::Index off = 0;
    for (const auto& p : inputs) {
      t->accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

template <typename Scalar>
BasicVar<Scalar> slice_rows(const BasicVar<Scalar>& x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + std::to_string(x.rows()) + " rows");
  }
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().middleRows(begin, count);
  return t->record(std::move(out), {x}, [t, x, begin, count](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
    full.middleRows(begin, count) = g;
    t->accumulate(x, full);
  });
}

template <typename Scalar>
BasicVar<Scalar> gather_rows(const BasicVar<Scalar>& x, std::span<const Index> rows) {
  auto* t = x.tape();
  Matrix<Scalar> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= static_cast<std::size_t>(x.rows())) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[k]) + " out of range " +
                       std::to_string(x.rows()));
    }
    out.row(static_cast<Eigen::Index>(k)) = x.value().row(rows[k]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return t->record(std::move(out), {x}, [t, x, idx](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) full.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
    t->accumulate(x, full);
  });
}

/// Row sums as a column vector.
template <typename Scalar>
BasicVar<Scalar> row_sum(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().rowwise().sum();
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(x, g.col(0).replicate(1, x.cols()));
  });
}

/// Per-row dot products <a_k, b_k> as a column vector.
template <typename Scalar>
BasicVar<Scalar> row_dot(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_shape("row_dot", a, b);
  auto* t = a.tape();
  Matrix<Scalar> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return t->record(std::move(out), {a, b}, [t, a, b](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    if (t->requires_grad(a)) t->accumulate(a, b.value().array().colwise() * g.col(0).array());
    if (t->requires_grad(b)) t->accumulate(b, a.value().array().colwise() * g.col(0).array());
  });
}

/// diag(s) * x for a column vector s.
template <typename Scalar>
BasicVar<Scalar> scale_rows(const BasicVar<Scalar>& x, const BasicVar<Scalar>& s) {
  detail::require_column("scale_rows", s, x.rows());
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().array().colwise() * s.value().col(0).array();
  return t->record(std::move(out), {x, s}, [t, x, s](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    if (t->requires_grad(x)) t->accumulate(x, g.array().colwise() * s.value().col(0).array());
    if (t->requires_grad(s)) t->accumulate(s, g.cwiseProduct(x.value()).rowwise().sum());
  });
}

/// Row-wise softmax of x / temperature, max-shifted.
template <typename Scalar>
BasicVar<Scalar> row_softmax(const BasicVar<Scalar>& x, Scalar temperature = Scalar(1)) {
  if (!(temperature > 0)) throw ConfigError("row_softmax: temperature must be positive");
  auto* t = x.tape();
  Matrix<Scalar> z = x.value() / temperature;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    z.row(r).array() -= z.row(r).maxCoeff();
    z.row(r) = z.row(r).array().exp().matrix();
    z.row(r) /= z.row(r).sum();
  }
  return t->record(std::move(z), {x}, [t, x, temperature](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
    Matrix<Scalar> inner = g.cwiseProduct(y).rowwise().sum();
    Matrix<Scalar> d = y.array() * (g.array().colwise() - inner.col(0).array());
    t->accumulate(x, d / temperature);
  });
}

/// Log-softmax of scores / temperature over contiguous segments of a column
/// vector; segment s spans [offsets[s], offsets[s+1]).
template <typename Scalar>
BasicVar<Scalar> segment_log_softmax(const BasicVar<Scalar>& scores, std::span<const std::size_t> offsets,
                                     Scalar temperature = Scalar(1)) {
  if (!(temperature > 0)) throw ConfigError("segment_log_softmax: temperature must be positive");
  if (scores.cols() != 1) throw ShapeError("segment_log_softmax: scores must be a column vector");
  if (offsets.empty() || offsets.back() != static_cast<std::size_t>(scores.rows())) {
    throw ShapeError("segment_log_softmax: offsets do not cover the score vector");
  }
  auto* t = scores.tape();
  const auto& s = scores.value();
  Matrix<Scalar> out(s.rows(), 1);
  for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg) {
    const auto begin = static_cast<Eigen::Index>(offsets[seg]);
    const auto len = static_cast<Eigen::Index>(offsets[seg + 1]) - begin;
    if (len <= 0) continue;
    auto z = (s.col(0).segment(begin, len) / temperature).eval();
    const Scalar m = z.maxCoeff();
    const Scalar lse = m + std::log((z.array() - m).exp().sum());
    out.col(0).segment(begin, len) = z.array() - lse;
  }
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return t->record(std::move(out), {scores},
                   [t, scores, offs, temperature](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                     Matrix<Scalar> d(y.rows(), 1);
                     for (std::size_t seg = 0; seg + 1 < offs.size(); ++seg) {
                       const auto begin = static_cast<Eigen::Index>(offs[seg]);
                       const auto len = static_cast<Eigen::Index>(offs[seg + 1]) - begin;
                       if (len <= 0) continue;
                       const Scalar total = g.col(0).segment(begin, len).sum();
                       d.col(0).segment(begin, len) =
                           (g.col(0).segment(begin, len).array() -
                            y.col(0).segment(begin, len).array().exp() * total) /
                           temperature;
                     }
                     t->accumulate(scores, d);
                   });
}

template <typename Scalar>
BasicVar<Scalar> tanh(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().array().tanh();
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
    t->accumulate(x, g.array() * (Scalar(1) - y.array().square()));
  });
}

template <typename Scalar>
BasicVar<Scalar> sigmoid(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return detail::stable_sigmoid(v); });
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
    t->accumulate(x, g.array() * y.array() * (Scalar(1) - y.array()));
  });
}

/// log(sigmoid(x)) = -softplus(-x), finite for any finite x.
template <typename Scalar>
BasicVar<Scalar> log_sigmoid(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) {
    return -(std::max(-v, Scalar(0)) + std::log1p(std::exp(-std::abs(v))));
  });
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Matrix<Scalar> d = x.value().unaryExpr([](Scalar v) { return detail::stable_sigmoid(-v); });
    t->accumulate(x, g.cwiseProduct(d));
  });
}

template <typename Scalar>
BasicVar<Scalar> log(const BasicVar<Scalar>& x) {
  if ((x.value().array() <= 0).any()) throw NumericError("log: non-positive input");
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().array().log();
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(x, g.cwiseQuotient(x.value()));
  });
}

template <typename Scalar>
BasicVar<Scalar> square(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out = x.value().array().square();
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(x, Scalar(2) * g.cwiseProduct(x.value()));
  });
}

template <typename Scalar>
BasicVar<Scalar> reduce_sum(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t->accumulate(x, Matrix<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

/// Column vector of <a_{ia[k]}, b_{ib[k]}> without materializing gathered rows.
template <typename Scalar>
BasicVar<Scalar> pair_dot(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b, std::span<const Index> ia,
                          std::span<const Index> ib) {
  if (ia.size() != ib.size()) throw ShapeError("pair_dot: index lists differ in length");
  if (a.cols() != b.cols()) throw ShapeError(shape_message("pair_dot", a, b));
  auto* t = a.tape();
  const auto& av = a.value();
  const auto& bv = b.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(ia.size()), 1);
  for (std::size_t k = 0; k < ia.size(); ++k) {
    if (ia[k] >= av.rows() || ib[k] >= bv.rows()) throw ShapeError("pair_dot: row index out of range");
    out(static_cast<Eigen::Index>(k), 0) = av.row(ia[k]).dot(bv.row(ib[k]));
  }
  std::vector<Index> ra(ia.begin(), ia.end());
  std::vector<Index> rb(ib.begin(), ib.end());
  return t->record(std::move(out), {a, b}, [t, a, b, ra, rb](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    const bool need_a = t->requires_grad(a);
    const bool need_b = t->requires_grad(b);
    Matrix<Scalar> ga = need_a ? Matrix<Scalar>::Zero(a.rows(), a.cols()) : Matrix<Scalar>();
    Matrix<Scalar> gb = need_b ? Matrix<Scalar>::Zero(b.rows(), b.cols()) : Matrix<Scalar>();
    for (std::size_t k = 0; k < ra.size(); ++k) {
      const Scalar gk = g(static_cast<Eigen::Index>(k), 0);
      if (need_a) ga.row(ra[k]) += gk * b.value().row(rb[k]);
      if (need_b) gb.row(rb[k]) += gk * a.value().row(ra[k]);
    }
    if (need_a) t->accumulate(a, ga);
    if (need_b) t->accumulate(b, gb);
  });
}

/// Per-feature normalization over all rows. Train mode uses batch statistics
/// and folds them into the running estimates; eval mode uses the running ones.
template <typename Scalar>
BasicVar<Scalar> batch_norm(const BasicVar<Scalar>& x, const BasicVar<Scalar>& gamma,
                            const BasicVar<Scalar>& beta, BatchNormState<Scalar>& state, BatchNormMode mode) {
  const Eigen::Index features = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != features || beta.rows() != 1 || beta.cols() != features) {
    throw ShapeError(shape_message("batch_norm", x, gamma));
  }
  auto* t = x.tape();
  const Scalar eps = state.epsilon;

  if (mode == BatchNormMode::eval) {
    const RowVector<Scalar> inv_std = (state.running_var.row(0).array() + eps).rsqrt();
    Matrix<Scalar> xhat =
        (x.value().rowwise() - state.running_mean.row(0)).array().rowwise() * inv_std.array();
    Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
                         beta.value().row(0).array();
    return t->record(std::move(out), {x, gamma, beta},
                     [t, x, gamma, beta, xhat, inv_std](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                       if (t->requires_grad(x)) {
                         t->accumulate(x, g.array().rowwise() * (gamma.value().row(0).array() * inv_std.array()));
                       }
                       t->accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                       t->accumulate(beta, g.colwise().sum());
                     });
  }

  const Eigen::Index n = x.rows();
  if (n < 2) throw ShapeError("batch_norm: train mode needs at least 2 rows");
  const RowVector<Scalar> mean = x.value().colwise().mean();
  const Matrix<Scalar> centered = x.value().rowwise() - mean;
  const RowVector<Scalar> var = centered.array().square().colwise().mean();
  const RowVector<Scalar> inv_std = (var.array() + eps).rsqrt();
  Matrix<Scalar> xhat = centered.array().rowwise() * inv_std.array();
  Matrix<Scalar> out =
      (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();

  state.running_mean = state.momentum * state.running_mean + (Scalar(1) - state.momentum) * mean;
  state.running_var = state.momentum * state.running_var + (Scalar(1) - state.momentum) * var;

  return t->record(std::move(out), {x, gamma, beta},
                   [t, x, gamma, beta, xhat, inv_std](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                     if (t->requires_grad(x)) {
                       const RowVector<Scalar> g_mean = g.colwise().mean();
                       const RowVector<Scalar> gx_mean = g.cwiseProduct(xhat).colwise().mean();
                       Matrix<Scalar> centered_g = g.rowwise() - g_mean;
                       Matrix<Scalar> dx = centered_g - Matrix<Scalar>(xhat.array().rowwise() * gx_mean.array());
                       dx = dx.array().rowwise() * (gamma.value().row(0).array() * inv_std.array());
                       t->accumulate(x, dx);
                     }
                     t->accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                     t->accumulate(beta, g.colwise().sum());
                   });
}

}  // namespace bincf::ad

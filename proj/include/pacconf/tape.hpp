#pragma once

// Matrix-valued reverse-mode automatic differentiation.
//
// A Tape records every primitive applied to its Vars together with a closure
// that pushes the output adjoint back to the inputs. Nodes are appended in
// evaluation order, so walking the tape backwards is a reverse topological
// traversal. A Tape is single-threaded and is meant to be rebuilt for every
// minibatch.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pacconf/error.hpp"
#include "pacconf/numeric.hpp"
#include "pacconf/params.hpp"

namespace pacconf {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  const Mat& grad() const;
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
  double scalar() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is accumulated by backward().
  Var variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Records an op. `backward` is dropped when no parent needs a gradient.
  Var record(Mat value, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owner(p);
      needs = needs || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const Mat& value(Var v) const { return node(v).value; }

  /// Gradient of the last backward() root w.r.t. v (zeros if unreached).
  const Mat& grad(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(Var v, const Mat& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
      throw ShapeError("Tape::accumulate: gradient shape mismatch");
    }
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Adds g (rows x cols, column-major) into a contiguous block of a
  /// column-vector node's gradient.
  void accumulate_segment(Var v, long offset, const Mat& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.value.cols() != 1 || offset < 0 || offset + g.size() > n.value.rows()) {
      throw ShapeError("Tape::accumulate_segment: block out of range");
    }
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), 1);
    n.grad.col(0).segment(offset, g.size()) += Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
  }

  /// Reverse sweep from a scalar root. Clears earlier gradients.
  void backward(Var root) {
    check_owner(root);
    if (node(root).value.size() != 1) throw ShapeError("Tape::backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<std::size_t>(root.id)].grad = Mat::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      const Mat g = n.grad;
      n.backward(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Mat value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(backward)});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }
  const Node& node(Var v) const {
    check_owner(v);
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  void check_owner(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw ShapeError("Var does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->value(*this); }
inline const Mat& Var::grad() const { return tape->grad(*this); }
inline double Var::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw ShapeError("Var::scalar on a non-scalar node");
  return v(0, 0);
}

namespace ad {

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                     ")");
  }
}
}  // namespace detail

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  return a.tape->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

inline Var div(Var a, Var b) {
  detail::same_shape(a, b, "div");
  return a.tape->record(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](Tape& t, const Mat& g) {
    const Mat inv = b.value().cwiseInverse();
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(inv));
    if (t.requires_grad(b)) {
      t.accumulate(b, -g.cwiseProduct(a.value()).cwiseProduct(inv).cwiseProduct(inv));
    }
  });
}

inline Var scale(Var a, double c) {
  return a.tape->record(a.value() * c, {a}, [a, c](Tape& t, const Mat& g) { t.accumulate(a, g * c); });
}

inline Var add_scalar(Var a, double c) {
  return a.tape->record(a.value().array() + c, {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
}

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return a.tape->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

/// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row must be 1 x cols(a)");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

/// Replicates a 1x1 node into a rows x cols matrix.
inline Var broadcast(Var s, long rows, long cols) {
  if (s.value().size() != 1) throw ShapeError("broadcast: source must be a scalar");
  return s.tape->record(Mat::Constant(rows, cols, s.scalar()), {s},
                        [s](Tape& t, const Mat& g) { t.accumulate(s, Mat::Constant(1, 1, g.sum())); });
}

inline Var sum(Var a) {
  return a.tape->record(Mat::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Column vector of row sums.
inline Var row_sum(Var a) {
  return a.tape->record(a.value().rowwise().sum(), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, g * Eigen::RowVectorXd::Ones(a.cols()));
  });
}

// Elementwise nonlinearities.

inline Var tanh(Var a) {
  Mat out = a.value().array().tanh();
  Mat deriv = 1.0 - out.array().square();
  return a.tape->record(std::move(out), {a},
                        [a, deriv = std::move(deriv)](Tape& t, const Mat& g) { t.accumulate(a, g.cwiseProduct(deriv)); });
}

inline Var relu(Var a) {
  return a.tape->record(a.value().cwiseMax(0.0), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

inline Var sigmoid(Var a) {
  Mat out = a.value().unaryExpr([](double z) { return pacconf::sigmoid(z); });
  Mat deriv = out.array() * (1.0 - out.array());
  return a.tape->record(std::move(out), {a},
                        [a, deriv = std::move(deriv)](Tape& t, const Mat& g) { t.accumulate(a, g.cwiseProduct(deriv)); });
}

inline Var softplus(Var a) {
  return a.tape->record(a.value().unaryExpr([](double z) { return pacconf::softplus(z); }), {a},
                        [a](Tape& t, const Mat& g) {
                          t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double z) { return pacconf::sigmoid(z); })));
                        });
}

inline Var exp(Var a) {
  Mat out = a.value().array().exp();
  Mat copy = out;
  return a.tape->record(std::move(out), {a},
                        [a, copy = std::move(copy)](Tape& t, const Mat& g) { t.accumulate(a, g.cwiseProduct(copy)); });
}

inline Var log(Var a) {
  return a.tape->record(a.value().array().log(), {a},
                        [a](Tape& t, const Mat& g) { t.accumulate(a, g.cwiseQuotient(a.value())); });
}

inline Var abs(Var a) {
  return a.tape->record(a.value().cwiseAbs(), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double z) { return z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0); })));
  });
}

inline Var square(Var a) {
  return a.tape->record(a.value().array().square(), {a},
                        [a](Tape& t, const Mat& g) { t.accumulate(a, 2.0 * g.cwiseProduct(a.value())); });
}

/// Row-wise log-softmax.
inline Var log_softmax_rows(Var a) {
  const Mat& x = a.value();
  const Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Mat shifted = x.colwise() - mx;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  Mat out = shifted.colwise() - lse;
  Mat probs = out.array().exp();
  return a.tape->record(std::move(out), {a}, [a, probs = std::move(probs)](Tape& t, const Mat& g) {
    const Eigen::VectorXd gs = g.rowwise().sum();
    t.accumulate(a, g - probs.cwiseProduct(gs * Eigen::RowVectorXd::Ones(g.cols())));
  });
}

/// out(i) = a(i, index[i]) as a column vector.
inline Var gather_rows(Var a, std::vector<long> index) {
  if (static_cast<long>(index.size()) != a.rows()) throw ShapeError("gather_rows: one index per row required");
  Mat out(a.rows(), 1);
  for (long i = 0; i < a.rows(); ++i) {
    if (index[static_cast<std::size_t>(i)] < 0 || index[static_cast<std::size_t>(i)] >= a.cols()) {
      throw ShapeError("gather_rows: column index out of range");
    }
    out(i, 0) = a.value()(i, index[static_cast<std::size_t>(i)]);
  }
  return a.tape->record(std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Mat& g) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    for (long i = 0; i < a.rows(); ++i) ga(i, index[static_cast<std::size_t>(i)]) = g(i, 0);
    t.accumulate(a, ga);
  });
}

/// Reshapes a contiguous block of a column vector (column-major order).
inline Var slice(Var v, long offset, long rows, long cols) {
  if (v.cols() != 1 || offset < 0 || offset + rows * cols > v.rows()) throw ShapeError("slice: out of range");
  Mat out = Eigen::Map<const Mat>(v.value().data() + offset, rows, cols);
  return v.tape->record(std::move(out), {v},
                        [v, offset](Tape& t, const Mat& g) { t.accumulate_segment(v, offset, g); });
}

/// max(a, lo) elementwise; no gradient where clamped.
inline Var clamp_min(Var a, double lo) {
  return a.tape->record(a.value().cwiseMax(lo), {a}, [a, lo](Tape& t, const Mat& g) {
    t.accumulate(a, (a.value().array() > lo).select(g, 0.0));
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }

}  // namespace ad
}  // namespace pacconf

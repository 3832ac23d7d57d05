#pragma once

// Dense tensors backed by Eigen row-major matrices, with a small
// reverse-mode differentiation graph on top.
//
// A tensor of any rank is stored as a 2-D matrix whose last axis is the
// column axis and whose leading axes are flattened into rows, so a C x T x F
// volume is a (C*T) x F matrix. Most operations here are genuinely 2-D.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ags {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Shape = std::vector<Index>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace detail {

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  Shape shape;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  Matrix<Scalar>& grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    return grad;
  }
};

}  // namespace detail

/// Handle to a node of the differentiation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// A leaf holding `value`. `shape` defaults to {rows, cols}.
  static Var leaf(Matrix<Scalar> value, bool requires_grad = false, Shape shape = {}) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    if (shape.empty()) shape = {value.rows(), value.cols()};
    if (shape_size(shape) != value.size())
      throw DimensionError("leaf shape " + shape_string(shape) + " does not match " +
                           std::to_string(value.size()) + " values");
    if (!value.allFinite()) throw NumericError("leaf contains non-finite values");
    node->value = std::move(value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  static Var param(Matrix<Scalar> value, Shape shape = {}) {
    return leaf(std::move(value), true, std::move(shape));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix<Scalar>& value() const { return node_->value; }
  /// Direct write access, for optimizers and finite-difference probes.
  Matrix<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->shape; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  /// Accumulated gradient; zeros if nothing has been accumulated yet.
  const Matrix<Scalar>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad_buffer().setZero(); }

  Scalar item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
    return node_->value(0, 0);
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <typename Scalar>
using Backward = std::function<void(detail::Node<Scalar>&)>;

/// Creates an interior node. Parents that do not require gradients are kept
/// only for lifetime; `backward` must skip them.
template <typename Scalar>
Var<Scalar> make_node(const char* op, Matrix<Scalar> value, Shape shape,
                      std::vector<typename Var<Scalar>::NodePtr> parents, Backward<Scalar> backward) {
  if (!value.allFinite()) throw NumericError(std::string("non-finite values produced by ") + op);
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->value = std::move(value);
  if (shape.empty()) shape = {node->value.rows(), node->value.cols()};
  node->shape = std::move(shape);
  node->op = op;
  node->is_leaf = false;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Interior gradients are reset on each call, leaf gradients add up.
template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.size() != 1)
    throw DimensionError("backward() needs a scalar root, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  using NodeT = detail::Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (NodeT* node : order)
    if (!node->is_leaf) node->grad_buffer().setZero();
  loss.node()->grad_buffer()(0, 0) += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf && (*it)->backward) (*it)->backward(**it);
}

namespace detail {

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
void accumulate(const typename Var<Scalar>::NodePtr& parent, const auto& contribution) {
  if (parent->requires_grad) parent->grad_buffer() += contribution;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (m x k) times b (k x n).
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  Matrix<Scalar> out = a.value() * b.value();
  auto pa = a.node(), pb = b.node();
  return make_node<Scalar>("matmul", std::move(out), {}, {pa, pb}, [pa, pb](detail::Node<Scalar>& self) {
    if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->grad_buffer().noalias() += pa->value.transpose() * self.grad;
  });
}

/// a (m x k) times b^T, with b stored as (n x k). The usual layout for weights.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()) + "^T");
  Matrix<Scalar> out = a.value() * b.value().transpose();
  auto pa = a.node(), pb = b.node();
  return make_node<Scalar>("matmul_nt", std::move(out), {}, {pa, pb}, [pa, pb](detail::Node<Scalar>& self) {
    if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value;
    if (pb->requires_grad) pb->grad_buffer().noalias() += self.grad.transpose() * pa->value;
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  auto pa = a.node();
  return make_node<Scalar>("transpose", std::move(out), {}, {pa}, [pa](detail::Node<Scalar>& self) {
    pa->grad_buffer() += self.grad.transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("add", a, b);
  Matrix<Scalar> out = a.value() + b.value();
  auto pa = a.node(), pb = b.node();
  return make_node<Scalar>("add", std::move(out), a.shape(), {pa, pb}, [pa, pb](detail::Node<Scalar>& self) {
    detail::accumulate<Scalar>(pa, self.grad);
    detail::accumulate<Scalar>(pb, self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("sub", a, b);
  Matrix<Scalar> out = a.value() - b.value();
  auto pa = a.node(), pb = b.node();
  return make_node<Scalar>("sub", std::move(out), a.shape(), {pa, pb}, [pa, pb](detail::Node<Scalar>& self) {
    detail::accumulate<Scalar>(pa, self.grad);
    if (pb->requires_grad) pb->grad_buffer() -= self.grad;
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("hadamard", a, b);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  auto pa = a.node(), pb = b.node();
  return make_node<Scalar>("hadamard", std::move(out), a.shape(), {pa, pb}, [pa, pb](detail::Node<Scalar>& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad.cwiseProduct(pb->value);
    if (pb->requires_grad) pb->grad_buffer() += self.grad.cwiseProduct(pa->value);
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Matrix<Scalar> out = a.value() * factor;
  auto pa = a.node();
  return make_node<Scalar>("scale", std::move(out), a.shape(), {pa}, [pa, factor](detail::Node<Scalar>& self) {
    pa->grad_buffer() += self.grad * factor;
  });
}

/// x (m x n) plus a 1 x n row broadcast over every row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& x, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != x.cols())
    throw DimensionError("add_row: row " + shape_string(row.shape()) + " does not broadcast over " +
                         shape_string(x.shape()));
  Matrix<Scalar> out = x.value().rowwise() + row.value().row(0);
  auto px = x.node(), pr = row.node();
  return make_node<Scalar>("add_row", std::move(out), x.shape(), {px, pr}, [px, pr](detail::Node<Scalar>& self) {
    detail::accumulate<Scalar>(px, self.grad);
    if (pr->requires_grad) pr->grad_buffer() += self.grad.colwise().sum();
  });
}

/// x (m x n) with each row multiplied elementwise by a 1 x n row.
template <typename Scalar>
Var<Scalar> mul_row(const Var<Scalar>& x, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != x.cols())
    throw DimensionError("mul_row: row " + shape_string(row.shape()) + " does not broadcast over " +
                         shape_string(x.shape()));
  Matrix<Scalar> out = x.value().array().rowwise() * row.value().row(0).array();
  auto px = x.node(), pr = row.node();
  return make_node<Scalar>("mul_row", std::move(out), x.shape(), {px, pr}, [px, pr](detail::Node<Scalar>& self) {
    if (px->requires_grad) px->grad_buffer().array() += self.grad.array().rowwise() * pr->value.row(0).array();
    if (pr->requires_grad) pr->grad_buffer() += self.grad.cwiseProduct(px->value).colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return detail::stable_sigmoid(v); });
  auto px = x.node();
  return make_node<Scalar>("sigmoid", std::move(out), x.shape(), {px}, [px](detail::Node<Scalar>& self) {
    px->grad_buffer().array() += self.grad.array() * self.value.array() * (Scalar(1) - self.value.array());
  });
}

/// y = 2 / (1 + exp(-x)), range (0, 2).
template <typename Scalar>
Var<Scalar> scaled_sigmoid2(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return Scalar(2) * detail::stable_sigmoid(v); });
  auto px = x.node();
  return make_node<Scalar>("scaled_sigmoid2", std::move(out), x.shape(), {px}, [px](detail::Node<Scalar>& self) {
    // dy/dx = 2 s (1 - s) with s = y / 2, i.e. y (1 - y / 2).
    px->grad_buffer().array() += self.grad.array() * self.value.array() * (Scalar(1) - Scalar(0.5) * self.value.array());
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().array().tanh().matrix();
  auto px = x.node();
  return make_node<Scalar>("tanh", std::move(out), x.shape(), {px}, [px](detail::Node<Scalar>& self) {
    px->grad_buffer().array() += self.grad.array() * (Scalar(1) - self.value.array().square());
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().cwiseMax(Scalar(0));
  auto px = x.node();
  return make_node<Scalar>("relu", std::move(out), x.shape(), {px}, [px](detail::Node<Scalar>& self) {
    px->grad_buffer().array() += (px->value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalization and reductions

/// Softmax of every row, computed after subtracting the row maximum.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  if (!x.value().allFinite()) throw NumericError("softmax_rows: non-finite input");
  Matrix<Scalar> out = (x.value().colwise() - x.value().rowwise().maxCoeff()).array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  auto px = x.node();
  return make_node<Scalar>("softmax_rows", std::move(out), x.shape(), {px}, [px](detail::Node<Scalar>& self) {
    const auto& y = self.value;
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = self.grad.cwiseProduct(y).rowwise().sum();
    px->grad_buffer().array() += y.array() * (self.grad.colwise() - dot).array();
  });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(const Var<Scalar>& x) {
  if (!x.value().allFinite()) throw NumericError("log_softmax_rows: non-finite input");
  Matrix<Scalar> shifted = x.value().colwise() - x.value().rowwise().maxCoeff();
  Matrix<Scalar> out = shifted.colwise() - shifted.array().exp().rowwise().sum().log().matrix();
  auto px = x.node();
  return make_node<Scalar>("log_softmax_rows", std::move(out), x.shape(), {px}, [px](detail::Node<Scalar>& self) {
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> total = self.grad.rowwise().sum();
    px->grad_buffer() += self.grad - (self.value.array().exp().colwise() * total.array()).matrix();
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  auto px = x.node();
  return make_node<Scalar>("sum", std::move(out), {1, 1}, {px}, [px](detail::Node<Scalar>& self) {
    px->grad_buffer().array() += self.grad(0, 0);
  });
}

/// Mean over rows: m x n -> 1 x n.
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().colwise().mean();
  auto px = x.node();
  const Scalar inv = Scalar(1) / Scalar(x.rows());
  return make_node<Scalar>("mean_rows", std::move(out), {}, {px}, [px, inv](detail::Node<Scalar>& self) {
    px->grad_buffer().rowwise() += self.grad.row(0) * inv;
  });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenates along columns; all parts must have the same row count.
template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows())
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    cols += p.cols();
  }
  Matrix<Scalar> out(parts.front().rows(), cols);
  std::vector<typename Var<Scalar>::NodePtr> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
    nodes.push_back(p.node());
  }
  return make_node<Scalar>("concat_cols", std::move(out), {}, nodes, [nodes](detail::Node<Scalar>& self) {
    Index at = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->grad_buffer() += self.grad.middleCols(at, n->value.cols());
      at += n->value.cols();
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols())
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(x.shape()));
  Matrix<Scalar> out = x.value().middleCols(start, count);
  auto px = x.node();
  return make_node<Scalar>("slice_cols", std::move(out), {}, {px}, [px, start, count](detail::Node<Scalar>& self) {
    px->grad_buffer().middleCols(start, count) += self.grad;
  });
}

/// Same row-major data, new logical shape. The last axis becomes the columns.
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  if (shape.empty() || shape_size(shape) != x.size())
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  const Index cols = shape.back();
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(x.value().data(), x.size() / cols, cols);
  auto px = x.node();
  return make_node<Scalar>("reshape", std::move(out), std::move(shape), {px}, [px](detail::Node<Scalar>& self) {
    px->grad_buffer() += Eigen::Map<const Matrix<Scalar>>(self.grad.data(), px->value.rows(), px->value.cols());
  });
}

/// Repeats a 1 x n row `count` times.
template <typename Scalar>
Var<Scalar> repeat_rows(const Var<Scalar>& row, Index count) {
  if (row.rows() != 1) throw DimensionError("repeat_rows: expected a single row, got " + shape_string(row.shape()));
  Matrix<Scalar> out = row.value().replicate(count, 1);
  auto pr = row.node();
  return make_node<Scalar>("repeat_rows", std::move(out), {}, {pr}, [pr](detail::Node<Scalar>& self) {
    pr->grad_buffer() += self.grad.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Operator sugar

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }

}  // namespace ags

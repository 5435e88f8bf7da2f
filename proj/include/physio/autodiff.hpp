#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a rank-2 array (a scalar is 1x1, a vector a single row or
// column). Operations build a graph of reference-counted nodes; backward()
// orders the graph topologically (the tape), runs each node's adjoint rule
// once in reverse and then releases the graph.

#include "physio/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace physio::ad {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix<Scalar>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    grad += g;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Matrix<Scalar> value) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    return Tensor(std::move(n));
  }

  /// Leaf that accumulates gradients. The gradient starts at zero.
  static Tensor parameter(Matrix<Scalar> value) {
    auto n = std::make_shared<Node<Scalar>>();
    n->grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    n->value = std::move(value);
    n->requires_grad = true;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }

  const Matrix<Scalar>& value() const { return node_->value; }
  Matrix<Scalar>& mutable_value() { return node_->value; }
  Scalar item() const { return node_->value(0, 0); }

  /// Zero-filled when nothing reached this node.
  const Matrix<Scalar>& grad() const {
    if (node_->grad.size() == 0) node_->grad = Matrix<Scalar>::Zero(rows(), cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad.setZero(node_->value.rows(), node_->value.cols()); }

  bool requires_grad() const { return node_->requires_grad; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

inline std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << "[" << r << "x" << c << "]";
  return os.str();
}

template <typename Scalar>
std::string shape_str(const Tensor<Scalar>& t) {
  return shape_str(t.rows(), t.cols());
}

[[noreturn]] inline void shape_error(const char* op, const std::string& a, const std::string& b) {
  fail(std::string(op) + ": incompatible shapes " + a + " and " + b);
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Matrix<Scalar> value,
                           std::vector<std::shared_ptr<Node<Scalar>>> parents,
                           std::function<void(Node<Scalar>&)> backward) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(n));
}

}  // namespace detail

/// Topologically ordered record of the nodes reachable from a root.
template <typename Scalar>
class Tape {
 public:
  explicit Tape(const Tensor<Scalar>& root) {
    std::unordered_set<const Node<Scalar>*> seen;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    if (!root.node()->requires_grad) return;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<Scalar>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  /// Runs adjoint rules root-first, then drops the graph edges and the
  /// gradients of interior nodes.
  void run() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<Scalar>* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
    for (Node<Scalar>* n : order_) {
      if (!n->backward) continue;
      n->backward = nullptr;
      n->parents.clear();
      n->grad.resize(0, 0);
    }
    order_.clear();
  }

 private:
  std::vector<Node<Scalar>*> order_;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    fail("backward: loss must be scalar, got " + shape_str(loss));
  }
  if (!loss.requires_grad()) return;
  Tape<Scalar> tape(loss);
  loss.node()->grad = Matrix<Scalar>::Ones(1, 1);
  tape.run();
}

// ---------------------------------------------------------------------------
// Elementwise and algebraic operations

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", shape_str(a), shape_str(b));
  return detail::make_result<Scalar>("add", a.value() + b.value(), {a.node(), b.node()},
                                     [pa = a.node().get(), pb = b.node().get()](Node<Scalar>& n) {
                                       pa->accumulate(n.grad);
                                       pb->accumulate(n.grad);
                                     });
}

/// a [r x c] + row [1 x c], broadcast over rows.
template <typename Scalar>
Tensor<Scalar> add_rowwise(const Tensor<Scalar>& a, const Tensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    shape_error("add_rowwise", shape_str(a), shape_str(row));
  }
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return detail::make_result<Scalar>(
      "add_rowwise", std::move(out), {a.node(), row.node()},
      [pa = a.node().get(), pr = row.node().get()](Node<Scalar>& n) {
        pa->accumulate(n.grad);
        pr->accumulate_expr(n.grad.colwise().sum());
      });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("sub", shape_str(a), shape_str(b));
  return detail::make_result<Scalar>("sub", a.value() - b.value(), {a.node(), b.node()},
                                     [pa = a.node().get(), pb = b.node().get()](Node<Scalar>& n) {
                                       pa->accumulate(n.grad);
                                       pb->accumulate_expr(-n.grad);
                                     });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("mul", shape_str(a), shape_str(b));
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::make_result<Scalar>(
      "mul", std::move(out), {a.node(), b.node()},
      [pa = a.node().get(), pb = b.node().get()](Node<Scalar>& n) {
        pa->accumulate_expr(n.grad.cwiseProduct(pb->value));
        pb->accumulate_expr(n.grad.cwiseProduct(pa->value));
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return detail::make_result<Scalar>("scale", a.value() * s, {a.node()},
                                     [pa = a.node().get(), s](Node<Scalar>& n) {
                                       pa->accumulate_expr(n.grad * s);
                                     });
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) shape_error("matmul", shape_str(a), shape_str(b));
  Matrix<Scalar> out = a.value() * b.value();
  return detail::make_result<Scalar>(
      "matmul", std::move(out), {a.node(), b.node()},
      [pa = a.node().get(), pb = b.node().get()](Node<Scalar>& n) {
        if (pa->requires_grad) pa->accumulate_expr(n.grad * pb->value.transpose());
        if (pb->requires_grad) pb->accumulate_expr(pa->value.transpose() * n.grad);
      });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return detail::make_result<Scalar>("transpose", std::move(out), {a.node()},
                                     [pa = a.node().get()](Node<Scalar>& n) {
                                       pa->accumulate_expr(n.grad.transpose());
                                     });
}

/// Row-major reinterpretation; the element order is unchanged.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Index rows, Index cols) {
  if (rows * cols != a.size()) shape_error("reshape", shape_str(a), shape_str(rows, cols));
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(a.value().data(), rows, cols);
  return detail::make_result<Scalar>(
      "reshape", std::move(out), {a.node()}, [pa = a.node().get()](Node<Scalar>& n) {
        pa->accumulate_expr(
            Eigen::Map<const Matrix<Scalar>>(n.grad.data(), pa->value.rows(), pa->value.cols()));
      });
}

/// Concatenates along rows (axis 0) or columns (axis 1).
template <typename Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts, int axis) {
  if (parts.empty()) fail("concat: no inputs");
  if (axis != 0 && axis != 1) fail("concat: axis must be 0 or 1");
  Index rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) shape_error("concat", shape_str(parts[0]), shape_str(p));
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) shape_error("concat", shape_str(parts[0]), shape_str(p));
      cols += p.cols();
      rows = p.rows();
    }
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<std::shared_ptr<Node<Scalar>>> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(offset, p.rows()) = p.value();
      offset += p.rows();
    } else {
      out.middleCols(offset, p.cols()) = p.value();
      offset += p.cols();
    }
    nodes.push_back(p.node());
  }
  std::vector<Node<Scalar>*> raw;
  for (const auto& n : nodes) raw.push_back(n.get());
  return detail::make_result<Scalar>("concat", std::move(out), std::move(nodes),
                                     [raw, axis](Node<Scalar>& n) {
                                       Index off = 0;
                                       for (Node<Scalar>* p : raw) {
                                         if (axis == 0) {
                                           p->accumulate_expr(n.grad.middleRows(off, p->value.rows()));
                                           off += p->value.rows();
                                         } else {
                                           p->accumulate_expr(n.grad.middleCols(off, p->value.cols()));
                                           off += p->value.cols();
                                         }
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> concat(std::initializer_list<Tensor<Scalar>> parts, int axis) {
  std::vector<Tensor<Scalar>> v(parts);
  return concat(std::span<const Tensor<Scalar>>(v), axis);
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make_result<Scalar>("sum", std::move(out), {a.node()},
                                     [pa = a.node().get()](Node<Scalar>& n) {
                                       pa->accumulate_expr(Matrix<Scalar>::Constant(
                                           pa->value.rows(), pa->value.cols(), n.grad(0, 0)));
                                     });
}

/// Mean over an axis: axis 0 reduces rows to [1 x c], axis 1 columns to [r x 1].
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a, int axis) {
  if (axis == 0) {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(a.rows());
    Matrix<Scalar> out = a.value().colwise().sum() * inv;
    return detail::make_result<Scalar>("mean", std::move(out), {a.node()},
                                       [pa = a.node().get(), inv](Node<Scalar>& n) {
                                         pa->accumulate_expr(
                                             (n.grad * inv).replicate(pa->value.rows(), 1));
                                       });
  }
  if (axis == 1) {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(a.cols());
    Matrix<Scalar> out = a.value().rowwise().sum() * inv;
    return detail::make_result<Scalar>("mean", std::move(out), {a.node()},
                                       [pa = a.node().get(), inv](Node<Scalar>& n) {
                                         pa->accumulate_expr(
                                             (n.grad * inv).replicate(1, pa->value.cols()));
                                       });
  }
  fail("mean: axis must be 0 or 1");
}

/// Population variance over an axis (divides by the axis length).
template <typename Scalar>
Tensor<Scalar> variance(const Tensor<Scalar>& a, int axis) {
  if (axis != 0 && axis != 1) fail("variance: axis must be 0 or 1");
  const Matrix<Scalar>& x = a.value();
  Matrix<Scalar> centered;
  Matrix<Scalar> out;
  Index n;
  if (axis == 0) {
    n = x.rows();
    centered = x.rowwise() - x.colwise().mean();
    out = centered.array().square().colwise().sum() / static_cast<Scalar>(n);
  } else {
    n = x.cols();
    centered = x.colwise() - x.rowwise().mean();
    out = centered.array().square().rowwise().sum() / static_cast<Scalar>(n);
  }
  return detail::make_result<Scalar>(
      "variance", std::move(out), {a.node()},
      [pa = a.node().get(), centered = std::move(centered), axis, n](Node<Scalar>& node) {
        const Scalar k = Scalar(2) / static_cast<Scalar>(n);
        if (axis == 0) {
          pa->accumulate_expr((centered.array().rowwise() * node.grad.row(0).array() * k).matrix());
        } else {
          pa->accumulate_expr((centered.array().colwise() * node.grad.col(0).array() * k).matrix());
        }
      });
}

namespace detail {

template <typename Scalar>
void softmax_rows_inplace(Eigen::Ref<Matrix<Scalar>> m) {
  for (Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace detail

/// Softmax along an axis (1: each row sums to one; 0: each column does).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a, int axis) {
  if (axis != 0 && axis != 1) fail("softmax: axis must be 0 or 1");
  Matrix<Scalar> y = axis == 1 ? a.value() : Matrix<Scalar>(a.value().transpose());
  detail::softmax_rows_inplace<Scalar>(y);
  if (axis == 0) y.transposeInPlace();
  return detail::make_result<Scalar>(
      "softmax", y, {a.node()}, [pa = a.node().get(), y, axis](Node<Scalar>& n) {
        if (axis == 1) {
          Matrix<Scalar> dots = (n.grad.cwiseProduct(y)).rowwise().sum();
          pa->accumulate_expr(y.cwiseProduct(n.grad - dots.replicate(1, y.cols())));
        } else {
          Matrix<Scalar> dots = (n.grad.cwiseProduct(y)).colwise().sum();
          pa->accumulate_expr(y.cwiseProduct(n.grad - dots.replicate(y.rows(), 1)));
        }
      });
}

/// Normalises each row to zero mean and unit variance, then applies a learned
/// gain and bias (both [1 x c]).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  const Index c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c) shape_error("layer_norm", shape_str(x), shape_str(gain));
  if (bias.rows() != 1 || bias.cols() != c) shape_error("layer_norm", shape_str(x), shape_str(bias));
  Matrix<Scalar> xhat = x.value().colwise() - x.value().rowwise().mean();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      ((xhat.array().square().rowwise().sum() / static_cast<Scalar>(c)) + eps).rsqrt();
  xhat = xhat.array().colwise() * inv_std.array();
  Matrix<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
                       bias.value().row(0).array();
  return detail::make_result<Scalar>(
      "layer_norm", std::move(out), {x.node(), gain.node(), bias.node()},
      [px = x.node().get(), pg = gain.node().get(), pb = bias.node().get(), xhat,
       inv_std](Node<Scalar>& n) {
        pb->accumulate_expr(n.grad.colwise().sum());
        pg->accumulate_expr(n.grad.cwiseProduct(xhat).colwise().sum());
        if (!px->requires_grad) return;
        Matrix<Scalar> dxhat = n.grad.array().rowwise() * pg->value.row(0).array();
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_d = dxhat.rowwise().mean();
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_dx =
            dxhat.cwiseProduct(xhat).rowwise().mean();
        Matrix<Scalar> dx = dxhat;
        dx.colwise() -= mean_d;
        dx.array() -= xhat.array().colwise() * mean_dx.array();
        dx = dx.array().colwise() * inv_std.array();
        px->accumulate(dx);
      });
}

/// Inverted dropout: survivors are scaled by 1 / (1 - rate) so evaluation is
/// a plain forward pass. Identity when training is false or rate is zero.
template <typename Scalar, typename Rng>
Tensor<Scalar> dropout(const Tensor<Scalar>& a, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) fail("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar s = Scalar(1.0 / (1.0 - rate));
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : Scalar(0);
  Matrix<Scalar> out = a.value().cwiseProduct(mask);
  return detail::make_result<Scalar>("dropout", std::move(out), {a.node()},
                                     [pa = a.node().get(), mask](Node<Scalar>& n) {
                                       pa->accumulate_expr(n.grad.cwiseProduct(mask));
                                     });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return detail::make_result<Scalar>(
      "relu", std::move(out), {a.node()}, [pa = a.node().get()](Node<Scalar>& n) {
        pa->accumulate_expr(
            (pa->value.array() > Scalar(0)).select(n.grad.array(), Scalar(0)).matrix());
      });
}

/// x [n x in] . W [in x out] + b [1 x out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  if (x.cols() != w.rows()) shape_error("linear", shape_str(x), shape_str(w));
  if (b.rows() != 1 || b.cols() != w.cols()) shape_error("linear", shape_str(w), shape_str(b));
  Matrix<Scalar> out = (x.value() * w.value()).rowwise() + b.value().row(0);
  return detail::make_result<Scalar>(
      "linear", std::move(out), {x.node(), w.node(), b.node()},
      [px = x.node().get(), pw = w.node().get(), pb = b.node().get()](Node<Scalar>& n) {
        if (px->requires_grad) px->accumulate_expr(n.grad * pw->value.transpose());
        if (pw->requires_grad) pw->accumulate_expr(px->value.transpose() * n.grad);
        pb->accumulate_expr(n.grad.colwise().sum());
      });
}

// ---------------------------------------------------------------------------
// Row indexing and window operations

/// Selects rows by index (repeats allowed); gradients scatter-add back.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& a, std::vector<Index> idx) {
  Matrix<Scalar> out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) {
      fail("gather_rows: row " + std::to_string(idx[i]) + " out of range for " + shape_str(a));
    }
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return detail::make_result<Scalar>(
      "gather_rows", std::move(out), {a.node()},
      [pa = a.node().get(), idx = std::move(idx)](Node<Scalar>& n) {
        if (!pa->requires_grad) return;
        Matrix<Scalar> g = Matrix<Scalar>::Zero(pa->value.rows(), pa->value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Index>(i));
        pa->accumulate(g);
      });
}

/// Row indices of the stacked windows [start, start + width) for each start.
inline std::vector<Index> window_rows(std::span<const Index> starts, Index width) {
  std::vector<Index> idx;
  idx.reserve(starts.size() * static_cast<std::size_t>(width));
  for (Index s : starts)
    for (Index p = 0; p < width; ++p) idx.push_back(s + p);
  return idx;
}

/// Stacks the windows of a [T x d] sequence into [n * width x d].
template <typename Scalar>
Tensor<Scalar> gather_windows(const Tensor<Scalar>& a, std::span<const Index> starts, Index width) {
  for (Index s : starts) {
    if (s < 0 || s + width > a.rows()) {
      fail("gather_windows: window at " + std::to_string(s) + " of width " +
           std::to_string(width) + " exceeds length " + std::to_string(a.rows()));
    }
  }
  return gather_rows(a, window_rows(starts, width));
}

/// stacked [n * w x c] + block [w x c] added to every w-row block.
template <typename Scalar>
Tensor<Scalar> add_tiled(const Tensor<Scalar>& stacked, const Tensor<Scalar>& block) {
  const Index w = block.rows();
  if (block.cols() != stacked.cols() || w == 0 || stacked.rows() % w != 0) {
    shape_error("add_tiled", shape_str(stacked), shape_str(block));
  }
  const Index n = stacked.rows() / w;
  Matrix<Scalar> out = stacked.value();
  for (Index k = 0; k < n; ++k) out.middleRows(k * w, w) += block.value();
  return detail::make_result<Scalar>(
      "add_tiled", std::move(out), {stacked.node(), block.node()},
      [ps = stacked.node().get(), pb = block.node().get(), n, w](Node<Scalar>& node) {
        ps->accumulate(node.grad);
        if (!pb->requires_grad) return;
        Matrix<Scalar> g = Matrix<Scalar>::Zero(w, node.grad.cols());
        for (Index k = 0; k < n; ++k) g += node.grad.middleRows(k * w, w);
        pb->accumulate(g);
      });
}

/// Multi-head scaled dot-product attention evaluated independently inside
/// each of n windows.
///
/// q: [n * q_rows x h * dh], k and v: [n * kv_rows x h * dh]. Window j's
/// queries attend only to window j's keys. Attention weights pass through
/// inverted dropout when training. If `weights_out` is given it receives the
/// (pre-dropout) weights as [n * h * q_rows x kv_rows].
template <typename Scalar, typename Rng>
Tensor<Scalar> windowed_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                  const Tensor<Scalar>& v, Index n_windows, Index n_heads,
                                  double dropout_rate, bool training, Rng& rng,
                                  Matrix<Scalar>* weights_out = nullptr) {
  const Index inner = q.cols();
  if (k.cols() != inner || v.cols() != inner) {
    shape_error("windowed_attention", shape_str(q), shape_str(k));
  }
  if (k.rows() != v.rows()) shape_error("windowed_attention", shape_str(k), shape_str(v));
  if (n_windows <= 0 || n_heads <= 0 || inner % n_heads != 0 || q.rows() % n_windows != 0 ||
      k.rows() % n_windows != 0) {
    fail("windowed_attention: " + std::to_string(n_windows) + " windows and " +
         std::to_string(n_heads) + " heads do not tile q " + shape_str(q) + " / k " + shape_str(k));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("windowed_attention: bad dropout rate");
  const Index qr = q.rows() / n_windows;
  const Index kr = k.rows() / n_windows;
  const Index dh = inner / n_heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const bool drop = training && dropout_rate > 0.0;
  const Scalar keep_scale = Scalar(1.0 / (1.0 - dropout_rate));
  std::bernoulli_distribution keep(1.0 - dropout_rate);

  // probs and masks stacked as [(window * heads + head) * qr + i, kv].
  Matrix<Scalar> probs(n_windows * n_heads * qr, kr);
  Matrix<Scalar> mask;
  if (drop) mask.resize(probs.rows(), probs.cols());
  Matrix<Scalar> out(q.rows(), inner);
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  for (Index w = 0; w < n_windows; ++w) {
    for (Index h = 0; h < n_heads; ++h) {
      auto P = probs.middleRows((w * n_heads + h) * qr, qr);
      P.noalias() = Q.block(w * qr, h * dh, qr, dh) * K.block(w * kr, h * dh, kr, dh).transpose();
      P *= scale;
      detail::softmax_rows_inplace<Scalar>(P);
      if (drop) {
        auto M = mask.middleRows((w * n_heads + h) * qr, qr);
        for (Index i = 0; i < M.rows(); ++i)
          for (Index j = 0; j < M.cols(); ++j) M(i, j) = keep(rng) ? keep_scale : Scalar(0);
        out.block(w * qr, h * dh, qr, dh).noalias() =
            P.cwiseProduct(M) * V.block(w * kr, h * dh, kr, dh);
      } else {
        out.block(w * qr, h * dh, qr, dh).noalias() = P * V.block(w * kr, h * dh, kr, dh);
      }
    }
  }
  if (weights_out) *weights_out = probs;

  return detail::make_result<Scalar>(
      "windowed_attention", std::move(out), {q.node(), k.node(), v.node()},
      [pq = q.node().get(), pk = k.node().get(), pv = v.node().get(), probs = std::move(probs),
       mask = std::move(mask), n_windows, n_heads, qr, kr, dh, scale, drop](Node<Scalar>& n) {
        Matrix<Scalar> gq = Matrix<Scalar>::Zero(pq->value.rows(), pq->value.cols());
        Matrix<Scalar> gk = Matrix<Scalar>::Zero(pk->value.rows(), pk->value.cols());
        Matrix<Scalar> gv = Matrix<Scalar>::Zero(pv->value.rows(), pv->value.cols());
        Matrix<Scalar> pd, dpd, dp, ds;
        for (Index w = 0; w < n_windows; ++w) {
          for (Index h = 0; h < n_heads; ++h) {
            const Index r0 = (w * n_heads + h) * qr;
            const auto P = probs.middleRows(r0, qr);
            const auto dO = n.grad.block(w * qr, h * dh, qr, dh);
            const auto Vb = pv->value.block(w * kr, h * dh, kr, dh);
            if (drop) {
              pd = P.cwiseProduct(mask.middleRows(r0, qr));
            } else {
              pd = P;
            }
            gv.block(w * kr, h * dh, kr, dh).noalias() += pd.transpose() * dO;
            dpd.noalias() = dO * Vb.transpose();
            dp = drop ? Matrix<Scalar>(dpd.cwiseProduct(mask.middleRows(r0, qr))) : dpd;
            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dp.cwiseProduct(P).rowwise().sum();
            ds = P.cwiseProduct(dp - dots.replicate(1, kr)) * scale;
            gq.block(w * qr, h * dh, qr, dh).noalias() += ds * pk->value.block(w * kr, h * dh, kr, dh);
            gk.block(w * kr, h * dh, kr, dh).noalias() +=
                ds.transpose() * pq->value.block(w * qr, h * dh, qr, dh);
          }
        }
        pq->accumulate(gq);
        pk->accumulate(gk);
        pv->accumulate(gv);
      });
}

/// Averages stacked window rows [n * width x d] back onto a [T x d] sequence:
/// output row t is the mean over every window covering t.
template <typename Scalar>
Tensor<Scalar> overlap_average(const Tensor<Scalar>& stacked, std::vector<Index> starts, Index width,
                               Index length) {
  const auto n = static_cast<Index>(starts.size());
  if (stacked.rows() != n * width) {
    shape_error("overlap_average", shape_str(stacked), shape_str(n * width, stacked.cols()));
  }
  std::vector<Index> coverage(static_cast<std::size_t>(length), 0);
  for (Index s : starts) {
    if (s < 0 || s + width > length) fail("overlap_average: window exceeds sequence length");
    for (Index p = 0; p < width; ++p) ++coverage[static_cast<std::size_t>(s + p)];
  }
  for (Index t = 0; t < length; ++t) {
    if (coverage[static_cast<std::size_t>(t)] == 0) {
      fail("overlap_average: time point " + std::to_string(t) + " is not covered by any window");
    }
  }
  Matrix<Scalar> out = Matrix<Scalar>::Zero(length, stacked.cols());
  for (Index k = 0; k < n; ++k) out.middleRows(starts[k], width) += stacked.value().middleRows(k * width, width);
  for (Index t = 0; t < length; ++t) out.row(t) /= static_cast<Scalar>(coverage[t]);
  return detail::make_result<Scalar>(
      "overlap_average", std::move(out), {stacked.node()},
      [ps = stacked.node().get(), starts = std::move(starts), coverage = std::move(coverage),
       width](Node<Scalar>& node) {
        Matrix<Scalar> g(ps->value.rows(), ps->value.cols());
        for (std::size_t k = 0; k < starts.size(); ++k) {
          for (Index p = 0; p < width; ++p) {
            const Index t = starts[k] + p;
            g.row(static_cast<Index>(k) * width + p) =
                node.grad.row(t) / static_cast<Scalar>(coverage[static_cast<std::size_t>(t)]);
          }
        }
        ps->accumulate(g);
      });
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Central-difference check of every input of a scalar function.
///
/// Returns the largest elementwise relative error, with denominator
/// max(|analytic|, |numeric|, floor). Throws if f is not deterministic.
/// Entries whose true gradient is zero carry central-difference round-off of
/// roughly ulp(f) / eps; `floor` should sit above that for such functions.
template <typename F>
double grad_check(F&& f, const std::vector<Matrix<double>>& inputs, double eps = 1e-5,
                  double floor = 1e-8) {
  auto evaluate = [&](const std::vector<Matrix<double>>& xs) {
    std::vector<Tensor<double>> leaves;
    for (const auto& x : xs) leaves.push_back(Tensor<double>::constant(x));
    Tensor<double> y = f(std::span<const Tensor<double>>(leaves));
    if (y.rows() != 1 || y.cols() != 1) fail("grad_check: function must return a scalar");
    return y.item();
  };

  std::vector<Tensor<double>> params;
  for (const auto& x : inputs) params.push_back(Tensor<double>::parameter(x));
  Tensor<double> y = f(std::span<const Tensor<double>>(params));
  const double y0 = y.item();
  backward(y);
  if (evaluate(inputs) != y0 || evaluate(inputs) != y0) {
    fail("grad_check: function is not deterministic");
  }

  double worst = 0.0;
  std::vector<Matrix<double>> xs = inputs;
  for (std::size_t m = 0; m < xs.size(); ++m) {
    const Matrix<double>& analytic = params[m].grad();
    for (Index i = 0; i < xs[m].size(); ++i) {
      const double orig = xs[m].data()[i];
      xs[m].data()[i] = orig + eps;
      const double up = evaluate(xs);
      xs[m].data()[i] = orig - eps;
      const double down = evaluate(xs);
      xs[m].data()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

template <typename F>
double grad_check(F&& f, const Matrix<double>& x, double eps = 1e-5) {
  return grad_check(
      [&](std::span<const Tensor<double>> xs) { return f(xs[0]); }, std::vector<Matrix<double>>{x},
      eps);
}

}  // namespace physio::ad

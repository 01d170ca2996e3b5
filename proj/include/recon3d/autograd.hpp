#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every intermediate lives on a Tape as a node holding its value, a lazily
// allocated gradient and a closure that pushes the gradient to its inputs.
// Nodes are only ever appended, so node order is a topological order and
// backward() is a single reverse sweep.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace recon3d {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T item() const { return value()(0, 0); }
  explicit operator bool() const { return tape != nullptr; }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<T>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, {}); }

  // Binds a parameter once per tape; repeated uses share one leaf.
  Var<T> param(Parameter<T>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
    Var<T> v = push(p.value, p.trainable, {});
    nodes_[v.id].param = &p;
    bound_.emplace(&p, v.id);
    return v;
  }

  Var<T> push(Mat<T> value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }

  template <class Expr>
  void accumulate(Var<T> v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Gradient of a node after backward(); empty if it received none.
  const Mat<T>& grad(Var<T> v) const { return nodes_[v.id].grad; }

  // Seeds d(root)/d(root) = 1 and sweeps in reverse. Parameter leaves add
  // their gradient into Parameter::grad.
  void backward(Var<T> root, bool keep_grads = false) {
    if (root.tape != this || root.id < 0) throw std::invalid_argument("backward: root does not belong to this tape");
    if (value(root).size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!nodes_[root.id].needs_grad) return;
    nodes_[root.id].grad = Mat<T>::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      }
      if (!keep_grads) n.grad.resize(0, 0);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> bound_;
  bool grad_enabled_;
};

namespace detail {

template <class T>
bool any_needs(Var<T> a) {
  return a.tape->needs_grad(a);
}
template <class T>
bool any_needs(Var<T> a, Var<T> b) {
  return a.tape->needs_grad(a) || b.tape->needs_grad(b);
}

template <class T>
void require_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Mat<T> out = a.value() * b.value();
  return tape.push(std::move(out), detail::any_needs(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Mat<T> out = a.value() * b.value().transpose();
  return tape.push(std::move(out), detail::any_needs(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b));
    if (tp.needs_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  Mat<T> out = a.value().transpose();
  return a.tape->push(std::move(out), detail::any_needs(a),
                      [a](Tape<T>& tp, const Mat<T>& g) { tp.accumulate(a, g.transpose()); });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Mat<T> out = a.value() + b.value();
  return a.tape->push(std::move(out), detail::any_needs(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Mat<T> out = a.value() - b.value();
  return a.tape->push(std::move(out), detail::any_needs(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Mat<T> out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), detail::any_needs(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Mat<T> out = a.value() * s;
  return a.tape->push(std::move(out), detail::any_needs(a),
                      [a, s](Tape<T>& tp, const Mat<T>& g) { tp.accumulate(a, g * s); });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Mat<T> out = a.value().array() + s;
  return a.tape->push(std::move(out), detail::any_needs(a),
                      [a](Tape<T>& tp, const Mat<T>& g) { tp.accumulate(a, g); });
}

// a * s where s is a 1x1 node.
template <class T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  if (s.value().size() != 1) throw std::invalid_argument("mul_scalar: scale must be 1x1");
  Mat<T> out = a.value() * s.item();
  return a.tape->push(std::move(out), detail::any_needs(a, s), [a, s](Tape<T>& tp, const Mat<T>& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(s)(0, 0));
    if (tp.needs_grad(s)) tp.accumulate(s, Mat<T>::Constant(1, 1, g.cwiseProduct(tp.value(a)).sum()));
  });
}

// Broadcast a 1xC row over every row of a.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: expected 1xC row");
  Mat<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(out), detail::any_needs(a, row), [a, row](Tape<T>& tp, const Mat<T>& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

template <class T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: expected 1xC row");
  Mat<T> out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape->push(std::move(out), detail::any_needs(a, row), [a, row](Tape<T>& tp, const Mat<T>& g) {
    if (tp.needs_grad(a)) {
      Mat<T> ga = g.array().rowwise() * tp.value(row).row(0).array();
      tp.accumulate(a, ga);
    }
    if (tp.needs_grad(row)) tp.accumulate(row, g.cwiseProduct(tp.value(a)).colwise().sum());
  });
}

// 1xC -> nxC
template <class T>
Var<T> broadcast_rows(Var<T> row, Eigen::Index n) {
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: expected a single row");
  Mat<T> out = row.value().replicate(n, 1);
  return row.tape->push(std::move(out), detail::any_needs(row),
                        [row](Tape<T>& tp, const Mat<T>& g) { tp.accumulate(row, g.colwise().sum()); });
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Var<T> relu(Var<T> a) {
  Mat<T> out = a.value().cwiseMax(T(0));
  return a.tape->push(std::move(out), detail::any_needs(a), [a](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> ga = (tp.value(a).array() > T(0)).select(g, T(0));
    tp.accumulate(a, ga);
  });
}

template <class T>
Var<T> silu(Var<T> a) {
  Mat<T> sig = (T(1) + (-a.value().array()).exp()).inverse();
  Mat<T> out = a.value().cwiseProduct(sig);
  return a.tape->push(std::move(out), detail::any_needs(a), [a, sig](Tape<T>& tp, const Mat<T>& g) {
    const auto& x = tp.value(a).array();
    Mat<T> d = sig.array() * (T(1) + x * (T(1) - sig.array()));
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Mat<T> out = (T(1) + (-a.value().array()).exp()).inverse();
  Mat<T> y = out;
  return a.tape->push(std::move(out), detail::any_needs(a), [a, y](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> d = y.array() * (T(1) - y.array());
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

template <class T>
Var<T> tanh(Var<T> a) {
  Mat<T> out = a.value().array().tanh();
  Mat<T> y = out;
  return a.tape->push(std::move(out), detail::any_needs(a), [a, y](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> d = T(1) - y.array().square();
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

// tanh approximation
template <class T>
Var<T> gelu(Var<T> a) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T k = T(0.044715);
  const auto& x = a.value().array();
  Mat<T> inner_tanh = (c * (x + k * x.cube())).tanh();
  Mat<T> out = T(0.5) * x * (T(1) + inner_tanh.array());
  return a.tape->push(std::move(out), detail::any_needs(a), [a, inner_tanh, c, k](Tape<T>& tp, const Mat<T>& g) {
    const auto& x = tp.value(a).array();
    const auto& th = inner_tanh.array();
    Mat<T> d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * c * (T(1) + T(3) * k * x.square());
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

template <class T>
Var<T> exp(Var<T> a) {
  Mat<T> out = a.value().array().exp();
  Mat<T> y = out;
  return a.tape->push(std::move(out), detail::any_needs(a),
                      [a, y](Tape<T>& tp, const Mat<T>& g) { tp.accumulate(a, g.cwiseProduct(y)); });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

// Softmax along each row. With causal=true, entry (i, j) is excluded when
// j > i + causal_offset.
template <class T>
Var<T> softmax_rows(Var<T> a, bool causal = false, Eigen::Index causal_offset = 0) {
  const Mat<T>& x = a.value();
  Mat<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(x.cols(), r + causal_offset + 1) : x.cols();
    const T mx = x.row(r).head(limit).maxCoeff();
    T sum = 0;
    for (Eigen::Index c = 0; c < limit; ++c) {
      y(r, c) = std::exp(x(r, c) - mx);
      sum += y(r, c);
    }
    for (Eigen::Index c = 0; c < limit; ++c) y(r, c) /= sum;
    for (Eigen::Index c = limit; c < x.cols(); ++c) y(r, c) = 0;
  }
  Mat<T> p = y;
  return a.tape->push(std::move(y), detail::any_needs(a), [a, p](Tape<T>& tp, const Mat<T>& g) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = g.cwiseProduct(p).rowwise().sum();
    Mat<T> ga = p.array() * (g.colwise() - dot).array();
    tp.accumulate(a, ga);
  });
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  const Mat<T>& x = a.value();
  Mat<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mx = x.row(r).maxCoeff();
    const T lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  Mat<T> p = y.array().exp();
  return a.tape->push(std::move(y), detail::any_needs(a), [a, p](Tape<T>& tp, const Mat<T>& g) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> gs = g.rowwise().sum();
    Mat<T> ga = g - (p.array().colwise() * gs.array()).matrix();
    tp.accumulate(a, ga);
  });
}

// Zero-mean unit-variance per row, no affine part.
template <class T>
Var<T> layernorm_rows(Var<T> a, T eps = T(1e-5)) {
  const Mat<T>& x = a.value();
  const Eigen::Index n = x.cols();
  Mat<T> y(x.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mu = x.row(r).mean();
    const T var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat<T> yc = y;
  return a.tape->push(std::move(y), detail::any_needs(a), [a, yc, inv_std](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> ga(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const T gm = g.row(r).mean();
      const T gy = g.row(r).cwiseProduct(yc.row(r)).mean();
      ga.row(r) = inv_std(r) * (g.row(r).array() - gm - yc.row(r).array() * gy);
    }
    tp.accumulate(a, ga);
  });
}

template <class T>
Var<T> l2_normalize_rows(Var<T> a, T eps = T(1e-12)) {
  const Mat<T>& x = a.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv(x.rows());
  Mat<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    inv(r) = T(1) / std::sqrt(x.row(r).squaredNorm() + eps);
    y.row(r) = x.row(r) * inv(r);
  }
  Mat<T> yc = y;
  return a.tape->push(std::move(y), detail::any_needs(a), [a, yc, inv](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> ga(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const T d = g.row(r).dot(yc.row(r));
      ga.row(r) = inv(r) * (g.row(r) - yc.row(r) * d);
    }
    tp.accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows: range out of bounds");
  Mat<T> out = a.value().middleRows(start, count);
  return a.tape->push(std::move(out), detail::any_needs(a), [a, start, count](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> ga = Mat<T>::Zero(tp.value(a).rows(), tp.value(a).cols());
    ga.middleRows(start, count) = g;
    tp.accumulate(a, ga);
  });
}

template <class T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols: range out of bounds");
  Mat<T> out = a.value().middleCols(start, count);
  return a.tape->push(std::move(out), detail::any_needs(a), [a, start, count](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> ga = Mat<T>::Zero(tp.value(a).rows(), tp.value(a).cols());
    ga.middleCols(start, count) = g;
    tp.accumulate(a, ga);
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || p.tape->needs_grad(p);
  }
  Mat<T> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape->push(std::move(out), needs, [parts](Tape<T>& tp, const Mat<T>& g) {
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      const Eigen::Index n = tp.value(p).rows();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(r, n));
      r += n;
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || p.tape->needs_grad(p);
  }
  Mat<T> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape->push(std::move(out), needs, [parts](Tape<T>& tp, const Mat<T>& g) {
    Eigen::Index c = 0;
    for (const auto& p : parts) {
      const Eigen::Index n = tp.value(p).cols();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(c, n));
      c += n;
    }
  });
}

// Row lookup (embedding tables). Gradients scatter-add into the table.
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<int> ids) {
  const Mat<T>& tv = table.value();
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return table.tape->push(std::move(out), detail::any_needs(table),
                          [table, ids = std::move(ids)](Tape<T>& tp, const Mat<T>& g) {
                            Mat<T> gt = Mat<T>::Zero(tp.value(table).rows(), tp.value(table).cols());
                            for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                            tp.accumulate(table, gt);
                          });
}

// Flat-index gather: out.data()[k] = a.data()[index[k]], or 0 where index[k] < 0.
// Covers im2col, upsampling, patchify and their inverses.
using IndexMap = std::shared_ptr<const std::vector<int>>;

template <class T>
Var<T> gather(Var<T> a, Eigen::Index rows, Eigen::Index cols, IndexMap index) {
  if (static_cast<Eigen::Index>(index->size()) != rows * cols) throw std::invalid_argument("gather: index size mismatch");
  const T* src = a.value().data();
  const int n_src = static_cast<int>(a.value().size());
  Mat<T> out(rows, cols);
  T* dst = out.data();
  const int* idx = index->data();
  for (Eigen::Index k = 0; k < rows * cols; ++k) {
    const int s = idx[k];
    if (s >= n_src) throw std::out_of_range("gather: source index out of range");
    dst[k] = s >= 0 ? src[s] : T(0);
  }
  return a.tape->push(std::move(out), detail::any_needs(a), [a, index](Tape<T>& tp, const Mat<T>& g) {
    Mat<T> ga = Mat<T>::Zero(tp.value(a).rows(), tp.value(a).cols());
    T* d = ga.data();
    const T* gs = g.data();
    const int* idx = index->data();
    const Eigen::Index n = g.size();
    for (Eigen::Index k = 0; k < n; ++k) {
      if (idx[k] >= 0) d[idx[k]] += gs[k];
    }
    tp.accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Var<T> sum(Var<T> a) {
  Mat<T> out = Mat<T>::Constant(1, 1, a.value().sum());
  return a.tape->push(std::move(out), detail::any_needs(a), [a](Tape<T>& tp, const Mat<T>& g) {
    tp.accumulate(a, Mat<T>::Constant(tp.value(a).rows(), tp.value(a).cols(), g(0, 0)));
  });
}

// Column sums, 1 x cols.
template <class T>
Var<T> sum_rows(Var<T> a) {
  Mat<T> out = a.value().colwise().sum();
  return a.tape->push(std::move(out), detail::any_needs(a), [a](Tape<T>& tp, const Mat<T>& g) {
    tp.accumulate(a, g.replicate(tp.value(a).rows(), 1));
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// Mean cross-entropy of row-wise logits against integer targets; rows whose
// target is negative are ignored. Returns mean over supervised rows.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets) {
  const Mat<T>& x = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != x.rows()) throw std::invalid_argument("cross_entropy: target count mismatch");
  Mat<T> grad = Mat<T>::Zero(x.rows(), x.cols());
  T total = 0;
  int count = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    if (t >= x.cols()) throw std::out_of_range("cross_entropy: target out of range");
    const T mx = x.row(r).maxCoeff();
    auto e = (x.row(r).array() - mx).exp();
    const T z = e.sum();
    total += -(x(r, t) - mx - std::log(z));
    grad.row(r) = e / z;
    grad(r, t) -= T(1);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: no supervised rows");
  grad /= static_cast<T>(count);
  Mat<T> out = Mat<T>::Constant(1, 1, total / static_cast<T>(count));
  return logits.tape->push(std::move(out), detail::any_needs(logits),
                           [logits, grad](Tape<T>& tp, const Mat<T>& g) { tp.accumulate(logits, grad * g(0, 0)); });
}

// Mean of (pred - target)^2 over rows with row_mask != 0 and all columns.
template <class T>
Var<T> masked_mse_rows(Var<T> pred, const Mat<T>& target, const std::vector<std::uint8_t>& row_mask) {
  const Mat<T>& p = pred.value();
  detail::require_same_shape(p, target, "masked_mse_rows");
  if (static_cast<Eigen::Index>(row_mask.size()) != p.rows()) throw std::invalid_argument("masked_mse_rows: mask size mismatch");
  Eigen::Index valid = 0;
  T total = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    if (!row_mask[static_cast<std::size_t>(r)]) continue;
    total += (p.row(r) - target.row(r)).squaredNorm();
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("masked_mse_rows: empty mask");
  const T denom = static_cast<T>(valid * p.cols());
  Mat<T> out = Mat<T>::Constant(1, 1, total / denom);
  return pred.tape->push(std::move(out), detail::any_needs(pred),
                         [pred, target, row_mask, denom](Tape<T>& tp, const Mat<T>& g) {
                           const Mat<T>& pv = tp.value(pred);
                           Mat<T> gp = Mat<T>::Zero(pv.rows(), pv.cols());
                           for (Eigen::Index r = 0; r < pv.rows(); ++r) {
                             if (row_mask[static_cast<std::size_t>(r)]) gp.row(r) = (pv.row(r) - target.row(r)) * (T(2) * g(0, 0) / denom);
                           }
                           tp.accumulate(pred, gp);
                         });
}

}  // namespace recon3d

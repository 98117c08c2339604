#pragma once

// Minimal dense tensor with reverse-mode autodiff. Rank 0..2, row-major,
// 64-bit floats. Exactly the operator set the model and losses need.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gridflow/errors.hpp"

namespace gridflow::ad {

using Eigen::ArrayXd;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatrixRM>;
using CMapM = Eigen::Map<const MatrixRM>;

// Set to false around teacher/inference forwards to skip tape construction.
inline thread_local bool grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled) { grad_enabled = false; }
  ~NoGradGuard() { grad_enabled = prev; }
};

struct Node {
  std::vector<int> shape;
  ArrayXd value;
  ArrayXd grad;  // sized lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::string name;

  int numel() const { return static_cast<int>(value.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape) {
    auto n = std::make_shared<Node>();
    int sz = 1;
    for (int d : shape) sz *= d;
    n->shape = std::move(shape);
    n->value = ArrayXd::Zero(sz);
    return Tensor(n);
  }

  static Tensor from_array(std::vector<int> shape, ArrayXd values) {
    auto n = std::make_shared<Node>();
    int sz = 1;
    for (int d : shape) sz *= d;
    if (sz != values.size()) throw ShapeMismatch("from_array: shape/data size mismatch");
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(n);
  }

  static Tensor scalar(double v) {
    auto n = std::make_shared<Node>();
    n->value = ArrayXd::Constant(1, v);
    return Tensor(n);
  }

  Tensor& set_requires_grad(bool rg = true) {
    node_->requires_grad = rg;
    return *this;
  }
  Tensor& set_name(std::string name) {
    node_->name = std::move(name);
    return *this;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rows() const { return node_->rows(); }
  int cols() const { return node_->cols(); }
  int numel() const { return node_->numel(); }
  const std::string& name() const { return node_->name; }
  bool requires_grad() const { return node_->requires_grad; }

  ArrayXd& value() { return node_->value; }
  const ArrayXd& value() const { return node_->value; }
  ArrayXd& grad() { return node_->grad; }
  const ArrayXd& grad() const { return node_->grad; }
  double item() const {
    if (numel() != 1) throw ShapeMismatch("item() on non-scalar");
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_result(std::vector<int> shape, ArrayXd value,
                                         std::vector<std::shared_ptr<Node>> parents,
                                         std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward);
  }
  return n;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(op) + ": shapes differ");
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  return Tensor(detail::make_result(
      a.shape(), a.value() + b.value(), {an, bn}, [](Node& n) {
        n.parents[0]->grad += n.grad;
        n.parents[1]->grad += n.grad;
      }));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  return Tensor(detail::make_result(
      a.shape(), a.value() - b.value(), {an, bn}, [](Node& n) {
        n.parents[0]->grad += n.grad;
        n.parents[1]->grad -= n.grad;
      }));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  return Tensor(detail::make_result(
      a.shape(), a.value() * b.value(), {an, bn}, [](Node& n) {
        n.parents[0]->grad += n.grad * n.parents[1]->value;
        n.parents[1]->grad += n.grad * n.parents[0]->value;
      }));
}

inline Tensor scale(const Tensor& a, double c) {
  return Tensor(detail::make_result(
      a.shape(), a.value() * c, {a.node()},
      [c](Node& n) { n.parents[0]->grad += n.grad * c; }));
}

inline Tensor relu(const Tensor& a) {
  return Tensor(detail::make_result(
      a.shape(), a.value().max(0.0), {a.node()}, [](Node& n) {
        n.parents[0]->grad += n.grad * (n.parents[0]->value > 0.0).cast<double>();
      }));
}

inline Tensor sigmoid(const Tensor& a) {
  ArrayXd s = 1.0 / (1.0 + (-a.value()).exp());
  return Tensor(detail::make_result(
      a.shape(), s, {a.node()},
      [](Node& n) { n.parents[0]->grad += n.grad * n.value * (1.0 - n.value); }));
}

inline Tensor abs(const Tensor& a) {
  return Tensor(detail::make_result(
      a.shape(), a.value().abs(), {a.node()}, [](Node& n) {
        n.parents[0]->grad += n.grad * n.parents[0]->value.sign();
      }));
}

inline Tensor sin(const Tensor& a) {
  return Tensor(detail::make_result(
      a.shape(), a.value().sin(), {a.node()},
      [](Node& n) { n.parents[0]->grad += n.grad * n.parents[0]->value.cos(); }));
}

inline Tensor cos(const Tensor& a) {
  return Tensor(detail::make_result(
      a.shape(), a.value().cos(), {a.node()},
      [](Node& n) { n.parents[0]->grad -= n.grad * n.parents[0]->value.sin(); }));
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw ShapeMismatch("matmul: need [m,k]x[k,n]");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  ArrayXd out(m * n);
  MapM(out.data(), m, n).noalias() =
      CMapM(a.value().data(), m, k) * CMapM(b.value().data(), k, n);
  return Tensor(detail::make_result(
      {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& node) {
        CMapM g(node.grad.data(), m, n);
        CMapM av(node.parents[0]->value.data(), m, k);
        CMapM bv(node.parents[1]->value.data(), k, n);
        MapM(node.parents[0]->grad.data(), m, k).noalias() += g * bv.transpose();
        MapM(node.parents[1]->grad.data(), k, n).noalias() += av.transpose() * g;
      }));
}

// matrix + row-vector broadcast (bias add)
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.shape().size() != 2 || v.numel() != a.cols())
    throw ShapeMismatch("add_rowvec: width mismatch");
  const int m = a.rows(), c = a.cols();
  ArrayXd out = a.value();
  for (int i = 0; i < m; ++i) out.segment(i * c, c) += v.value();
  return Tensor(detail::make_result(
      {m, c}, std::move(out), {a.node(), v.node()}, [m, c](Node& n) {
        n.parents[0]->grad += n.grad;
        for (int i = 0; i < m; ++i)
          n.parents[1]->grad += n.grad.segment(i * c, c);
      }));
}

// rowwise scale by a constant weight vector (no gradient into the weights)
inline Tensor scale_rows(const Tensor& a, const Eigen::VectorXd& w) {
  if (a.rows() != w.size()) throw ShapeMismatch("scale_rows: row count mismatch");
  const int m = a.rows(), c = a.cols();
  ArrayXd out = a.value();
  for (int i = 0; i < m; ++i) out.segment(i * c, c) *= w[i];
  auto wcopy = std::make_shared<Eigen::VectorXd>(w);
  return Tensor(detail::make_result(
      a.shape(), std::move(out), {a.node()}, [m, c, wcopy](Node& n) {
        for (int i = 0; i < m; ++i)
          n.parents[0]->grad.segment(i * c, c) += n.grad.segment(i * c, c) * (*wcopy)[i];
      }));
}

// ---- shape ops ----

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: empty");
  const int c = parts[0].cols();
  int m = 0;
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.cols() != c)
      throw ShapeMismatch("concat_rows: column mismatch");
    m += p.rows();
    ps.push_back(p.node());
  }
  ArrayXd out(m * c);
  int off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.numel()) = p.value();
    off += p.numel();
  }
  return Tensor(detail::make_result({m, c}, std::move(out), ps, [](Node& n) {
    int off = 0;
    for (auto& p : n.parents) {
      p->grad += n.grad.segment(off, p->value.size());
      off += static_cast<int>(p->value.size());
    }
  }));
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: empty");
  const int m = parts[0].rows();
  int c = 0;
  std::vector<std::shared_ptr<Node>> ps;
  std::vector<int> widths;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.rows() != m)
      throw ShapeMismatch("concat_cols: row mismatch");
    widths.push_back(p.cols());
    c += p.cols();
    ps.push_back(p.node());
  }
  ArrayXd out(m * c);
  int coff = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const int w = widths[k];
    for (int i = 0; i < m; ++i)
      out.segment(i * c + coff, w) = parts[k].value().segment(i * w, w);
    coff += w;
  }
  return Tensor(detail::make_result(
      {m, c}, std::move(out), ps, [m, c, widths](Node& n) {
        int coff = 0;
        for (size_t k = 0; k < n.parents.size(); ++k) {
          const int w = widths[k];
          for (int i = 0; i < m; ++i)
            n.parents[k]->grad.segment(i * w, w) += n.grad.segment(i * c + coff, w);
          coff += w;
        }
      }));
}

inline Tensor slice_rows(const Tensor& a, int start, int len) {
  if (a.shape().size() != 2 || start < 0 || start + len > a.rows())
    throw ShapeMismatch("slice_rows: out of range");
  const int c = a.cols();
  ArrayXd out = a.value().segment(start * c, len * c);
  return Tensor(detail::make_result(
      {len, c}, std::move(out), {a.node()}, [start, len, c](Node& n) {
        n.parents[0]->grad.segment(start * c, len * c) += n.grad;
      }));
}

inline Tensor slice_cols(const Tensor& a, int start, int len) {
  if (a.shape().size() != 2 || start < 0 || start + len > a.cols())
    throw ShapeMismatch("slice_cols: out of range");
  const int m = a.rows(), c = a.cols();
  ArrayXd out(m * len);
  for (int i = 0; i < m; ++i)
    out.segment(i * len, len) = a.value().segment(i * c + start, len);
  return Tensor(detail::make_result(
      {m, len}, std::move(out), {a.node()}, [m, c, start, len](Node& n) {
        for (int i = 0; i < m; ++i)
          n.parents[0]->grad.segment(i * c + start, len) += n.grad.segment(i * len, len);
      }));
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  int sz = 1;
  for (int d : shape) sz *= d;
  if (sz != a.numel()) throw ShapeMismatch("reshape: size mismatch");
  return Tensor(detail::make_result(std::move(shape), a.value(), {a.node()},
                                    [](Node& n) { n.parents[0]->grad += n.grad; }));
}

// rows of a ([n,c]) picked by index list; also accepts rank-1 a as [n,1]
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  const int c = a.cols();
  const int n = a.rows();
  ArrayXd out(static_cast<int>(idx.size()) * c);
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= n) throw ShapeMismatch("gather_rows: index out of range");
    out.segment(static_cast<int>(k) * c, c) = a.value().segment(idx[k] * c, c);
  }
  std::vector<int> shape = a.shape().size() == 2
                               ? std::vector<int>{static_cast<int>(idx.size()), c}
                               : std::vector<int>{static_cast<int>(idx.size())};
  auto icopy = std::make_shared<std::vector<int>>(idx);
  return Tensor(detail::make_result(
      std::move(shape), std::move(out), {a.node()}, [c, icopy](Node& n) {
        for (size_t k = 0; k < icopy->size(); ++k)
          n.parents[0]->grad.segment((*icopy)[k] * c, c) +=
              n.grad.segment(static_cast<int>(k) * c, c);
      }));
}

// scatter-add rows of a into a fresh [n_out, c] tensor at positions idx
inline Tensor scatter_add_rows(const Tensor& a, const std::vector<int>& idx, int n_out) {
  if (static_cast<int>(idx.size()) != a.rows())
    throw ShapeMismatch("scatter_add_rows: index count != rows");
  const int c = a.cols();
  ArrayXd out = ArrayXd::Zero(n_out * c);
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= n_out)
      throw ShapeMismatch("scatter_add_rows: index out of range");
    out.segment(idx[k] * c, c) += a.value().segment(static_cast<int>(k) * c, c);
  }
  std::vector<int> shape = a.shape().size() == 2 ? std::vector<int>{n_out, c}
                                                 : std::vector<int>{n_out};
  auto icopy = std::make_shared<std::vector<int>>(idx);
  return Tensor(detail::make_result(
      std::move(shape), std::move(out), {a.node()}, [c, icopy](Node& n) {
        for (size_t k = 0; k < icopy->size(); ++k)
          n.parents[0]->grad.segment(static_cast<int>(k) * c, c) +=
              n.grad.segment((*icopy)[k] * c, c);
      }));
}

// ---- reductions ----

inline Tensor sum_all(const Tensor& a) {
  return Tensor(detail::make_result(
      {}, ArrayXd::Constant(1, a.value().sum()), {a.node()},
      [](Node& n) { n.parents[0]->grad += n.grad[0]; }));
}

inline Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / a.numel();
  return Tensor(detail::make_result(
      {}, ArrayXd::Constant(1, a.value().mean()), {a.node()},
      [inv](Node& n) { n.parents[0]->grad += n.grad[0] * inv; }));
}

// column-wise reduction over rows (axis 0): [m,c] -> [c]
enum class Reduce { Sum, Mean, Max };

inline Tensor reduce_rows(const Tensor& a, Reduce kind) {
  if (a.shape().size() != 2) throw ShapeMismatch("reduce_rows: need rank 2");
  const int m = a.rows(), c = a.cols();
  ArrayXd out(c);
  std::vector<int> argmax(kind == Reduce::Max ? c : 0);
  CMapM av(a.value().data(), m, c);
  if (kind == Reduce::Max) {
    for (int j = 0; j < c; ++j) {
      int best = 0;
      for (int i = 1; i < m; ++i)
        if (av(i, j) > av(best, j)) best = i;
      argmax[j] = best;
      out[j] = av(best, j);
    }
  } else {
    for (int j = 0; j < c; ++j) out[j] = av.col(j).sum();
    if (kind == Reduce::Mean) out /= m;
  }
  auto am = std::make_shared<std::vector<int>>(std::move(argmax));
  return Tensor(detail::make_result(
      {c}, std::move(out), {a.node()}, [m, c, kind, am](Node& n) {
        MapM pg(n.parents[0]->grad.data(), m, c);
        if (kind == Reduce::Max) {
          for (int j = 0; j < c; ++j) pg((*am)[j], j) += n.grad[j];
        } else {
          const double s = kind == Reduce::Mean ? 1.0 / m : 1.0;
          for (int j = 0; j < c; ++j) pg.col(j) += Eigen::VectorXd::Constant(m, n.grad[j] * s);
        }
      }));
}

// rowwise sum: [m,c] -> [m]
inline Tensor sum_cols(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeMismatch("sum_cols: need rank 2");
  const int m = a.rows(), c = a.cols();
  ArrayXd out(m);
  for (int i = 0; i < m; ++i) out[i] = a.value().segment(i * c, c).sum();
  return Tensor(detail::make_result(
      {m}, std::move(out), {a.node()}, [m, c](Node& n) {
        for (int i = 0; i < m; ++i)
          n.parents[0]->grad.segment(i * c, c) += n.grad[i];
      }));
}

// scale row i of a by s[i]; gradients flow into both operands
inline Tensor mul_colvec(const Tensor& a, const Tensor& s) {
  if (a.shape().size() != 2 || s.numel() != a.rows())
    throw ShapeMismatch("mul_colvec: row/scale count mismatch");
  const int m = a.rows(), c = a.cols();
  ArrayXd out = a.value();
  for (int i = 0; i < m; ++i) out.segment(i * c, c) *= s.value()[i];
  return Tensor(detail::make_result(
      {m, c}, std::move(out), {a.node(), s.node()}, [m, c](Node& n) {
        for (int i = 0; i < m; ++i) {
          n.parents[0]->grad.segment(i * c, c) +=
              n.grad.segment(i * c, c) * n.parents[1]->value[i];
          n.parents[1]->grad[i] +=
              (n.grad.segment(i * c, c) * n.parents[0]->value.segment(i * c, c)).sum();
        }
      }));
}

// column-wise reduction per row segment: [m,c] with seg ids in 0..S-1 -> [S,c]
inline Tensor segment_reduce_rows(const Tensor& a, const std::vector<int>& seg, int S,
                                  Reduce kind) {
  if (a.shape().size() != 2 || static_cast<int>(seg.size()) != a.rows())
    throw ShapeMismatch("segment_reduce_rows: segment ids must cover the rows");
  const int m = a.rows(), c = a.cols();
  ArrayXd out(S * c);
  std::vector<int> count(S, 0);
  for (int s : seg) {
    if (s < 0 || s >= S) throw ShapeMismatch("segment_reduce_rows: segment id out of range");
    ++count[s];
  }
  std::vector<int> argmax(kind == Reduce::Max ? S * c : 0, -1);
  if (kind == Reduce::Max) {
    out.setConstant(-std::numeric_limits<double>::infinity());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) {
        const double v = a.value()[i * c + j];
        if (v > out[seg[i] * c + j]) {
          out[seg[i] * c + j] = v;
          argmax[seg[i] * c + j] = i;
        }
      }
    for (int s = 0; s < S; ++s)
      if (!count[s]) throw ShapeMismatch("segment_reduce_rows: empty segment under Max");
  } else {
    out.setZero();
    for (int i = 0; i < m; ++i)
      out.segment(seg[i] * c, c) += a.value().segment(i * c, c);
    if (kind == Reduce::Mean)
      for (int s = 0; s < S; ++s)
        if (count[s]) out.segment(s * c, c) /= count[s];
  }
  auto segp = std::make_shared<std::vector<int>>(seg);
  auto cnt = std::make_shared<std::vector<int>>(std::move(count));
  auto am = std::make_shared<std::vector<int>>(std::move(argmax));
  return Tensor(detail::make_result(
      {S, c}, std::move(out), {a.node()}, [m, c, kind, segp, cnt, am](Node& n) {
        if (kind == Reduce::Max) {
          for (size_t k = 0; k < am->size(); ++k)
            if ((*am)[k] >= 0)
              n.parents[0]->grad[(*am)[k] * c + static_cast<int>(k) % c] +=
                  n.grad[static_cast<int>(k)];
        } else {
          for (int i = 0; i < m; ++i) {
            const int s = (*segp)[i];
            const double w = kind == Reduce::Mean ? 1.0 / (*cnt)[s] : 1.0;
            n.parents[0]->grad.segment(i * c, c) += n.grad.segment(s * c, c) * w;
          }
        }
      }));
}

// softmax of a rank-1 score vector over rows sharing a segment id
inline Tensor segment_softmax(const Tensor& a, const std::vector<int>& seg, int S) {
  if (a.shape().size() != 1 || static_cast<int>(seg.size()) != a.numel())
    throw ShapeMismatch("segment_softmax: need rank-1 scores with one segment id each");
  const int m = a.numel();
  ArrayXd mx = ArrayXd::Constant(S, -std::numeric_limits<double>::infinity());
  for (int i = 0; i < m; ++i) {
    if (seg[i] < 0 || seg[i] >= S) throw ShapeMismatch("segment_softmax: id out of range");
    mx[seg[i]] = std::max(mx[seg[i]], a.value()[i]);
  }
  ArrayXd denom = ArrayXd::Zero(S), out(m);
  for (int i = 0; i < m; ++i) {
    out[i] = std::exp(a.value()[i] - mx[seg[i]]);
    denom[seg[i]] += out[i];
  }
  for (int i = 0; i < m; ++i) out[i] /= denom[seg[i]];
  auto segp = std::make_shared<std::vector<int>>(seg);
  return Tensor(detail::make_result(
      {m}, std::move(out), {a.node()}, [m, S, segp](Node& n) {
        ArrayXd dot = ArrayXd::Zero(S);
        for (int i = 0; i < m; ++i) dot[(*segp)[i]] += n.value[i] * n.grad[i];
        for (int i = 0; i < m; ++i)
          n.parents[0]->grad[i] += n.value[i] * (n.grad[i] - dot[(*segp)[i]]);
      }));
}

// softmax over axis 0 (down the rows, per column)
inline Tensor softmax_rows(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeMismatch("softmax_rows: need rank 2");
  const int m = a.rows(), c = a.cols();
  ArrayXd out(m * c);
  CMapM av(a.value().data(), m, c);
  MapM ov(out.data(), m, c);
  for (int j = 0; j < c; ++j) {
    const double mx = av.col(j).maxCoeff();
    Eigen::VectorXd e = (av.col(j).array() - mx).exp();
    ov.col(j) = e / e.sum();
  }
  return Tensor(detail::make_result(
      a.shape(), std::move(out), {a.node()}, [m, c](Node& n) {
        CMapM y(n.value.data(), m, c);
        CMapM g(n.grad.data(), m, c);
        MapM pg(n.parents[0]->grad.data(), m, c);
        for (int j = 0; j < c; ++j) {
          const double dot = (y.col(j).array() * g.col(j).array()).sum();
          pg.col(j).array() += y.col(j).array() * (g.col(j).array() - dot);
        }
      }));
}

// row-wise layer normalization with learned gain/bias over the feature axis
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (a.shape().size() != 2 || gain.numel() != a.cols() || bias.numel() != a.cols())
    throw ShapeMismatch("layer_norm: gain/bias width mismatch");
  const int m = a.rows(), c = a.cols();
  ArrayXd xhat(m * c), out(m * c), inv_std(m);
  for (int i = 0; i < m; ++i) {
    auto row = a.value().segment(i * c, c);
    const double mu = row.mean();
    const double var = (row - mu).square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.segment(i * c, c) = (row - mu) * inv_std[i];
    out.segment(i * c, c) = xhat.segment(i * c, c) * gain.value() + bias.value();
  }
  auto xh = std::make_shared<ArrayXd>(std::move(xhat));
  auto is = std::make_shared<ArrayXd>(std::move(inv_std));
  return Tensor(detail::make_result(
      {m, c}, std::move(out), {a.node(), gain.node(), bias.node()},
      [m, c, xh, is](Node& n) {
        for (int i = 0; i < m; ++i) {
          auto g = n.grad.segment(i * c, c);
          auto x = xh->segment(i * c, c);
          // d/dgain, d/dbias
          n.parents[1]->grad += g * x;
          n.parents[2]->grad += g;
          // d/dx through normalization
          ArrayXd gy = g * n.parents[1]->value;  // upstream through gain
          const double mean_gy = gy.mean();
          const double mean_gyx = (gy * x).mean();
          n.parents[0]->grad.segment(i * c, c) +=
              (*is)[i] * (gy - mean_gy - x * mean_gyx);
        }
      }));
}

inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape(pred, target, "l1_loss");
  return mean_all(abs(sub(pred, target)));
}

// ---- backward ----

inline void backward(const Tensor& root) {
  if (root.numel() != 1) throw BackwardOnNonScalar("backward from non-scalar root");
  // collect reachable nodes in topological order (parents before children)
  std::vector<Node*> order;
  std::map<Node*, int> state;  // 0 unvisited, 1 in progress, 2 done
  std::vector<std::pair<Node*, size_t>> stack{{root.node().get(), 0}};
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i == 0) state[n] = 1;
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (state[p] == 0) stack.push_back({p, 0});
    } else {
      state[n] = 2;
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = ArrayXd::Zero(n->value.size());
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace gridflow::ad

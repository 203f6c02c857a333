// autodiff.hpp - reverse-mode automatic differentiation over Eigen matrices
//
// A Tape owns the computation graph of one loss evaluation. Nodes hold
// dense matrices (rows = batch entries, cols = features). Ops are free
// functions creating new nodes; backward() runs the recorded closures in
// reverse creation order. Gradients accumulate lazily, so constant-only
// subgraphs cost nothing on the backward pass.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "mamba/common.hpp"
#include "mamba/rng.hpp"

namespace mamba::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  inline const Mat& val() const;
  inline Eigen::Index rows() const;
  inline Eigen::Index cols() const;
};

class Tape {
 public:
  Var constant(Mat v) { return push(std::move(v), false); }
  Var input(Mat v) { return push(std::move(v), true); }

  Var push(Mat v, bool requires_grad) {
    nodes_.push_back(Node{std::move(v), Mat(), requires_grad, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_backprop(Var v, std::function<void()> fn) { nodes_[v.id].backprop = std::move(fn); }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of the last backward() root w.r.t. v (zeros if v untouched).
  Mat grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accum(Var v, const Mat& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }
  // Block-sparse accumulation used by column slices.
  void accum_cols(Var v, Eigen::Index col0, const Mat& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad.middleCols(col0, g.cols()) += g;
  }
  void accum_rows(Var v, Eigen::Index row0, const Mat& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad.middleRows(row0, g.rows()) += g;
  }

  void backward(Var root) {
    if (!root.valid() || root.tape != this) throw InvalidInputError("backward: foreign var");
    if (value(root).size() != 1) throw InvalidInputError("backward: root must be scalar");
    nodes_[root.id].grad = Mat::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.grad.size() != 0 && n.backprop) n.backprop();
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    std::function<void()> backprop;
  };
  std::vector<Node> nodes_;
};

inline const Mat& Var::val() const { return tape->value(*this); }
inline Eigen::Index Var::rows() const { return val().rows(); }
inline Eigen::Index Var::cols() const { return val().cols(); }

namespace detail {
inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}
inline Var unary(Var a, Mat value, std::function<void(Tape&, Var, Var)> back) {
  Tape& t = *a.tape;
  Var out = t.push(std::move(value), t.requires_grad(a));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, out, back = std::move(back)]() { back(t, a, out); });
  return out;
}
}  // namespace detail

// ---- arithmetic ----

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Var out = t.push(a.val() + b.val(), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      const Mat& g = t.grad(out);
      t.accum(a, g);
      t.accum(b, g);
    });
  return out;
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Var out = t.push(a.val() - b.val(), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      t.accum(a, t.grad(out));
      t.accum(b, -t.grad(out));
    });
  return out;
}

// a + row vector b, broadcast over rows (bias add).
inline Var add_rowvec(Var a, Var b) {
  Tape& t = *a.tape;
  require(b.rows() == 1 && a.cols() == b.cols(), "add_rowvec: shape mismatch");
  Var out = t.push(a.val().rowwise() + RowVec(b.val().row(0)), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      const Mat& g = t.grad(out);
      t.accum(a, g);
      t.accum(b, g.colwise().sum());
    });
  return out;
}

inline Var cmul(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "cmul: shape mismatch");
  Var out = t.push(a.val().cwiseProduct(b.val()), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      const Mat& g = t.grad(out);
      t.accum(a, g.cwiseProduct(b.val()));
      t.accum(b, g.cwiseProduct(a.val()));
    });
  return out;
}

inline Var scale(Var a, Real s) {
  return detail::unary(a, a.val() * s, [s](Tape& t, Var a, Var out) { t.accum(a, t.grad(out) * s); });
}

inline Var add_const(Var a, const Mat& m) {
  require(a.rows() == m.rows() && a.cols() == m.cols(), "add_const: shape mismatch");
  return detail::unary(a, a.val() + m, [](Tape& t, Var a, Var out) { t.accum(a, t.grad(out)); });
}

inline Var cmul_const(Var a, Mat m) {
  require(a.rows() == m.rows() && a.cols() == m.cols(), "cmul_const: shape mismatch");
  Mat v = a.val().cwiseProduct(m);
  return detail::unary(a, std::move(v), [m = std::move(m)](Tape& t, Var a, Var out) {
    t.accum(a, t.grad(out).cwiseProduct(m));
  });
}

inline Var neg(Var a) { return scale(a, -1.0); }

// ---- matrix products ----

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.cols() == b.rows(), "matmul: inner dim mismatch");
  Var out = t.push(a.val() * b.val(), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      const Mat& g = t.grad(out);
      if (t.requires_grad(a)) t.accum(a, g * b.val().transpose());
      if (t.requires_grad(b)) t.accum(b, a.val().transpose() * g);
    });
  return out;
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.cols() == b.cols(), "matmul_nt: inner dim mismatch");
  Var out = t.push(a.val() * b.val().transpose(), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      const Mat& g = t.grad(out);
      if (t.requires_grad(a)) t.accum(a, g * b.val());
      if (t.requires_grad(b)) t.accum(b, g.transpose() * a.val());
    });
  return out;
}

// ---- elementwise nonlinearities ----

inline Var tanh_(Var a) {
  Mat v = a.val().array().tanh();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, t.grad(out).cwiseProduct((1.0 - out.val().array().square()).matrix()));
  });
}

inline Var sigmoid_(Var a) {
  Mat v = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    const auto& s = out.val().array();
    t.accum(a, t.grad(out).cwiseProduct((s * (1.0 - s)).matrix()));
  });
}

inline Var elu_(Var a) {
  Mat v = a.val().unaryExpr([](Real x) { return x > 0 ? x : std::expm1(x); });
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    Mat d = a.val().binaryExpr(out.val(), [](Real x, Real y) { return x > 0 ? 1.0 : y + 1.0; });
    t.accum(a, t.grad(out).cwiseProduct(d));
  });
}

inline Var relu_(Var a) {
  Mat v = a.val().cwiseMax(0.0);
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    Mat d = (a.val().array() > 0.0).cast<Real>();
    t.accum(a, t.grad(out).cwiseProduct(d));
  });
}

inline Var exp_(Var a) {
  Mat v = a.val().array().exp();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, t.grad(out).cwiseProduct(out.val()));
  });
}

inline Var log_(Var a) {
  Mat v = a.val().array().log();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, t.grad(out).cwiseQuotient(a.val()));
  });
}

// Numerically stable ln(1 + e^x); gradient is sigmoid(x).
inline Var softplus_(Var a) {
  Mat v = a.val().unaryExpr([](Real x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    Mat d = a.val().unaryExpr([](Real x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.accum(a, t.grad(out).cwiseProduct(d));
  });
}

inline Var square_(Var a) {
  Mat v = a.val().array().square();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, 2.0 * t.grad(out).cwiseProduct(a.val()));
  });
}

// Pass-through inside [lo, hi], zero gradient outside.
inline Var clamp_(Var a, Real lo, Real hi) {
  Mat v = a.val().cwiseMax(lo).cwiseMin(hi);
  return detail::unary(a, std::move(v), [lo, hi](Tape& t, Var a, Var out) {
    Mat d = a.val().unaryExpr([lo, hi](Real x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    t.accum(a, t.grad(out).cwiseProduct(d));
  });
}

// Elementwise min/max; ties route the gradient to a.
inline Var min_(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "min_: shape mismatch");
  Var out = t.push(a.val().cwiseMin(b.val()), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      Mat pick_a = (a.val().array() <= b.val().array()).cast<Real>();
      const Mat& g = t.grad(out);
      t.accum(a, g.cwiseProduct(pick_a));
      t.accum(b, g.cwiseProduct((1.0 - pick_a.array()).matrix()));
    });
  return out;
}

inline Var max_(Var a, Var b) {
  Tape& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "max_: shape mismatch");
  Var out = t.push(a.val().cwiseMax(b.val()), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out]() {
      Mat pick_a = (a.val().array() >= b.val().array()).cast<Real>();
      const Mat& g = t.grad(out);
      t.accum(a, g.cwiseProduct(pick_a));
      t.accum(b, g.cwiseProduct((1.0 - pick_a.array()).matrix()));
    });
  return out;
}

// ---- shape ops ----

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty");
  Tape& t = *parts[0].tape;
  Eigen::Index rows = parts[0].rows(), total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    total += p.cols();
    rg = rg || t.requires_grad(p);
  }
  Mat v(rows, total);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.val();
    off += p.cols();
  }
  Var out = t.push(std::move(v), rg);
  if (rg)
    t.set_backprop(out, [&t, parts, out]() {
      const Mat& g = t.grad(out);
      Eigen::Index off = 0;
      for (const Var& p : parts) {
        t.accum(p, g.middleCols(off, p.cols()));
        off += p.cols();
      }
    });
  return out;
}

inline Var slice_cols(Var a, Eigen::Index col0, Eigen::Index width) {
  require(col0 >= 0 && col0 + width <= a.cols(), "slice_cols: out of range");
  Mat v = a.val().middleCols(col0, width);
  return detail::unary(a, std::move(v), [col0](Tape& t, Var a, Var out) {
    t.accum_cols(a, col0, t.grad(out));
  });
}

inline Var slice_rows(Var a, Eigen::Index row0, Eigen::Index height) {
  require(row0 >= 0 && row0 + height <= a.rows(), "slice_rows: out of range");
  Mat v = a.val().middleRows(row0, height);
  return detail::unary(a, std::move(v), [row0](Tape& t, Var a, Var out) {
    t.accum_rows(a, row0, t.grad(out));
  });
}

inline Var stopgrad(Var a) { return a.tape->constant(a.val()); }

// ---- reductions ----

inline Var sum_all(Var a) {
  Mat v(1, 1);
  v(0, 0) = a.val().sum();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, Mat::Constant(a.rows(), a.cols(), t.grad(out)(0, 0)));
  });
}

inline Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<Real>(a.val().size())); }

inline Var row_sum(Var a) {
  Mat v = a.val().rowwise().sum();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, t.grad(out) * Mat::Ones(1, a.cols()));
  });
}

inline Var col_sum(Var a) {
  Mat v = a.val().colwise().sum();
  return detail::unary(a, std::move(v), [](Tape& t, Var a, Var out) {
    t.accum(a, Mat::Ones(a.rows(), 1) * t.grad(out));
  });
}

// out(i,0) = a(i, idx[i]); backward scatters.
inline Var select_cols(Var a, std::vector<int> idx) {
  require(static_cast<Eigen::Index>(idx.size()) == a.rows(), "select_cols: index count mismatch");
  Mat v(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    require(idx[i] >= 0 && idx[i] < a.cols(), "select_cols: index out of range");
    v(i, 0) = a.val()(i, idx[i]);
  }
  return detail::unary(a, std::move(v), [idx = std::move(idx)](Tape& t, Var a, Var out) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    const Mat& go = t.grad(out);
    for (Eigen::Index i = 0; i < a.rows(); ++i) g(i, idx[i]) = go(i, 0);
    t.accum(a, g);
  });
}

// ---- softmax families ----
// Softmax within consecutive column groups of `classes` entries. A full-row
// softmax is the single-group case.

inline Var group_softmax(Var a, int classes) {
  require(classes >= 1 && a.cols() % classes == 0, "group_softmax: bad group width");
  const Eigen::Index groups = a.cols() / classes;
  Mat v(a.rows(), a.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    auto block = a.val().middleCols(g * classes, classes);
    Vec mx = block.rowwise().maxCoeff();
    Mat e = (block.colwise() - mx).array().exp();
    v.middleCols(g * classes, classes) = e.array().colwise() / e.rowwise().sum().array();
  }
  return detail::unary(a, std::move(v), [classes, groups](Tape& t, Var a, Var out) {
    const Mat& p = out.val();
    const Mat& g = t.grad(out);
    Mat d(p.rows(), p.cols());
    for (Eigen::Index gi = 0; gi < groups; ++gi) {
      auto pb = p.middleCols(gi * classes, classes);
      auto gb = g.middleCols(gi * classes, classes);
      Vec dot = (pb.array() * gb.array()).rowwise().sum();
      d.middleCols(gi * classes, classes) = pb.array() * (gb.array().colwise() - dot.array());
    }
    t.accum(a, d);
  });
}

inline Var group_log_softmax(Var a, int classes) {
  require(classes >= 1 && a.cols() % classes == 0, "group_log_softmax: bad group width");
  const Eigen::Index groups = a.cols() / classes;
  Mat v(a.rows(), a.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    auto block = a.val().middleCols(g * classes, classes);
    Vec mx = block.rowwise().maxCoeff();
    Mat shifted = block.colwise() - mx;
    Vec lse = shifted.array().exp().rowwise().sum().log();
    v.middleCols(g * classes, classes) = shifted.colwise() - lse;
  }
  return detail::unary(a, std::move(v), [classes, groups](Tape& t, Var a, Var out) {
    const Mat& lp = out.val();
    const Mat& g = t.grad(out);
    Mat d(lp.rows(), lp.cols());
    for (Eigen::Index gi = 0; gi < groups; ++gi) {
      auto lb = lp.middleCols(gi * classes, classes);
      auto gb = g.middleCols(gi * classes, classes);
      Vec gsum = gb.rowwise().sum();
      d.middleCols(gi * classes, classes) =
          gb - (lb.array().exp().colwise() * gsum.array()).matrix();
    }
    t.accum(a, d);
  });
}

// ---- structural ops ----

// Row-wise blend: out.row(i) = w(i) * a.row(i) + (1 - w(i)) * b.row(i).
inline Var blend_rows(Var a, Var b, Vec w) {
  Tape& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "blend_rows: shape mismatch");
  require(w.size() == a.rows(), "blend_rows: weight size mismatch");
  Mat v = (a.val().array().colwise() * w.array()) + (b.val().array().colwise() * (1.0 - w.array()));
  Var out = t.push(std::move(v), detail::any_grad({a, b}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, a, b, out, w = std::move(w)]() {
      const Mat& g = t.grad(out);
      t.accum(a, (g.array().colwise() * w.array()).matrix());
      t.accum(b, (g.array().colwise() * (1.0 - w.array())).matrix());
    });
  return out;
}

// Inverted dropout: kept entries scale by 1/(1-p). Identity when p == 0.
inline Var dropout(Var a, Real p, RngStream& rng) {
  if (p <= 0.0) return a;
  require(p < 1.0, "dropout: p must be < 1");
  Mat mask(a.rows(), a.cols());
  const Real keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index c = 0; c < a.cols(); ++c)
    for (Eigen::Index r = 0; r < a.rows(); ++r) mask(r, c) = rng.uniform() < p ? 0.0 : keep_scale;
  return cmul_const(a, std::move(mask));
}

// Row-wise layer normalization with learned gain/bias row vectors.
inline Var layer_norm(Var x, Var gain, Var bias, Real eps = 1e-5) {
  Tape& t = *x.tape;
  require(gain.rows() == 1 && bias.rows() == 1 && gain.cols() == x.cols() && bias.cols() == x.cols(),
          "layer_norm: gain/bias must be 1 x cols");
  Vec mean = x.val().rowwise().mean();
  Mat centered = x.val().colwise() - mean;
  Vec inv_std = (centered.array().square().rowwise().mean() + eps).rsqrt();
  Mat xhat = centered.array().colwise() * inv_std.array();
  Mat v = (xhat.array().rowwise() * gain.val().row(0).array()).rowwise() + bias.val().row(0).array();
  Var out = t.push(std::move(v), detail::any_grad({x, gain, bias}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const Mat& g = t.grad(out);
      t.accum(gain, (g.array() * xhat.array()).colwise().sum().matrix());
      t.accum(bias, g.colwise().sum());
      if (!t.requires_grad(x)) return;
      Mat dxhat = g.array().rowwise() * gain.val().row(0).array();
      Vec m1 = dxhat.rowwise().mean();
      Vec m2 = (dxhat.array() * xhat.array()).rowwise().mean();
      Mat dx = ((dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix()).array().colwise() *
               inv_std.array();
      t.accum(x, dx);
    });
  return out;
}

// Masked single-head attention over consecutive row blocks of size n.
// Block b holds rows [b*n, (b+1)*n). Entry (i,j) of a mask permits row i
// of the block to attend to row j. Masked-out pairs get exactly zero
// weight; rows are softmax-normalized over permitted entries only.
inline Var block_attention(Var q, Var k, Var v, const std::vector<BoolMat>& masks, int n) {
  Tape& t = *q.tape;
  require(n >= 1 && q.rows() % n == 0, "block_attention: rows not divisible by n");
  require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols(),
          "block_attention: shape mismatch");
  const Eigen::Index blocks = q.rows() / n;
  require(masks.size() == 1 || static_cast<Eigen::Index>(masks.size()) == blocks,
          "block_attention: mask count mismatch");
  const Real inv_sqrt_d = 1.0 / std::sqrt(static_cast<Real>(q.cols()));

  std::vector<Mat> probs(blocks);
  Mat out_v(q.rows(), v.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const BoolMat& m = masks[masks.size() == 1 ? 0 : b];
    require(m.rows() == n && m.cols() == n, "block_attention: mask shape");
    Mat s = q.val().middleRows(b * n, n) * k.val().middleRows(b * n, n).transpose() * inv_sqrt_d;
    Mat p = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = 0; j < n; ++j)
        if (m(i, j)) mx = std::max(mx, s(i, j));
      if (!std::isfinite(mx)) throw InternalError("block_attention: row with no permitted entries");
      Real z = 0;
      for (int j = 0; j < n; ++j)
        if (m(i, j)) z += std::exp(s(i, j) - mx);
      for (int j = 0; j < n; ++j)
        if (m(i, j)) p(i, j) = std::exp(s(i, j) - mx) / z;
    }
    out_v.middleRows(b * n, n) = p * v.val().middleRows(b * n, n);
    probs[b] = std::move(p);
  }
  Var out = t.push(std::move(out_v), detail::any_grad({q, k, v}));
  if (t.requires_grad(out))
    t.set_backprop(out, [&t, q, k, v, out, probs = std::move(probs), n, blocks, inv_sqrt_d]() {
      const Mat& g = t.grad(out);
      Mat dq = Mat::Zero(q.rows(), q.cols());
      Mat dk = Mat::Zero(k.rows(), k.cols());
      Mat dv = Mat::Zero(v.rows(), v.cols());
      for (Eigen::Index b = 0; b < blocks; ++b) {
        const Mat& p = probs[b];
        auto gb = g.middleRows(b * n, n);
        auto qb = q.val().middleRows(b * n, n);
        auto kb = k.val().middleRows(b * n, n);
        auto vb = v.val().middleRows(b * n, n);
        dv.middleRows(b * n, n) = p.transpose() * gb;
        Mat dp = gb * vb.transpose();
        Vec dot = (dp.array() * p.array()).rowwise().sum();
        Mat ds = (p.array() * (dp.array().colwise() - dot.array())).matrix() * inv_sqrt_d;
        dq.middleRows(b * n, n) = ds * kb;
        dk.middleRows(b * n, n) = ds.transpose() * qb;
      }
      t.accum(q, dq);
      t.accum(k, dk);
      t.accum(v, dv);
    });
  return out;
}

}  // namespace mamba::ad

// nn.hpp - parameters, layers, and the Adam optimizer
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mamba/autodiff.hpp"
#include "mamba/common.hpp"
#include "mamba/rng.hpp"

namespace mamba::nn {

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m, adam_v;

  void init_zero(const std::string& n, Eigen::Index rows, Eigen::Index cols) {
    name = n;
    value = Mat::Zero(rows, cols);
    reset_state();
  }
  void init_const(const std::string& n, Eigen::Index rows, Eigen::Index cols, Real c) {
    name = n;
    value = Mat::Constant(rows, cols, c);
    reset_state();
  }
  void init_glorot(const std::string& n, Eigen::Index rows, Eigen::Index cols, RngStream& rng) {
    name = n;
    value.resize(rows, cols);
    const Real limit = std::sqrt(6.0 / static_cast<Real>(rows + cols));
    rng.fill_uniform(value, -limit, limit);
    reset_state();
  }
  void reset_state() {
    grad = Mat::Zero(value.rows(), value.cols());
    adam_m = Mat::Zero(value.rows(), value.cols());
    adam_v = Mat::Zero(value.rows(), value.cols());
  }
};

// Binds parameters into one tape forward pass and routes gradients back.
class Binder {
 public:
  explicit Binder(ad::Tape& tape) : tape_(&tape) {}
  ad::Tape& tape() { return *tape_; }

  ad::Var operator()(Param& p) {
    for (const auto& [q, v] : bound_)
      if (q == &p) return v;
    ad::Var v = tape_->input(p.value);
    bound_.emplace_back(&p, v);
    return v;
  }

  // Call after tape.backward(); accumulates into Param::grad.
  void collect_grads() {
    for (const auto& [p, v] : bound_) p->grad += tape_->grad(v);
  }

 private:
  ad::Tape* tape_;
  std::vector<std::pair<Param*, ad::Var>> bound_;
};

struct Linear {
  Param W, b;

  void init(const std::string& name, Eigen::Index in, Eigen::Index out, RngStream& rng) {
    W.init_glorot(name + ".W", in, out, rng);
    b.init_zero(name + ".b", 1, out);
  }
  Mat apply(const Mat& x) const { return (x * W.value).rowwise() + RowVec(b.value.row(0)); }
  ad::Var apply(Binder& bind, ad::Var x) { return ad::add_rowvec(ad::matmul(x, bind(W)), bind(b)); }
  void params(std::vector<Param*>& out) { out.push_back(&W); out.push_back(&b); }
};

enum class Act { None, Tanh, Elu, Relu };

inline Mat act_apply(Act a, Mat x) {
  switch (a) {
    case Act::None: return x;
    case Act::Tanh: return x.array().tanh();
    case Act::Elu: return x.unaryExpr([](Real v) { return v > 0 ? v : std::expm1(v); });
    case Act::Relu: return x.cwiseMax(0.0);
  }
  return x;
}
inline ad::Var act_apply(Act a, ad::Var x) {
  switch (a) {
    case Act::None: return x;
    case Act::Tanh: return ad::tanh_(x);
    case Act::Elu: return ad::elu_(x);
    case Act::Relu: return ad::relu_(x);
  }
  return x;
}

// Hidden layers with one activation, then a linear output head.
struct Mlp {
  std::vector<Linear> layers;
  Act act = Act::Elu;

  void init(const std::string& name, Eigen::Index in, const std::vector<Eigen::Index>& hidden,
            Eigen::Index out, RngStream& rng, Act activation = Act::Elu) {
    act = activation;
    layers.clear();
    Eigen::Index prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers.emplace_back();
      layers.back().init(name + ".h" + std::to_string(i), prev, hidden[i], rng);
      prev = hidden[i];
    }
    layers.emplace_back();
    layers.back().init(name + ".out", prev, out, rng);
  }
  Mat apply(const Mat& x) const {
    Mat h = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = act_apply(act, layers[i].apply(h));
    return layers.back().apply(h);
  }
  ad::Var apply(Binder& bind, ad::Var x) {
    ad::Var h = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = act_apply(act, layers[i].apply(bind, h));
    return layers.back().apply(bind, h);
  }
  void params(std::vector<Param*>& out) {
    for (auto& l : layers) l.params(out);
  }
};

// Single-layer GRU. With all parameters zero both gates sit at 0.5 and the
// candidate is 0, so the update reduces to h' = h/2.
struct GruCell {
  Param Wxr, Whr, br;
  Param Wxu, Whu, bu;
  Param Wxn, Whn, bn;

  void init(const std::string& name, Eigen::Index in, Eigen::Index dim, RngStream& rng) {
    Wxr.init_glorot(name + ".Wxr", in, dim, rng);
    Whr.init_glorot(name + ".Whr", dim, dim, rng);
    br.init_zero(name + ".br", 1, dim);
    Wxu.init_glorot(name + ".Wxu", in, dim, rng);
    Whu.init_glorot(name + ".Whu", dim, dim, rng);
    bu.init_zero(name + ".bu", 1, dim);
    Wxn.init_glorot(name + ".Wxn", in, dim, rng);
    Whn.init_glorot(name + ".Whn", dim, dim, rng);
    bn.init_zero(name + ".bn", 1, dim);
  }

  Mat apply(const Mat& h, const Mat& x) const {
    auto sigm = [](Mat m) { return Mat((1.0 / (1.0 + (-m.array()).exp())).matrix()); };
    Mat r = sigm(((x * Wxr.value + h * Whr.value).rowwise() + RowVec(br.value.row(0))));
    Mat u = sigm(((x * Wxu.value + h * Whu.value).rowwise() + RowVec(bu.value.row(0))));
    Mat n = Mat((((x * Wxn.value).rowwise() + RowVec(bn.value.row(0))) + r.cwiseProduct(h * Whn.value))
                    .array()
                    .tanh());
    return (1.0 - u.array()).matrix().cwiseProduct(n) + u.cwiseProduct(h);
  }

  ad::Var apply(Binder& bind, ad::Var h, ad::Var x) {
    using namespace ad;
    Var r = sigmoid_(add_rowvec(add(matmul(x, bind(Wxr)), matmul(h, bind(Whr))), bind(br)));
    Var u = sigmoid_(add_rowvec(add(matmul(x, bind(Wxu)), matmul(h, bind(Whu))), bind(bu)));
    Var n = tanh_(add(add_rowvec(matmul(x, bind(Wxn)), bind(bn)), cmul(r, matmul(h, bind(Whn)))));
    Mat ones = Mat::Ones(h.rows(), h.cols());
    Var one = h.tape->constant(ones);
    return add(cmul(sub(one, u), n), cmul(u, h));
  }

  void params(std::vector<Param*>& out) {
    for (Param* p : {&Wxr, &Whr, &br, &Wxu, &Whu, &bu, &Wxn, &Whn, &bn}) out.push_back(p);
  }
};

struct LayerNorm {
  Param gain, bias;
  void init(const std::string& name, Eigen::Index dim) {
    gain.init_const(name + ".gain", 1, dim, 1.0);
    bias.init_zero(name + ".bias", 1, dim);
  }
  Mat apply(const Mat& x, Real eps = 1e-5) const {
    Vec mean = x.rowwise().mean();
    Mat centered = x.colwise() - mean;
    Vec inv_std = (centered.array().square().rowwise().mean() + eps).rsqrt();
    Mat xhat = centered.array().colwise() * inv_std.array();
    return (xhat.array().rowwise() * gain.value.row(0).array()).rowwise() + bias.value.row(0).array();
  }
  ad::Var apply(Binder& bind, ad::Var x) { return ad::layer_norm(x, bind(gain), bind(bias)); }
  void params(std::vector<Param*>& out) { out.push_back(&gain); out.push_back(&bias); }
};

// Adam over a fixed parameter set, with global-norm gradient clipping.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param*> params, Real lr, Real clip_norm)
      : params_(std::move(params)), lr_(lr), clip_(clip_norm) {}

  void zero_grad() {
    for (Param* p : params_) p->grad.setZero();
  }

  Real grad_norm() const {
    Real sq = 0;
    for (const Param* p : params_) sq += p->grad.squaredNorm();
    return std::sqrt(sq);
  }

  void step() {
    ++t_;
    Real scale = 1.0;
    if (clip_ > 0) {
      const Real norm = grad_norm();
      if (norm > clip_) scale = clip_ / norm;
    }
    const Real bc1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
    for (Param* p : params_) {
      Mat g = p->grad * scale;
      p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * g;
      p->adam_v = beta2_ * p->adam_v + (1.0 - beta2_) * g.cwiseProduct(g);
      p->value -= (lr_ / bc1) *
                  (p->adam_m.array() / ((p->adam_v.array() / bc2).sqrt() + eps_)).matrix();
    }
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const std::vector<Param*>& params() const { return params_; }

 private:
  std::vector<Param*> params_;
  Real lr_ = 1e-3;
  Real clip_ = 0;
  Real beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
};

}  // namespace mamba::nn

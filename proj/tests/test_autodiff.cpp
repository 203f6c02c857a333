#include <catch2/catch_amalgamated.hpp>

#include "mamba/autodiff.hpp"
#include "mamba/nn.hpp"
#include "test_util.hpp"

using namespace mamba;
using testutil::gradcheck;
using testutil::random_mat;

namespace {

// Reduce any matrix-valued graph to a scalar with fixed random weights so
// every output coordinate contributes to the checked gradient.
ad::Var weighted_sum(ad::Var x, std::uint64_t seed = 7) {
  RngStream rng(seed);
  Mat w(x.rows(), x.cols());
  rng.fill_uniform(w, -1.0, 1.0);
  return ad::sum_all(ad::cmul_const(x, w));
}

}  // namespace

TEST_CASE("basic op gradients match finite differences", "[autodiff]") {
  RngStream rng(42);
  auto check1 = [&](const char* name, auto op, Eigen::Index r, Eigen::Index c, Real lo = -1, Real hi = 1) {
    std::vector<Mat> in{random_mat(r, c, rng, lo, hi)};
    auto res = gradcheck(
        [&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(op(v[0])); }, in);
    INFO(name << " rel err " << res.max_rel_err);
    CHECK(res.ok(1e-6));
  };

  check1("tanh", [](ad::Var a) { return ad::tanh_(a); }, 3, 4);
  check1("sigmoid", [](ad::Var a) { return ad::sigmoid_(a); }, 3, 4);
  check1("elu", [](ad::Var a) { return ad::elu_(a); }, 3, 4);
  check1("relu", [](ad::Var a) { return ad::relu_(a); }, 3, 4);
  check1("exp", [](ad::Var a) { return ad::exp_(a); }, 3, 4);
  check1("log", [](ad::Var a) { return ad::log_(a); }, 3, 4, 0.2, 2.0);
  check1("square", [](ad::Var a) { return ad::square_(a); }, 3, 4);
  check1("clamp", [](ad::Var a) { return ad::clamp_(a, -0.5, 0.5); }, 3, 4);
  check1("softmax", [](ad::Var a) { return ad::group_softmax(a, 4); }, 3, 4);
  check1("group_softmax", [](ad::Var a) { return ad::group_softmax(a, 3); }, 2, 6);
  check1("log_softmax", [](ad::Var a) { return ad::group_log_softmax(a, 4); }, 3, 4);
  check1("group_log_softmax", [](ad::Var a) { return ad::group_log_softmax(a, 3); }, 2, 6);
  check1("row_sum", [](ad::Var a) { return ad::row_sum(a); }, 3, 4);
  check1("col_sum", [](ad::Var a) { return ad::col_sum(a); }, 3, 4);
  check1("slice", [](ad::Var a) { return ad::slice_cols(a, 1, 2); }, 3, 4);
}

TEST_CASE("binary op gradients match finite differences", "[autodiff]") {
  RngStream rng(43);
  auto check2 = [&](const char* name, auto op, Eigen::Index r, Eigen::Index c, Eigen::Index r2,
                    Eigen::Index c2) {
    std::vector<Mat> in{random_mat(r, c, rng), random_mat(r2, c2, rng)};
    auto res = gradcheck(
        [&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(op(v[0], v[1])); }, in);
    INFO(name << " rel err " << res.max_rel_err);
    CHECK(res.ok(1e-6));
  };

  check2("add", [](ad::Var a, ad::Var b) { return ad::add(a, b); }, 3, 4, 3, 4);
  check2("sub", [](ad::Var a, ad::Var b) { return ad::sub(a, b); }, 3, 4, 3, 4);
  check2("cmul", [](ad::Var a, ad::Var b) { return ad::cmul(a, b); }, 3, 4, 3, 4);
  check2("matmul", [](ad::Var a, ad::Var b) { return ad::matmul(a, b); }, 3, 4, 4, 2);
  check2("matmul_nt", [](ad::Var a, ad::Var b) { return ad::matmul_nt(a, b); }, 3, 4, 5, 4);
  check2("add_rowvec", [](ad::Var a, ad::Var b) { return ad::add_rowvec(a, b); }, 3, 4, 1, 4);
  check2("min", [](ad::Var a, ad::Var b) { return ad::min_(a, b); }, 3, 4, 3, 4);
  check2("max", [](ad::Var a, ad::Var b) { return ad::max_(a, b); }, 3, 4, 3, 4);
}

TEST_CASE("concat and select gradients", "[autodiff]") {
  RngStream rng(44);
  std::vector<Mat> in{random_mat(3, 2, rng), random_mat(3, 3, rng)};
  auto res = gradcheck(
      [&](ad::Tape& t, const std::vector<ad::Var>& v) {
        return weighted_sum(ad::concat_cols({v[0], v[1]}));
      },
      in);
  CHECK(res.ok(1e-6));

  std::vector<Mat> in2{random_mat(4, 3, rng)};
  auto res2 = gradcheck(
      [&](ad::Tape& t, const std::vector<ad::Var>& v) {
        return weighted_sum(ad::select_cols(v[0], {2, 0, 1, 2}));
      },
      in2);
  CHECK(res2.ok(1e-6));
}

TEST_CASE("layer_norm gradient", "[autodiff]") {
  RngStream rng(45);
  std::vector<Mat> in{random_mat(3, 5, rng), random_mat(1, 5, rng, 0.5, 1.5), random_mat(1, 5, rng)};
  auto res = gradcheck(
      [&](ad::Tape& t, const std::vector<ad::Var>& v) {
        return weighted_sum(ad::layer_norm(v[0], v[1], v[2]));
      },
      in);
  INFO("layer_norm rel err " << res.max_rel_err);
  CHECK(res.ok(1e-5));
}

TEST_CASE("block attention gradient with mask", "[autodiff]") {
  RngStream rng(46);
  const int n = 3;
  BoolMat mask(n, n);
  mask << true, true, false, true, true, true, false, true, true;
  std::vector<Mat> in{random_mat(2 * n, 4, rng), random_mat(2 * n, 4, rng), random_mat(2 * n, 5, rng)};
  auto res = gradcheck(
      [&](ad::Tape& t, const std::vector<ad::Var>& v) {
        return weighted_sum(ad::block_attention(v[0], v[1], v[2], {mask}, n));
      },
      in);
  INFO("block_attention rel err " << res.max_rel_err);
  CHECK(res.ok(1e-5));
}

TEST_CASE("dropout backward uses the forward mask", "[autodiff]") {
  RngStream fwd(99);
  RngStream bwd(99);
  Mat x = random_mat(4, 6, fwd);
  ad::Tape t;
  ad::Var xv = t.input(x);
  ad::Var y = ad::dropout(xv, 0.4, bwd);
  ad::Var loss = ad::sum_all(y);
  t.backward(loss);
  Mat g = t.grad(xv);
  // Gradient entries are exactly the dropout mask: 0 where dropped,
  // 1/(1-p) where kept, and y == x .* mask.
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Real m = g(r, c);
      CHECK((m == 0.0 || std::abs(m - 1.0 / 0.6) < 1e-12));
      CHECK(y.val()(r, c) == m * x(r, c));
    }
}

TEST_CASE("stopgrad blocks the path", "[autodiff]") {
  RngStream rng(47);
  Mat x = random_mat(2, 2, rng);
  ad::Tape t;
  ad::Var xv = t.input(x);
  ad::Var loss = ad::sum_all(ad::cmul(ad::stopgrad(xv), xv));
  t.backward(loss);
  // d/dx sum(sg(x) * x) = sg(x) = x
  CHECK((t.grad(xv) - x).norm() < 1e-12);
}

TEST_CASE("gru zero weights halve the hidden state", "[nn]") {
  RngStream rng(1);
  nn::GruCell gru;
  gru.init("gru", 3, 5, rng);
  for (nn::Param* p : [&] { std::vector<nn::Param*> ps; gru.params(ps); return ps; }())
    p->value.setZero();
  Mat h = random_mat(4, 5, rng);
  Mat x = random_mat(4, 3, rng);
  Mat out = gru.apply(h, x);
  CHECK((out - 0.5 * h).norm() < 1e-12);
}

TEST_CASE("gru tape and plain paths agree, gradients check out", "[nn]") {
  RngStream rng(2);
  nn::GruCell gru;
  gru.init("gru", 3, 4, rng);
  Mat h = random_mat(2, 4, rng);
  Mat x = random_mat(2, 3, rng);

  ad::Tape t;
  nn::Binder bind(t);
  ad::Var out = gru.apply(bind, t.constant(h), t.constant(x));
  CHECK((out.val() - gru.apply(h, x)).norm() < 1e-12);

  // Jacobian w.r.t. h_prev against central differences.
  std::vector<Mat> in{h, x};
  auto res = gradcheck(
      [&](ad::Tape& tape, const std::vector<ad::Var>& v) {
        nn::Binder b(tape);
        return weighted_sum(gru.apply(b, v[0], v[1]));
      },
      in, 1e-5);
  INFO("gru rel err " << res.max_rel_err);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("mlp gradcheck through parameters", "[nn]") {
  RngStream rng(3);
  nn::Mlp mlp;
  mlp.init("mlp", 3, {5}, 2, rng, nn::Act::Elu);
  Mat x = random_mat(4, 3, rng);

  // Check parameter gradients via the Binder path.
  ad::Tape t;
  nn::Binder bind(t);
  ad::Var out = mlp.apply(bind, t.constant(x));
  ad::Var loss = weighted_sum(out);
  t.backward(loss);
  bind.collect_grads();

  std::vector<nn::Param*> ps;
  mlp.params(ps);
  for (nn::Param* p : ps) {
    for (Eigen::Index c = 0; c < p->value.cols(); ++c)
      for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
        const Real h = 1e-6 * std::max<Real>(1.0, std::abs(p->value(r, c)));
        const Real orig = p->value(r, c);
        auto eval = [&] {
          ad::Tape t2;
          nn::Binder b2(t2);
          return weighted_sum(mlp.apply(b2, t2.constant(x))).val()(0, 0);
        };
        p->value(r, c) = orig + h;
        const Real up = eval();
        p->value(r, c) = orig - h;
        const Real down = eval();
        p->value(r, c) = orig;
        const Real numeric = (up - down) / (2 * h);
        CHECK(std::abs(numeric - p->grad(r, c)) < 1e-5 * std::max<Real>(1.0, std::abs(numeric)));
      }
  }
}

TEST_CASE("adam drives a quadratic to its minimum", "[nn]") {
  nn::Param p;
  p.init_const("p", 2, 2, 3.0);
  nn::Adam opt({&p}, 0.05, 0.0);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    p.grad = 2.0 * p.value;  // d/dp ||p||^2
    opt.step();
  }
  CHECK(p.value.norm() < 1e-2);
}

TEST_CASE("adam global norm clip rescales the step", "[nn]") {
  nn::Param a, b;
  a.init_const("a", 1, 1, 0.0);
  b.init_const("b", 1, 1, 0.0);
  nn::Adam opt({&a, &b}, 1.0, 1.0);
  a.grad = Mat::Constant(1, 1, 30.0);
  b.grad = Mat::Constant(1, 1, 40.0);
  CHECK(opt.grad_norm() == Catch::Approx(50.0));
  opt.step();
  // After clipping to norm 1, gradients are 0.6 and 0.8; the first Adam
  // step moves each coordinate by about -lr * sign(g).
  CHECK(a.value(0, 0) < 0);
  CHECK(b.value(0, 0) < 0);
}

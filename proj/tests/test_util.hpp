// test_util.hpp - shared helpers for the test suite
#pragma once

#include <functional>
#include <vector>

#include "mamba/autodiff.hpp"
#include "mamba/common.hpp"
#include "mamba/rng.hpp"

namespace testutil {

using mamba::Mat;
using mamba::Real;

inline Mat random_mat(Eigen::Index r, Eigen::Index c, mamba::RngStream& rng, Real lo = -1.0, Real hi = 1.0) {
  Mat m(r, c);
  rng.fill_uniform(m, lo, hi);
  return m;
}

// Central-finite-difference check of a scalar-valued tape function.
// `build` must construct the graph from the current contents of `inputs`
// and return the scalar root. Every coordinate of every input is probed.
struct GradCheckResult {
  Real max_abs_err = 0;
  Real max_rel_err = 0;
  bool ok(Real tol) const { return max_rel_err < tol; }
};

inline GradCheckResult gradcheck(
    const std::function<mamba::ad::Var(mamba::ad::Tape&, const std::vector<mamba::ad::Var>&)>& build,
    std::vector<Mat>& inputs, Real h = 1e-6) {
  using namespace mamba;
  GradCheckResult res;

  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (Mat& m : inputs) vars.push_back(tape.input(m));
  ad::Var root = build(tape, vars);
  tape.backward(root);
  std::vector<Mat> analytic;
  for (ad::Var v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Mat>& xs) {
    ad::Tape t2;
    std::vector<ad::Var> vs;
    for (const Mat& m : xs) vs.push_back(t2.constant(m));
    return build(t2, vs).val()(0, 0);
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index c = 0; c < inputs[i].cols(); ++c)
      for (Eigen::Index r = 0; r < inputs[i].rows(); ++r) {
        std::vector<Mat> xs = inputs;
        const Real step = h * std::max<Real>(1.0, std::abs(inputs[i](r, c)));
        xs[i](r, c) += step;
        const Real up = eval(xs);
        xs[i](r, c) -= 2 * step;
        const Real down = eval(xs);
        const Real numeric = (up - down) / (2 * step);
        const Real exact = analytic[i](r, c);
        const Real abs_err = std::abs(numeric - exact);
        const Real rel_err = abs_err / std::max<Real>({1e-8, std::abs(numeric), std::abs(exact)});
        res.max_abs_err = std::max(res.max_abs_err, abs_err);
        res.max_rel_err = std::max(res.max_rel_err, std::min(rel_err, abs_err));
      }
  }
  return res;
}

// Chi-square statistic against a uniform distribution over k bins.
inline Real chi_square_uniform(const std::vector<long>& counts, long total) {
  const Real expected = static_cast<Real>(total) / counts.size();
  Real stat = 0;
  for (long c : counts) {
    const Real d = c - expected;
    stat += d * d / expected;
  }
  return stat;
}

}  // namespace testutil

// latent.hpp - discrete stochastic state: K categorical groups of C classes
//
// The flat layout is group-major: column g*C + c holds class c of group g.
// Logits are clamped to [-15, 15] before any softmax so KL terms stay
// finite on untrained networks.
#pragma once

#include <vector>

#include "mamba/autodiff.hpp"
#include "mamba/common.hpp"
#include "mamba/config.hpp"
#include "mamba/rng.hpp"

namespace mamba {

constexpr Real kLogitClamp = 15.0;

struct CategoricalLatent {
  int groups = 0;
  int classes = 0;
  std::vector<int> indices;  // chosen class per group

  RowVec flat() const {
    RowVec out = RowVec::Zero(groups * classes);
    for (int g = 0; g < groups; ++g) out(g * classes + indices[g]) = 1.0;
    return out;
  }
  Mat sample_matrix() const {
    Mat out = Mat::Zero(groups, classes);
    for (int g = 0; g < groups; ++g) out(g, indices[g]) = 1.0;
    return out;
  }
};

// ---- plain (no-tape) paths ----

inline Mat clamp_logits(const Mat& logits) {
  return logits.cwiseMax(-kLogitClamp).cwiseMin(kLogitClamp);
}

// Softmax per group over flat rows [B x K*C].
inline Mat latent_probs_rows(const Mat& logits_rows, int classes) {
  require(logits_rows.cols() % classes == 0, "latent_probs_rows: bad width");
  Mat clamped = clamp_logits(logits_rows);
  const Eigen::Index groups = clamped.cols() / classes;
  Mat out(clamped.rows(), clamped.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    auto block = clamped.middleCols(g * classes, classes);
    Vec mx = block.rowwise().maxCoeff();
    Mat e = (block.colwise() - mx).array().exp();
    out.middleCols(g * classes, classes) = e.array().colwise() / e.rowwise().sum().array();
  }
  return out;
}

// Draw one class per group for every row; returns one-hot rows.
inline Mat sample_onehot_rows(const Mat& probs_rows, int classes, RngStream& rng) {
  const Eigen::Index groups = probs_rows.cols() / classes;
  Mat out = Mat::Zero(probs_rows.rows(), probs_rows.cols());
  std::vector<Real> w(classes);
  for (Eigen::Index r = 0; r < probs_rows.rows(); ++r)
    for (Eigen::Index g = 0; g < groups; ++g) {
      for (int c = 0; c < classes; ++c) w[c] = probs_rows(r, g * classes + c);
      out(r, g * classes + rng.categorical(w.data(), classes)) = 1.0;
    }
  return out;
}

// Sample a latent from per-group logits [K x C].
inline CategoricalLatent sample_categorical(const Mat& logits_kc, RngStream& rng) {
  if (!all_finite(logits_kc)) throw InvalidInputError("sample_categorical: non-finite logits");
  CategoricalLatent z;
  z.groups = static_cast<int>(logits_kc.rows());
  z.classes = static_cast<int>(logits_kc.cols());
  z.indices.resize(z.groups);
  Mat flat(1, z.groups * z.classes);
  for (int g = 0; g < z.groups; ++g) flat.block(0, g * z.classes, 1, z.classes) = logits_kc.row(g);
  Mat probs = latent_probs_rows(flat, z.classes);
  std::vector<Real> w(z.classes);
  for (int g = 0; g < z.groups; ++g) {
    for (int c = 0; c < z.classes; ++c) w[c] = probs(0, g * z.classes + c);
    z.indices[g] = rng.categorical(w.data(), z.classes);
  }
  return z;
}

inline std::vector<int> indices_from_flat(const RowVec& flat, int groups, int classes) {
  require(flat.size() == static_cast<Eigen::Index>(groups) * classes, "indices_from_flat: bad size");
  std::vector<int> idx(groups, -1);
  for (int g = 0; g < groups; ++g) {
    int count = 0;
    for (int c = 0; c < classes; ++c) {
      const Real v = flat(g * classes + c);
      if (v == 1.0) {
        idx[g] = c;
        ++count;
      } else if (v != 0.0) {
        throw InvalidInputError("indices_from_flat: entry not in {0,1}");
      }
    }
    require(count == 1, "indices_from_flat: group must have exactly one active class");
  }
  return idx;
}

inline RowVec flat_from_indices(const std::vector<int>& idx, int groups, int classes) {
  require(static_cast<int>(idx.size()) == groups, "flat_from_indices: bad group count");
  RowVec out = RowVec::Zero(static_cast<Eigen::Index>(groups) * classes);
  for (int g = 0; g < groups; ++g) {
    require(idx[g] >= 0 && idx[g] < classes, "flat_from_indices: class out of range");
    out(g * classes + idx[g]) = 1.0;
  }
  return out;
}

// ---- tape paths ----

inline ad::Var latent_probs(ad::Var logits, int classes) {
  return ad::group_softmax(ad::clamp_(logits, -kLogitClamp, kLogitClamp), classes);
}
inline ad::Var latent_log_probs(ad::Var logits, int classes) {
  return ad::group_log_softmax(ad::clamp_(logits, -kLogitClamp, kLogitClamp), classes);
}

// Discrete sample with straight-through backward: the value is the one-hot
// sample, the sensitivity w.r.t. logits is that of the softmax itself.
inline ad::Var straight_through(ad::Var probs, const Mat& onehot) {
  return ad::add_const(probs, onehot - probs.val());
}

// Per-row KL(q || p) summed over groups -> [rows x 1].
inline ad::Var kl_groups(ad::Var q_logits, ad::Var p_logits, int classes) {
  ad::Var q = latent_probs(q_logits, classes);
  ad::Var lq = latent_log_probs(q_logits, classes);
  ad::Var lp = latent_log_probs(p_logits, classes);
  return ad::row_sum(ad::cmul(q, ad::sub(lq, lp)));
}

// KL balancing: w_cross * KL(sg(q) || p) + w_ent * KL(q || sg(p)).
// Stop-gradients leave the forward value equal to the plain KL.
inline ad::Var kl_balanced(ad::Var q_logits, ad::Var p_logits, int classes, Real w_cross, Real w_ent) {
  if (std::abs(w_cross + w_ent - 1.0) > 1e-12)
    throw ConfigError("KL balance weights must sum to 1");
  ad::Var cross = kl_groups(ad::stopgrad(q_logits), p_logits, classes);
  ad::Var ent = kl_groups(q_logits, ad::stopgrad(p_logits), classes);
  return ad::add(ad::scale(cross, w_cross), ad::scale(ent, w_ent));
}

}  // namespace mamba

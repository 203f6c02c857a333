// comm.hpp - the communication block and message-exchange primitives
//
// Per step every agent broadcasts its previous stochastic state and action.
// The block embeds each (z, a) row once and then runs stacked attention
// layers in which only the agent's own feature evolves: queries come from
// the evolving feature, keys and values stay bound to the layer-0
// embeddings. That binding is what keeps locality airtight (a non-neighbor
// has zero influence on e^i at every depth) and lets a decentralized
// replica reproduce the centralized encoding exactly from one round of
// (z, a) messages.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mamba/autodiff.hpp"
#include "mamba/common.hpp"
#include "mamba/nn.hpp"

namespace mamba {

// Eq.-style masked soft self-attention over full matrices. Row i is the
// softmax over permitted j of (Q_i . K_j / sqrt(d)) weighting V_j.
// `mult_counter`, when given, accumulates scalar multiply counts.
inline Mat soft_attention(const Mat& q, const Mat& k, const Mat& v, const BoolMat& mask,
                          std::uint64_t* mult_counter = nullptr) {
  require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols(),
          "soft_attention: shape mismatch");
  require(mask.rows() == q.rows() && mask.cols() == q.rows(), "soft_attention: mask shape");
  const int n = static_cast<int>(q.rows());
  const Real inv_sqrt_d = 1.0 / std::sqrt(static_cast<Real>(q.cols()));
  Mat out(n, v.cols());
  for (int i = 0; i < n; ++i) {
    if (!mask(i, i)) throw InternalError("soft_attention: diagonal must be permitted");
    Real mx = -std::numeric_limits<Real>::infinity();
    std::vector<Real> score(n, 0.0);
    for (int j = 0; j < n; ++j) {
      if (!mask(i, j)) continue;
      score[j] = q.row(i).dot(k.row(j)) * inv_sqrt_d;
      if (mult_counter) *mult_counter += static_cast<std::uint64_t>(q.cols()) + 1;
      mx = std::max(mx, score[j]);
    }
    Real z = 0;
    for (int j = 0; j < n; ++j)
      if (mask(i, j)) z += std::exp(score[j] - mx);
    RowVec acc = RowVec::Zero(v.cols());
    for (int j = 0; j < n; ++j) {
      if (!mask(i, j)) continue;
      acc += (std::exp(score[j] - mx) / z) * v.row(j);
      if (mult_counter) *mult_counter += static_cast<std::uint64_t>(v.cols()) + 1;
    }
    out.row(i) = acc;
  }
  return out;
}

// One agent's attention row computed from peer key/value summaries. This
// is the O(n) exchange step: the agent holds only its own query row plus
// broadcast k/v rows of permitted peers (sorted by sender id).
inline RowVec linear_exchange_step(const RowVec& own_q, const std::vector<int>& peer_ids,
                                   const Mat& peer_k, const Mat& peer_v,
                                   std::uint64_t* mult_counter = nullptr) {
  require(peer_k.rows() == peer_v.rows() &&
              peer_k.rows() == static_cast<Eigen::Index>(peer_ids.size()),
          "linear_exchange_step: summary count mismatch");
  if (peer_ids.empty()) throw ProtocolError("linear_exchange_step: no peer summaries");
  for (std::size_t j = 1; j < peer_ids.size(); ++j)
    if (peer_ids[j - 1] >= peer_ids[j])
      throw ProtocolError("linear_exchange_step: summaries must be sorted by sender id");
  const int m = static_cast<int>(peer_ids.size());
  const Real inv_sqrt_d = 1.0 / std::sqrt(static_cast<Real>(own_q.size()));
  std::vector<Real> score(m);
  Real mx = -std::numeric_limits<Real>::infinity();
  for (int j = 0; j < m; ++j) {
    score[j] = own_q.dot(peer_k.row(j)) * inv_sqrt_d;
    if (mult_counter) *mult_counter += static_cast<std::uint64_t>(own_q.size()) + 1;
    mx = std::max(mx, score[j]);
  }
  Real z = 0;
  for (int j = 0; j < m; ++j) z += std::exp(score[j] - mx);
  RowVec acc = RowVec::Zero(peer_v.cols());
  for (int j = 0; j < m; ++j) {
    acc += (std::exp(score[j] - mx) / z) * peer_v.row(j);
    if (mult_counter) *mult_counter += static_cast<std::uint64_t>(peer_v.cols()) + 1;
  }
  return acc;
}

// (i, j) true iff j == i or j is a neighbor of i. Dead agents are dropped
// from columns (except the diagonal) only when `mask_dead` is set.
inline BoolMat build_locality_mask(const BoolMat& neighbors, const std::vector<bool>& alive,
                                   bool mask_dead = false) {
  const int n = static_cast<int>(neighbors.rows());
  require(neighbors.cols() == n, "build_locality_mask: neighbor matrix must be square");
  require(static_cast<int>(alive.size()) == n, "build_locality_mask: alive size mismatch");
  BoolMat mask(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      bool ok = (i == j) || neighbors(i, j);
      if (mask_dead && i != j && !alive[j]) ok = false;
      mask(i, j) = ok;
    }
  return mask;
}

inline BoolMat full_mask(int n) { return BoolMat::Constant(n, n, true); }

// Sinusoidal positional encoding by agent index.
inline Mat positional_encoding(int n, int dim) {
  Mat pe = Mat::Zero(n, dim);
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i < dim; ++i) {
      const Real angle = pos / std::pow(10000.0, static_cast<Real>(2 * (i / 2)) / dim);
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

struct CommConfig {
  int latent_dim = 0;   // K*C
  int num_actions = 0;
  int d_model = 64;
  int layers = 3;
  Real dropout = 0.1;
  bool positional_encoding = true;
  bool action_embedding = false;
  int action_embed_dim = 16;
};

struct CommLayer {
  nn::Linear wq, wk, wv, wo;
  nn::LayerNorm ln1, ln2;
  nn::Linear ff1, ff2;

  void init(const std::string& name, int d, RngStream& rng) {
    wq.init(name + ".wq", d, d, rng);
    wk.init(name + ".wk", d, d, rng);
    wv.init(name + ".wv", d, d, rng);
    wo.init(name + ".wo", d, d, rng);
    ln1.init(name + ".ln1", d);
    ln2.init(name + ".ln2", d);
    ff1.init(name + ".ff1", d, 2 * d, rng);
    ff2.init(name + ".ff2", 2 * d, d, rng);
  }
  void params(std::vector<nn::Param*>& out) {
    wq.params(out); wk.params(out); wv.params(out); wo.params(out);
    ln1.params(out); ln2.params(out); ff1.params(out); ff2.params(out);
  }
};

// Peer summaries for the O(n) exchange: one k/v row per layer.
struct CommSummaries {
  Mat k;  // [layers x d_model]
  Mat v;
};

class CommBlock {
 public:
  CommConfig cfg;
  nn::Linear action_embed;
  nn::Linear embed;
  std::vector<CommLayer> layers;

  void init(const CommConfig& c, RngStream& rng) {
    cfg = c;
    int action_in = cfg.num_actions;
    if (cfg.action_embedding) {
      action_embed.init("comm.action_embed", cfg.num_actions, cfg.action_embed_dim, rng);
      action_in = cfg.action_embed_dim;
    }
    embed.init("comm.embed", cfg.latent_dim + action_in, cfg.d_model, rng);
    layers.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) layers[l].init("comm.layer" + std::to_string(l), cfg.d_model, rng);
  }

  void params(std::vector<nn::Param*>& out) {
    if (cfg.action_embedding) action_embed.params(out);
    embed.params(out);
    for (auto& l : layers) l.params(out);
  }

  // ---- batched training forward (tape) ----
  // z_rows: [B*n x latent_dim], action_onehot: [B*n x num_actions] constant.
  // One mask per block (or a single shared mask).
  ad::Var forward(nn::Binder& bind, ad::Var z_rows, const Mat& action_onehot,
                  const std::vector<BoolMat>& masks, int n, bool train_mode,
                  RngStream* dropout_rng) {
    CommBlock& self = *this;
    ad::Tape& t = bind.tape();
    require(z_rows.rows() == action_onehot.rows(), "comm_block: z/action row mismatch");
    require(z_rows.rows() % n == 0, "comm_block: rows not divisible by agent count");
    require(z_rows.cols() == cfg.latent_dim, "comm_block: latent width mismatch");
    require(action_onehot.cols() == cfg.num_actions, "comm_block: action width mismatch");
    const Eigen::Index blocks = z_rows.rows() / n;

    ad::Var act_in = t.constant(action_onehot);
    if (cfg.action_embedding) act_in = self.action_embed.apply(bind, act_in);
    ad::Var x0 = self.embed.apply(bind, ad::concat_cols({z_rows, act_in}));
    if (cfg.positional_encoding) {
      Mat pe = positional_encoding(n, cfg.d_model);
      Mat pe_full(z_rows.rows(), cfg.d_model);
      for (Eigen::Index b = 0; b < blocks; ++b) pe_full.middleRows(b * n, n) = pe;
      x0 = ad::add_const(x0, pe_full);
    }

    const bool drop = train_mode && cfg.dropout > 0;
    ad::Var x = x0;
    for (auto& layer : self.layers) {
      ad::Var q = layer.wq.apply(bind, x);
      ad::Var k = layer.wk.apply(bind, x0);
      ad::Var v = layer.wv.apply(bind, x0);
      ad::Var attn = layer.wo.apply(bind, ad::block_attention(q, k, v, masks, n));
      if (drop) attn = ad::dropout(attn, cfg.dropout, *dropout_rng);
      x = layer.ln1.apply(bind, ad::add(x, attn));
      ad::Var ff = layer.ff2.apply(bind, ad::relu_(layer.ff1.apply(bind, x)));
      if (drop) ff = ad::dropout(ff, cfg.dropout, *dropout_rng);
      x = layer.ln2.apply(bind, ad::add(x, ff));
    }
    return x;
  }

  // ---- execution-path helpers (plain, per agent, deterministic order) ----

  // `action < 0` encodes the t=0 bootstrap: a zero action vector (no action
  // taken yet), matching the all-zero one-hot rows the training path sees.
  RowVec embed_row(const RowVec& zflat, int action, int agent_index) const {
    require(zflat.size() == cfg.latent_dim, "embed_row: latent width mismatch");
    require(action < cfg.num_actions, "embed_row: action out of range");
    RowVec onehot = RowVec::Zero(cfg.num_actions);
    if (action >= 0) onehot(action) = 1.0;
    RowVec act = cfg.action_embedding ? RowVec(action_embed.apply(onehot)) : onehot;
    RowVec in(zflat.size() + act.size());
    in << zflat, act;
    RowVec e = embed.apply(in);
    if (cfg.positional_encoding) e += positional_encoding(agent_index + 1, cfg.d_model).row(agent_index);
    return e;
  }

  RowVec embed_bootstrap_row(int agent_index) const {
    return embed_row(RowVec::Zero(cfg.latent_dim), -1, agent_index);
  }

  CommSummaries summaries(const RowVec& embed_row_v) const {
    CommSummaries s;
    s.k.resize(cfg.layers, cfg.d_model);
    s.v.resize(cfg.layers, cfg.d_model);
    for (int l = 0; l < cfg.layers; ++l) {
      s.k.row(l) = layers[l].wk.apply(embed_row_v);
      s.v.row(l) = layers[l].wv.apply(embed_row_v);
    }
    return s;
  }

  // Runs the stacked layers for one agent given its own embedding and the
  // per-layer k/v summaries of permitted peers (sorted by sender id,
  // including the agent itself).
  RowVec refine(const RowVec& own_embed, const std::vector<int>& peer_ids,
                const std::vector<CommSummaries>& peer_summaries,
                std::uint64_t* mult_counter = nullptr) const {
    require(peer_ids.size() == peer_summaries.size(), "refine: id/summary mismatch");
    RowVec x = own_embed;
    const int m = static_cast<int>(peer_ids.size());
    for (int l = 0; l < cfg.layers; ++l) {
      Mat pk(m, cfg.d_model), pv(m, cfg.d_model);
      for (int j = 0; j < m; ++j) {
        pk.row(j) = peer_summaries[j].k.row(l);
        pv.row(j) = peer_summaries[j].v.row(l);
      }
      RowVec q = layers[l].wq.apply(x);
      RowVec attn = layers[l].wo.apply(linear_exchange_step(q, peer_ids, pk, pv, mult_counter));
      x = layers[l].ln1.apply(x + attn);
      RowVec ff = layers[l].ff2.apply(act_apply_row(layers[l].ff1.apply(x)));
      x = layers[l].ln2.apply(x + ff);
    }
    return x;
  }

 private:
  static RowVec act_apply_row(RowVec v) { return v.cwiseMax(0.0); }
};

}  // namespace mamba

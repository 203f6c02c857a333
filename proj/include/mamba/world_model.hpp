// world_model.hpp - recurrent state-space model over communicating agents
//
// Components: the communication block feeds a single-layer GRU; a
// representation MLP infers the stochastic state from (h, own obs); a
// transition MLP predicts it from h alone (so imagination never touches
// observations); per-agent heads decode observation, reward, discount,
// action availability, and the previous action (the mutual-information
// term that replaces autoregressive joint transitions).
//
// Likelihoods: observation and reward are unit-variance Gaussians,
// discount and action-mask heads are Bernoullis, the previous-action
// classifier is a categorical cross-entropy.
#pragma once

#include <cmath>
#include <vector>

#include "mamba/autodiff.hpp"
#include "mamba/buffer.hpp"
#include "mamba/comm.hpp"
#include "mamba/config.hpp"
#include "mamba/latent.hpp"
#include "mamba/nn.hpp"

namespace mamba {

// Per-agent model state: deterministic recurrent part plus the discrete
// stochastic state.
struct ModelState {
  Vec h;
  CategoricalLatent z;
};

struct LossBreakdown {
  Real obs_nll = 0;
  Real reward_nll = 0;
  Real discount_nll = 0;
  Real kl = 0;
  Real info = 0;
  Real total = 0;  // sum of the five terms above, unit weights
  // Trained jointly but reported outside the canonical total.
  Real mask_nll = 0;
  Real grad_norm = 0;
};

struct WorldModelSpec {
  int obs_dim = 0;
  int num_actions = 0;
  int groups = 32;
  int classes = 32;
  int hidden = 64;      // GRU state D
  int mlp_hidden = 64;  // width of representation/transition/head MLPs
  CommConfig comm;
  Real kl_cross = 0.8;
  Real kl_ent = 0.2;
  bool use_kl_balancing = true;
  bool use_info_loss = true;
  Real info_weight = 1.0;
  bool absorbing_posterior_from_prior = false;
  bool mask_dead_agents = false;

  int latent_dim() const { return groups * classes; }

  static WorldModelSpec from_config(const Config& cfg, int obs_dim, int num_actions) {
    WorldModelSpec s;
    s.obs_dim = obs_dim;
    s.num_actions = num_actions;
    s.groups = cfg.latent_groups;
    s.classes = cfg.latent_classes;
    s.hidden = cfg.hidden_size;
    s.mlp_hidden = cfg.hidden_size;
    s.comm.latent_dim = s.latent_dim();
    s.comm.num_actions = num_actions;
    s.comm.d_model = cfg.resolved_comm_dim();
    s.comm.layers = cfg.comm_layers;
    s.comm.dropout = cfg.comm_dropout;
    s.comm.positional_encoding = cfg.use_positional_encoding;
    s.comm.action_embedding = cfg.use_action_embedding;
    s.comm.action_embed_dim = cfg.action_embed_dim;
    s.kl_cross = cfg.kl_balance_cross;
    s.kl_ent = cfg.kl_balance_entropy;
    s.use_kl_balancing = cfg.use_kl_balancing;
    s.use_info_loss = cfg.use_info_loss;
    s.info_weight = cfg.info_loss_weight;
    s.absorbing_posterior_from_prior = cfg.absorbing_posterior_from_prior;
    s.mask_dead_agents = cfg.mask_dead_agents;
    return s;
  }
};

struct HeadOutRow {
  RowVec obs_mean;
  Real reward = 0;
  Real discount_p = 0;
  RowVec mask_p;
  RowVec aprev_logits;
};

struct HeadsBatch {
  Mat obs_mean;
  Vec reward;
  Vec discount_p;
  Mat mask_p;
  Mat aprev_logits;
};

// Optional trace of the posterior unroll, for state snapshots and tests.
struct UnrollTrace {
  std::vector<Mat> h;       // per step [rows x D]
  std::vector<Mat> z_flat;  // per step [rows x K*C] one-hot sample
  bool enabled = false;
};

class WorldModel {
 public:
  WorldModelSpec spec;
  CommBlock comm;
  nn::GruCell gru;
  nn::Mlp repr;           // (h, o) -> posterior logits
  nn::Mlp prior;          // h -> prior logits
  nn::Mlp obs_head;       // (h, z) -> obs mean
  nn::Mlp reward_head;    // (h, z) -> reward mean
  nn::Mlp discount_head;  // (h, z) -> discount logit
  nn::Mlp mask_head;      // (h, z) -> per-action availability logits
  nn::Mlp aprev_head;     // (h, z) -> previous-action logits

  void init(const WorldModelSpec& s, RngStream& rng) {
    spec = s;
    comm.init(spec.comm, rng);
    gru.init("wm.gru", spec.comm.d_model, spec.hidden, rng);
    const int hz = spec.hidden + spec.latent_dim();
    repr.init("wm.repr", spec.hidden + spec.obs_dim, {spec.mlp_hidden}, spec.latent_dim(), rng);
    prior.init("wm.prior", spec.hidden, {spec.mlp_hidden}, spec.latent_dim(), rng);
    obs_head.init("wm.obs", hz, {spec.mlp_hidden}, spec.obs_dim, rng);
    reward_head.init("wm.reward", hz, {spec.mlp_hidden}, 1, rng);
    discount_head.init("wm.discount", hz, {spec.mlp_hidden}, 1, rng);
    mask_head.init("wm.mask", hz, {spec.mlp_hidden}, spec.num_actions, rng);
    aprev_head.init("wm.aprev", hz, {spec.mlp_hidden}, spec.num_actions, rng);
  }

  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out;
    comm.params(out);
    gru.params(out);
    repr.params(out);
    prior.params(out);
    obs_head.params(out);
    reward_head.params(out);
    discount_head.params(out);
    mask_head.params(out);
    aprev_head.params(out);
    return out;
  }

  // ---- plain batched forwards (imagination / evaluation) ----

  Mat recurrent(const Mat& h, const Mat& e) const { return gru.apply(h, e); }
  Mat prior_logits(const Mat& h) const { return prior.apply(h); }
  Mat posterior_logits(const Mat& h, const Mat& obs) const {
    Mat in(h.rows(), h.cols() + obs.cols());
    in << h, obs;
    return repr.apply(in);
  }
  HeadsBatch decode_heads(const Mat& h, const Mat& z) const {
    Mat in(h.rows(), h.cols() + z.cols());
    in << h, z;
    HeadsBatch out;
    out.obs_mean = obs_head.apply(in);
    out.reward = reward_head.apply(in);
    Mat dl = discount_head.apply(in);
    out.discount_p = (1.0 / (1.0 + (-dl.array()).exp())).matrix();
    Mat ml = mask_head.apply(in);
    out.mask_p = (1.0 / (1.0 + (-ml.array()).exp())).matrix();
    out.aprev_logits = aprev_head.apply(in);
    return out;
  }

  // ---- per-agent execution rows ----

  Vec recurrent_row(const Vec& h, const RowVec& e) const {
    Mat out = gru.apply(h.transpose(), Mat(e));
    return out.row(0).transpose();
  }
  RowVec posterior_logits_row(const Vec& h, const RowVec& obs) const {
    RowVec in(h.size() + obs.size());
    in << h.transpose(), obs;
    return repr.apply(Mat(in)).row(0);
  }
  RowVec prior_logits_row(const Vec& h) const { return prior.apply(Mat(h.transpose())).row(0); }
  HeadOutRow decode_heads_row(const Vec& h, const RowVec& zflat) const {
    Mat hb = Mat(h.transpose());
    Mat zb = Mat(zflat);
    HeadsBatch batch = decode_heads(hb, zb);
    HeadOutRow out;
    out.obs_mean = batch.obs_mean.row(0);
    out.reward = batch.reward(0);
    out.discount_p = batch.discount_p(0);
    out.mask_p = batch.mask_p.row(0);
    out.aprev_logits = batch.aprev_logits.row(0);
    return out;
  }

  // ---- training ----

  // Builds the full sequence loss graph. Returns the differentiable
  // objective (which includes the mask-head term); `out` receives the
  // reported per-agent-per-step means including Gaussian constants.
  ad::Var loss_graph(nn::Binder& bind, const EpisodeBatch& batch, bool train_mode,
                     RngStream* dropout_rng, RngStream& sample_rng, LossBreakdown* out = nullptr,
                     UnrollTrace* trace = nullptr, bool with_losses = true) {
    if (batch.L < 2) throw InvalidInputError("world model loss needs sequences of length >= 2");
    require(batch.obs_dim == spec.obs_dim && batch.num_actions == spec.num_actions,
            "loss_graph: batch shape mismatch");
    ad::Tape& t = bind.tape();
    const Eigen::Index rows = batch.rows();
    const int n = batch.n;
    const int C = spec.classes;
    const Real ln2pi = std::log(2.0 * M_PI);

    ad::Var h = t.constant(Mat::Zero(rows, spec.hidden));
    ad::Var z_comm = t.constant(Mat::Zero(rows, spec.latent_dim()));
    Mat a_comm = Mat::Zero(rows, spec.num_actions);
    for (Eigen::Index r = 0; r < rows; ++r)
      if (batch.prev_action_start[r] >= 0) a_comm(r, batch.prev_action_start[r]) = 1.0;

    ad::Var obs_acc = t.constant(Mat::Zero(1, 1));
    ad::Var reward_acc = obs_acc, discount_acc = obs_acc, kl_acc = obs_acc, info_acc = obs_acc,
            mask_acc = obs_acc;
    Real obs_const = 0, reward_const = 0;

    for (int step = 0; step < batch.L; ++step) {
      const Vec& alive = batch.alive[step];
      std::vector<BoolMat> masks(batch.B);
      for (int b = 0; b < batch.B; ++b) {
        std::vector<bool> alive_b(n);
        for (int i = 0; i < n; ++i) alive_b[i] = alive(static_cast<Eigen::Index>(b) * n + i) != 0.0;
        masks[b] = build_locality_mask(batch.neighbors[step][b], alive_b, spec.mask_dead_agents);
      }

      ad::Var e = comm.forward(bind, z_comm, a_comm, masks, n, train_mode, dropout_rng);
      h = gru.apply(bind, h, e);

      ad::Var prior_lg = prior.apply(bind, h);
      ad::Var obs_in = t.constant(batch.obs[step]);
      ad::Var post_lg = repr.apply(bind, ad::concat_cols({h, obs_in}));
      // With the toggle on, absorbing entries (no real observation) take
      // the prior instead of a zero-pseudo-obs posterior.
      ad::Var post_used = spec.absorbing_posterior_from_prior
                              ? ad::blend_rows(post_lg, prior_lg, batch.present[step])
                              : post_lg;

      ad::Var probs = latent_probs(post_used, C);
      Mat onehot = sample_onehot_rows(probs.val(), C, sample_rng);
      ad::Var z = straight_through(probs, onehot);
      if (trace && trace->enabled) {
        trace->h.push_back(h.val());
        trace->z_flat.push_back(onehot);
      }

      if (!with_losses) {
        z_comm = ad::blend_rows(z, z_comm, alive);
        for (Eigen::Index r = 0; r < rows; ++r)
          if (alive(r) != 0.0) {
            a_comm.row(r).setZero();
            a_comm(r, batch.action[step][r]) = 1.0;
          }
        continue;
      }

      ad::Var kl_row = spec.use_kl_balancing
                           ? kl_balanced(post_used, prior_lg, C, spec.kl_cross, spec.kl_ent)
                           : kl_groups(post_used, prior_lg, C);
      kl_acc = ad::add(kl_acc, ad::sum_all(kl_row));

      const Vec& present = batch.present[step];
      ad::Var hz = ad::concat_cols({h, z});

      // Observation: Gaussian NLL on real observations only (none at
      // absorbing steps).
      ad::Var obs_err = ad::sub(obs_head.apply(bind, hz), obs_in);
      ad::Var obs_row = ad::scale(ad::row_sum(ad::square_(obs_err)), 0.5);
      obs_acc = ad::add(obs_acc, ad::sum_all(ad::cmul_const(obs_row, present)));
      obs_const += 0.5 * spec.obs_dim * ln2pi * present.sum();

      // Reward: Gaussian NLL on the transition reward that produced this
      // state; absorbing steps target exactly 0.
      Vec reward_target(rows);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Real incoming = step == 0 ? batch.prev_reward_start(r) : batch.reward[step - 1](r);
        reward_target(r) = present(r) != 0.0 ? incoming : 0.0;
      }
      ad::Var r_err = ad::sub(reward_head.apply(bind, hz), t.constant(Mat(reward_target)));
      reward_acc = ad::add(reward_acc, ad::scale(ad::sum_all(ad::square_(r_err)), 0.5));
      reward_const += 0.5 * ln2pi * static_cast<Real>(rows);

      // Discount: Bernoulli with soft target gamma*alive.
      ad::Var d_logit = discount_head.apply(bind, hz);
      ad::Var d_bce =
          ad::sub(ad::softplus_(d_logit), ad::cmul_const(d_logit, batch.discount[step]));
      discount_acc = ad::add(discount_acc, ad::sum_all(d_bce));

      // Action availability: per-action Bernoulli, alive steps only.
      ad::Var m_logit = mask_head.apply(bind, hz);
      ad::Var m_bce = ad::sub(ad::softplus_(m_logit), ad::cmul_const(m_logit, batch.action_mask[step]));
      mask_acc = ad::add(mask_acc, ad::sum_all(ad::cmul_const(ad::row_sum(m_bce), alive)));

      // Previous-action classifier (mutual-information bound).
      if (spec.use_info_loss) {
        std::vector<int> target(rows, 0);
        Vec w = Vec::Zero(rows);
        for (Eigen::Index r = 0; r < rows; ++r) {
          const int a_prev = step == 0 ? batch.prev_action_start[r] : batch.action[step - 1][r];
          if (a_prev >= 0 && present(r) != 0.0) {
            target[r] = a_prev;
            w(r) = 1.0;
          }
        }
        ad::Var lsm = ad::group_log_softmax(aprev_head.apply(bind, hz), spec.num_actions);
        ad::Var picked = ad::select_cols(lsm, target);
        info_acc = ad::add(info_acc, ad::neg(ad::sum_all(ad::cmul_const(picked, w))));
      }

      // Next step's broadcast view: live agents update, dead stay frozen.
      z_comm = ad::blend_rows(z, z_comm, alive);
      for (Eigen::Index r = 0; r < rows; ++r)
        if (alive(r) != 0.0) {
          a_comm.row(r).setZero();
          a_comm(r, batch.action[step][r]) = 1.0;
        }
    }

    const Real norm = 1.0 / (static_cast<Real>(rows) * batch.L);
    ad::Var objective = ad::scale(
        ad::add(ad::add(ad::add(obs_acc, reward_acc), ad::add(discount_acc, kl_acc)),
                ad::add(ad::scale(info_acc, spec.info_weight), mask_acc)),
        norm);

    if (out) {
      out->obs_nll = (obs_acc.val()(0, 0) + obs_const) * norm;
      out->reward_nll = (reward_acc.val()(0, 0) + reward_const) * norm;
      out->discount_nll = discount_acc.val()(0, 0) * norm;
      out->kl = kl_acc.val()(0, 0) * norm;
      out->info = info_acc.val()(0, 0) * spec.info_weight * norm;
      out->mask_nll = mask_acc.val()(0, 0) * norm;
      out->total = out->obs_nll + out->reward_nll + out->discount_nll + out->kl + out->info;
    }
    return objective;
  }

  // One optimizer step over a sampled batch.
  LossBreakdown train_batch(const EpisodeBatch& batch, nn::Adam& opt, RngStream& sample_rng,
                            RngStream& dropout_rng) {
    ad::Tape tape;
    nn::Binder bind(tape);
    LossBreakdown breakdown;
    ad::Var objective = loss_graph(bind, batch, true, &dropout_rng, sample_rng, &breakdown);
    opt.zero_grad();
    tape.backward(objective);
    bind.collect_grads();
    breakdown.grad_norm = opt.grad_norm();
    opt.step();
    return breakdown;
  }

  // Posterior inference over a gathered batch without losses; returns the
  // trace of (h, z) values. Used for dream start states.
  UnrollTrace posterior_rollout(const EpisodeBatch& batch, RngStream& sample_rng) {
    ad::Tape tape;
    nn::Binder bind(tape);
    UnrollTrace trace;
    trace.enabled = true;
    loss_graph(bind, batch, false, nullptr, sample_rng, nullptr, &trace, /*with_losses=*/false);
    return trace;
  }
};

}  // namespace mamba

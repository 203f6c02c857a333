// policy.hpp - PPO actor with masked actions, attention critic, value targets
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mamba/autodiff.hpp"
#include "mamba/comm.hpp"
#include "mamba/config.hpp"
#include "mamba/nn.hpp"

namespace mamba {

constexpr Real kMaskPenalty = -1e9;  // additive logit for unavailable actions

struct PolicyOutput {
  RowVec logits;  // masked
  int action = 0;
  Real log_prob = 0;
  Real entropy = 0;
};

struct PolicySpec {
  int latent_dim = 0;  // K*C
  int hidden = 0;      // D
  int num_actions = 0;
  int mlp_hidden = 64;
  bool critic_uses_h = false;
  int critic_layers = 1;
  int critic_dim = 64;
  bool positional_encoding = true;

  static PolicySpec from_config(const Config& cfg, int latent_dim, int num_actions) {
    PolicySpec s;
    s.latent_dim = latent_dim;
    s.hidden = cfg.hidden_size;
    s.num_actions = num_actions;
    s.mlp_hidden = cfg.hidden_size;
    s.critic_uses_h = cfg.critic_uses_h;
    s.critic_layers = cfg.critic_attention_layers;
    s.critic_dim = cfg.resolved_comm_dim();
    s.positional_encoding = cfg.use_positional_encoding;
    return s;
  }
};

// Masked categorical helpers. Unavailable actions get a -1e9 logit, which
// underflows to an exact zero probability after the softmax.
inline Mat masked_logits(const Mat& logits, const Mat& mask01) {
  require(logits.rows() == mask01.rows() && logits.cols() == mask01.cols(),
          "masked_logits: shape mismatch");
  return logits + ((1.0 - mask01.array()) * kMaskPenalty).matrix();
}

inline RowVec row_softmax(const RowVec& logits) {
  const Real mx = logits.maxCoeff();
  RowVec e = (logits.array() - mx).exp();
  return e / e.sum();
}

// lambda returns: V_t = r_t + d_t * ((1 - lambda) * v_{t+1} + lambda * V_{t+1}),
// bootstrapped with V_T = v_T. rewards/discounts have length T, values T+1.
inline Vec lambda_returns(const Vec& rewards, const Vec& values, const Vec& discounts, Real lambda) {
  const Eigen::Index T = rewards.size();
  if (values.size() != T + 1 || discounts.size() != T)
    throw InvalidInputError("lambda_returns: length mismatch");
  Vec out(T);
  Real next = values(T);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    out(t) = rewards(t) + discounts(t) * ((1.0 - lambda) * values(t + 1) + lambda * next);
    next = out(t);
  }
  return out;
}

// Generalized advantage estimation with the discount folded into d_t.
inline Vec gae(const Vec& rewards, const Vec& values, const Vec& discounts, Real lambda) {
  const Eigen::Index T = rewards.size();
  if (values.size() != T + 1 || discounts.size() != T)
    throw InvalidInputError("gae: length mismatch");
  Vec out(T);
  Real acc = 0;
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const Real delta = rewards(t) + discounts(t) * values(t + 1) - values(t);
    acc = delta + lambda * discounts(t) * acc;
    out(t) = acc;
  }
  return out;
}

struct ActSample {
  std::vector<int> action;
  Vec log_prob;
  Vec entropy;
};

struct PpoMetrics {
  Real policy_loss = 0;
  Real value_loss = 0;
  Real entropy = 0;
  Real mean_ratio = 0;
  Real clip_fraction = 0;
  Real entropy_coef = 0;
  int minibatch_steps = 0;
};

// Flattened actor transitions plus block-structured critic states.
struct PolicyBatch {
  // actor side (one row per live transition)
  Mat z, h;
  std::vector<int> action;
  Vec logp_old;
  Vec advantage;
  Mat mask01;
  // critic side (rows grouped in blocks of n agents)
  Mat critic_z, critic_h;
  Vec critic_target;
  Vec critic_weight;
  int n = 0;
};

class Policy {
 public:
  PolicySpec spec;
  nn::Mlp actor;  // (z, h) -> action logits, parameters shared across agents
  nn::Linear critic_embed;
  std::vector<CommLayer> critic_layers;
  nn::Mlp critic_head;

  void init(const PolicySpec& s, RngStream& rng) {
    spec = s;
    actor.init("actor", spec.latent_dim + spec.hidden, {spec.mlp_hidden}, spec.num_actions, rng);
    const int cin = spec.latent_dim + (spec.critic_uses_h ? spec.hidden : 0);
    critic_embed.init("critic.embed", cin, spec.critic_dim, rng);
    critic_layers.resize(spec.critic_layers);
    for (int l = 0; l < spec.critic_layers; ++l)
      critic_layers[l].init("critic.layer" + std::to_string(l), spec.critic_dim, rng);
    critic_head.init("critic.head", spec.critic_dim, {spec.mlp_hidden}, 1, rng);
  }

  std::vector<nn::Param*> actor_params() {
    std::vector<nn::Param*> out;
    actor.params(out);
    return out;
  }
  std::vector<nn::Param*> critic_params() {
    std::vector<nn::Param*> out;
    critic_embed.params(out);
    for (auto& l : critic_layers) l.params(out);
    critic_head.params(out);
    return out;
  }

  // ---- acting ----

  Mat actor_logits(const Mat& z, const Mat& h) const {
    Mat in(z.rows(), z.cols() + h.cols());
    in << z, h;
    return actor.apply(in);
  }

  PolicyOutput act_row(const RowVec& zflat, const Vec& h, const RowVec& mask01, RngStream& rng) const {
    if (mask01.maxCoeff() == 0.0)
      throw InvalidInputError("environment contract: no available action in mask");
    Mat logits = actor_logits(Mat(zflat), Mat(h.transpose()));
    PolicyOutput out;
    out.logits = masked_logits(logits, Mat(mask01)).row(0);
    RowVec p = row_softmax(out.logits);
    out.action = rng.categorical(p.data(), static_cast<int>(p.size()));
    out.log_prob = std::log(p(out.action));
    out.entropy = entropy_of(p);
    return out;
  }

  PolicyOutput greedy_row(const RowVec& zflat, const Vec& h, const RowVec& mask01) const {
    if (mask01.maxCoeff() == 0.0)
      throw InvalidInputError("environment contract: no available action in mask");
    Mat logits = actor_logits(Mat(zflat), Mat(h.transpose()));
    PolicyOutput out;
    out.logits = masked_logits(logits, Mat(mask01)).row(0);
    Eigen::Index best;
    out.logits.maxCoeff(&best);
    out.action = static_cast<int>(best);
    RowVec p = row_softmax(out.logits);
    out.log_prob = std::log(p(out.action));
    out.entropy = entropy_of(p);
    return out;
  }

  ActSample act_rows(const Mat& z, const Mat& h, const Mat& mask01, RngStream& rng) const {
    Mat ml = masked_logits(actor_logits(z, h), mask01);
    ActSample out;
    out.action.resize(ml.rows());
    out.log_prob.resize(ml.rows());
    out.entropy.resize(ml.rows());
    for (Eigen::Index r = 0; r < ml.rows(); ++r) {
      RowVec p = row_softmax(RowVec(ml.row(r)));
      out.action[r] = rng.categorical(p.data(), static_cast<int>(p.size()));
      out.log_prob(r) = std::log(p(out.action[r]));
      out.entropy(r) = entropy_of(p);
    }
    return out;
  }

  // ---- critic ----

  // Values for rows grouped in blocks of n agents; attention over each block.
  Vec critic_values(const Mat& z, const Mat& h, int n) const {
    ad::Tape tape;
    nn::Binder bind(tape);
    auto& self = const_cast<Policy&>(*this);
    ad::Var v = self.critic_graph(bind, tape.constant(critic_input(z, h)), n);
    return v.val().col(0);
  }

  Mat critic_input(const Mat& z, const Mat& h) const {
    if (!spec.critic_uses_h) return z;
    Mat in(z.rows(), z.cols() + h.cols());
    in << z, h;
    return in;
  }

  ad::Var critic_graph(nn::Binder& bind, ad::Var input, int n) {
    ad::Tape& t = bind.tape();
    ad::Var x = critic_embed.apply(bind, input);
    if (spec.positional_encoding) {
      const Eigen::Index blocks = input.rows() / n;
      Mat pe = positional_encoding(n, spec.critic_dim);
      Mat pe_full(input.rows(), spec.critic_dim);
      for (Eigen::Index b = 0; b < blocks; ++b) pe_full.middleRows(b * n, n) = pe;
      x = ad::add_const(x, pe_full);
    }
    std::vector<BoolMat> masks{full_mask(n)};
    for (auto& layer : critic_layers) {
      ad::Var q = layer.wq.apply(bind, x);
      ad::Var k = layer.wk.apply(bind, x);
      ad::Var v = layer.wv.apply(bind, x);
      ad::Var attn = layer.wo.apply(bind, ad::block_attention(q, k, v, masks, n));
      x = layer.ln1.apply(bind, ad::add(x, attn));
      ad::Var ff = layer.ff2.apply(bind, ad::relu_(layer.ff1.apply(bind, x)));
      x = layer.ln2.apply(bind, ad::add(x, ff));
    }
    (void)t;
    return critic_head.apply(bind, x);
  }

  // ---- PPO ----

  // Clipped-surrogate update over `epochs` passes of `minibatch`-sized
  // chunks. Advantages must already be normalized. The entropy coefficient
  // decays by `anneal` after every minibatch step and is passed back out.
  PpoMetrics ppo_update(const PolicyBatch& batch, nn::Adam& actor_opt, nn::Adam& critic_opt,
                        Real clip_eps, Real& entropy_coef, Real anneal, int epochs, int minibatch,
                        RngStream& shuffle_rng) {
    const Eigen::Index N = batch.z.rows();
    if (N == 0) throw InvalidInputError("ppo_update: empty rollout set");
    require(batch.critic_z.rows() % std::max(1, batch.n) == 0, "ppo_update: critic rows misaligned");

    PpoMetrics metrics;
    Real loss_acc = 0, vloss_acc = 0, ent_acc = 0, ratio_acc = 0, clip_acc = 0;
    long loss_count = 0, vloss_count = 0;

    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    const Eigen::Index critic_blocks = batch.n > 0 ? batch.critic_z.rows() / batch.n : 0;
    std::vector<int> critic_order(critic_blocks);
    std::iota(critic_order.begin(), critic_order.end(), 0);
    const int critic_mb_blocks =
        std::max<int>(1, batch.n > 0 ? minibatch / batch.n : 1);

    for (int epoch = 0; epoch < epochs; ++epoch) {
      shuffle(order, shuffle_rng);
      for (Eigen::Index start = 0; start < N; start += minibatch) {
        const Eigen::Index count = std::min<Eigen::Index>(minibatch, N - start);
        Mat z(count, batch.z.cols()), h(count, batch.h.cols()), mask(count, batch.mask01.cols());
        std::vector<int> action(count);
        Vec logp_old(count), adv(count);
        for (Eigen::Index i = 0; i < count; ++i) {
          const int src = order[start + i];
          z.row(i) = batch.z.row(src);
          h.row(i) = batch.h.row(src);
          mask.row(i) = batch.mask01.row(src);
          action[i] = batch.action[src];
          logp_old(i) = batch.logp_old(src);
          adv(i) = batch.advantage(src);
        }

        ad::Tape tape;
        nn::Binder bind(tape);
        ad::Var logits = actor.apply(bind, tape.constant(critic_cat(z, h)));
        ad::Var ml = ad::add_const(logits, Mat(((1.0 - mask.array()) * kMaskPenalty).matrix()));
        ad::Var logp_all = ad::group_log_softmax(ml, spec.num_actions);
        ad::Var logp = ad::select_cols(logp_all, action);
        ad::Var ratio = ad::exp_(ad::add_const(logp, Mat(-logp_old)));
        ad::Var surr1 = ad::cmul_const(ratio, Mat(adv));
        ad::Var surr2 = ad::cmul_const(ad::clamp_(ratio, 1.0 - clip_eps, 1.0 + clip_eps), Mat(adv));
        ad::Var policy_obj = ad::neg(ad::mean_all(ad::min_(surr1, surr2)));

        ad::Var probs = ad::group_softmax(ml, spec.num_actions);
        ad::Var plogp = ad::cmul(probs, logp_all);
        ad::Var ent = ad::neg(ad::row_sum(plogp));
        ad::Var loss = ad::sub(policy_obj, ad::scale(ad::mean_all(ent), entropy_coef));

        actor_opt.zero_grad();
        tape.backward(loss);
        bind.collect_grads();
        actor_opt.step();

        loss_acc += policy_obj.val()(0, 0);
        ent_acc += ent.val().mean();
        ratio_acc += ratio.val().mean();
        clip_acc += (ratio.val().array() < 1.0 - clip_eps || ratio.val().array() > 1.0 + clip_eps)
                        .cast<Real>()
                        .mean();
        ++loss_count;
        entropy_coef *= anneal;
        ++metrics.minibatch_steps;
      }

      // Critic pass: squared error to the lambda targets on block minibatches.
      if (critic_blocks > 0) {
        shuffle(critic_order, shuffle_rng);
        for (Eigen::Index start = 0; start < critic_blocks; start += critic_mb_blocks) {
          const Eigen::Index count = std::min<Eigen::Index>(critic_mb_blocks, critic_blocks - start);
          const Eigen::Index rows = count * batch.n;
          Mat cz(rows, batch.critic_z.cols());
          Mat ch(rows, batch.critic_h.cols());
          Vec target(rows), weight(rows);
          for (Eigen::Index b = 0; b < count; ++b) {
            const Eigen::Index src = static_cast<Eigen::Index>(critic_order[start + b]) * batch.n;
            cz.middleRows(b * batch.n, batch.n) = batch.critic_z.middleRows(src, batch.n);
            ch.middleRows(b * batch.n, batch.n) = batch.critic_h.middleRows(src, batch.n);
            target.segment(b * batch.n, batch.n) = batch.critic_target.segment(src, batch.n);
            weight.segment(b * batch.n, batch.n) = batch.critic_weight.segment(src, batch.n);
          }
          ad::Tape tape;
          nn::Binder bind(tape);
          ad::Var values = critic_graph(bind, tape.constant(critic_input(cz, ch)), batch.n);
          ad::Var err = ad::sub(values, tape.constant(Mat(target)));
          ad::Var weighted = ad::cmul_const(ad::square_(err), Mat(weight));
          const Real wsum = std::max<Real>(1.0, weight.sum());
          ad::Var vloss = ad::scale(ad::sum_all(weighted), 0.5 / wsum);
          critic_opt.zero_grad();
          tape.backward(vloss);
          bind.collect_grads();
          critic_opt.step();
          vloss_acc += vloss.val()(0, 0);
          ++vloss_count;
        }
      }
    }

    metrics.policy_loss = loss_acc / std::max<long>(1, loss_count);
    metrics.value_loss = vloss_acc / std::max<long>(1, vloss_count);
    metrics.entropy = ent_acc / std::max<long>(1, loss_count);
    metrics.mean_ratio = ratio_acc / std::max<long>(1, loss_count);
    metrics.clip_fraction = clip_acc / std::max<long>(1, loss_count);
    metrics.entropy_coef = entropy_coef;
    return metrics;
  }

  static Real entropy_of(const RowVec& p) {
    Real h = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
      if (p(i) > 0) h -= p(i) * std::log(p(i));
    return h;
  }

 private:
  static Mat critic_cat(const Mat& z, const Mat& h) {
    Mat in(z.rows(), z.cols() + h.cols());
    in << z, h;
    return in;
  }
  static void shuffle(std::vector<int>& v, RngStream& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  }
};

}  // namespace mamba

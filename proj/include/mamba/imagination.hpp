// imagination.hpp - latent rollouts for policy learning
//
// Dreams never touch observations: transitions come from the prior head,
// actions from the current policy under predicted availability masks,
// rewards/discounts from the decoder heads. Agents whose predicted
// discount falls below the termination threshold are frozen for the rest
// of the rollout and excluded from the policy loss.
#pragma once

#include <sstream>
#include <vector>

#include "mamba/buffer.hpp"
#include "mamba/policy.hpp"
#include "mamba/world_model.hpp"

namespace mamba {

// Row-wise select: live rows from the first argument, frozen rows otherwise.
inline Mat blend_live(const Mat& live_rows, const Mat& frozen_rows, const std::vector<char>& live) {
  Mat out = frozen_rows;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    if (live[r]) out.row(r) = live_rows.row(r);
  return out;
}

struct DreamStart {
  int R = 0, n = 0;
  Mat h;                        // [R*n x D]
  Mat z;                        // [R*n x K*C] acting latents
  Mat frozen_z;                 // comm view rows (equals z for live agents)
  std::vector<int> frozen_action;  // last action per row, -1 bootstrap
  std::vector<char> live;          // acting at start
  std::vector<BoolMat> comm_masks; // one per rollout, frozen through the dream
};

struct ImaginedTrajectory {
  int R = 0, n = 0, H = 0;
  std::vector<Mat> z, h;                 // states at action time
  std::vector<Mat> critic_z;             // frozen-aware latent rows per step
  std::vector<std::vector<int>> action;  // -1 for non-acting rows
  std::vector<Vec> logp;
  std::vector<Mat> mask01;               // thresholded masks used for acting
  std::vector<Mat> mask_prob;            // raw head probabilities
  std::vector<Vec> reward;               // predicted transition reward into t+1
  std::vector<Vec> discount;             // predicted continuation probability at t+1
  std::vector<Vec> live;                 // 1.0 if the row acts at t
  Mat h_final, critic_z_final;
  std::vector<BoolMat> comm_masks;
};

// Uniform over (episode, position) pairs that still have at least one
// acting agent. Posterior inference runs over a window ending at the
// position (window length = the training sequence length, so start states
// match the state distribution the model is trained under).
inline DreamStart select_start_states(const ReplayBuffer& buffer, WorldModel& model, int count,
                                      int window, RngStream& pick_rng, RngStream& sample_rng) {
  if (buffer.num_episodes() == 0) throw NotReadyError("select_start_states: buffer is empty");
  require(count >= 1, "select_start_states: count must be positive");

  // Valid positions: prefix of each episode where some agent is alive.
  std::vector<std::int64_t> cumulative;
  std::int64_t total = 0;
  for (std::size_t e = 0; e < buffer.num_episodes(); ++e) {
    const Episode& ep = buffer.episode(e);
    int valid = 0;
    for (const EpisodeStep& s : ep.steps) {
      bool any = false;
      for (bool a : s.alive) any = any || a;
      if (!any) break;
      ++valid;
    }
    total += valid;
    cumulative.push_back(total);
  }
  if (total == 0) throw NotReadyError("select_start_states: no live positions");

  std::vector<std::pair<int, int>> picks(count);
  std::vector<int> offsets(count), snapshots(count);
  int max_len = 2;
  for (int i = 0; i < count; ++i) {
    const std::int64_t flat = static_cast<std::int64_t>(pick_rng.below(total));
    int e = 0;
    while (cumulative[e] <= flat) ++e;
    const int pos = static_cast<int>(flat - (e == 0 ? 0 : cumulative[e - 1]));
    const int start = std::max(0, pos - (window - 1));
    picks[i] = {e, start};
    offsets[i] = start;
    snapshots[i] = pos - start;
    max_len = std::max(max_len, snapshots[i] + 1);
  }

  EpisodeBatch batch = buffer.gather(picks, max_len);
  UnrollTrace trace = model.posterior_rollout(batch, sample_rng);

  DreamStart out;
  out.R = count;
  out.n = batch.n;
  const Eigen::Index rows = batch.rows();
  out.h.resize(rows, model.spec.hidden);
  out.z.resize(rows, model.spec.latent_dim());
  out.frozen_z = Mat::Zero(rows, model.spec.latent_dim());
  out.frozen_action.assign(rows, -1);
  out.live.assign(rows, 0);
  for (int b = 0; b < count; ++b) {
    const int at = snapshots[b];
    out.comm_masks.push_back(batch.neighbors[at][b]);
    for (int i = 0; i < batch.n; ++i) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * batch.n + i;
      out.h.row(r) = trace.h[at].row(r);
      out.z.row(r) = trace.z_flat[at].row(r);
      out.live[r] = batch.alive[at](r) != 0.0 ? 1 : 0;
      // Frozen comm view: latent and action at the last acting step.
      int last = -1;
      for (int s = at; s >= 0; --s)
        if (batch.alive[s](r) != 0.0) {
          last = s;
          break;
        }
      if (last >= 0) {
        out.frozen_z.row(r) = trace.z_flat[last].row(r);
        out.frozen_action[r] = batch.action[last][r];
      } else if (batch.prev_action_start[r] >= 0) {
        out.frozen_action[r] = batch.prev_action_start[r];
      }
    }
  }
  return out;
}

// Roll the model forward H steps from the start states under the current
// policy.
inline ImaginedTrajectory dream(WorldModel& model, const Policy& policy, const DreamStart& start,
                                int H, Real termination_threshold, Real mask_threshold,
                                RngStream& rng, bool mask_dead_agents) {
  if (H < 1) throw ConfigError("dream: horizon must be >= 1");
  const Eigen::Index rows = start.h.rows();
  const int n = start.n;
  const int A = model.spec.num_actions;

  ImaginedTrajectory traj;
  traj.R = start.R;
  traj.n = n;
  traj.H = H;
  traj.comm_masks = start.comm_masks;

  Mat h = start.h;
  Mat z_act = start.z;         // latent the policy acts from
  Mat comm_z = start.frozen_z; // broadcast view (frozen for dead rows)
  std::vector<int> comm_a = start.frozen_action;
  std::vector<char> live = start.live;
  for (Eigen::Index r = 0; r < rows; ++r)
    if (live[r]) comm_z.row(r) = z_act.row(r);

  for (int t = 0; t < H; ++t) {
    // Predicted availability at the acting state.
    HeadsBatch heads_now = model.decode_heads(h, blend_live(z_act, comm_z, live));
    Mat m01(rows, A);
    for (Eigen::Index r = 0; r < rows; ++r) {
      bool any = false;
      for (int a = 0; a < A; ++a) {
        m01(r, a) = heads_now.mask_p(r, a) >= mask_threshold ? 1.0 : 0.0;
        any = any || m01(r, a) != 0.0;
      }
      if (!any) m01.row(r).setOnes();  // degenerate-model guard
    }

    ActSample acts = policy.act_rows(blend_live(z_act, comm_z, live), h, m01, rng);

    traj.z.push_back(blend_live(z_act, comm_z, live));
    traj.h.push_back(h);
    traj.critic_z.push_back(blend_live(z_act, comm_z, live));
    traj.mask01.push_back(m01);
    traj.mask_prob.push_back(heads_now.mask_p);
    std::vector<int> taken(rows, -1);
    Vec logp = Vec::Zero(rows);
    Vec live_v = Vec::Zero(rows);
    for (Eigen::Index r = 0; r < rows; ++r)
      if (live[r]) {
        taken[r] = acts.action[r];
        logp(r) = acts.log_prob(r);
        live_v(r) = 1.0;
        comm_z.row(r) = z_act.row(r);
        comm_a[r] = taken[r];
      }
    traj.action.push_back(taken);
    traj.logp.push_back(logp);
    traj.live.push_back(live_v);

    // Transition: communication block on (z_t, a_t), recurrent update,
    // prior sample. Observations are never consumed.
    Mat a_onehot = Mat::Zero(rows, A);
    for (Eigen::Index r = 0; r < rows; ++r)
      if (comm_a[r] >= 0) a_onehot(r, comm_a[r]) = 1.0;
    std::vector<BoolMat> masks(start.R);
    for (int b = 0; b < start.R; ++b) {
      std::vector<bool> alive_b(n);
      for (int i = 0; i < n; ++i) alive_b[i] = live[static_cast<Eigen::Index>(b) * n + i] != 0;
      masks[b] = build_locality_mask(start.comm_masks[b], alive_b, mask_dead_agents);
    }
    ad::Tape tape;
    nn::Binder bind(tape);
    ad::Var e = model.comm.forward(bind, tape.constant(comm_z), a_onehot, masks, n, false, nullptr);
    h = model.recurrent(h, e.val());

    Mat prior_lg = model.prior_logits(h);
    Mat probs = latent_probs_rows(prior_lg, model.spec.classes);
    Mat z_next = sample_onehot_rows(probs, model.spec.classes, rng);

    HeadsBatch heads_next = model.decode_heads(h, z_next);
    traj.reward.push_back(heads_next.reward);
    traj.discount.push_back(heads_next.discount_p);

    for (Eigen::Index r = 0; r < rows; ++r)
      if (live[r]) {
        z_act.row(r) = z_next.row(r);
        if (heads_next.discount_p(r) < termination_threshold) live[r] = 0;
      }
  }

  traj.h_final = h;
  traj.critic_z_final = blend_live(z_act, comm_z, live);
  return traj;
}

// Assemble PPO inputs: lambda-return targets, GAE advantages (normalized
// over the live transitions), flattened actor rows, block critic rows.
inline PolicyBatch build_policy_batch(const ImaginedTrajectory& traj, const Policy& policy,
                                      Real gae_lambda) {
  const Eigen::Index rows = traj.h[0].rows();
  const int H = traj.H;

  // Critic values for every step plus the bootstrap state.
  std::vector<Vec> values(H + 1);
  for (int t = 0; t < H; ++t) values[t] = policy.critic_values(traj.critic_z[t], traj.h[t], traj.n);
  values[H] = policy.critic_values(traj.critic_z_final, traj.h_final, traj.n);

  Mat targets(rows, H), advantages(rows, H);
  for (Eigen::Index r = 0; r < rows; ++r) {
    Vec rew(H), disc(H), val(H + 1);
    for (int t = 0; t < H; ++t) {
      rew(t) = traj.reward[t](r);
      disc(t) = traj.discount[t](r);
      val(t) = values[t](r);
    }
    val(H) = values[H](r);
    targets.row(r) = lambda_returns(rew, val, disc, gae_lambda).transpose();
    advantages.row(r) = gae(rew, val, disc, gae_lambda).transpose();
  }

  // Normalize advantages over live transitions.
  Real mean = 0, count = 0;
  for (int t = 0; t < H; ++t)
    for (Eigen::Index r = 0; r < rows; ++r)
      if (traj.live[t](r) != 0.0) {
        mean += advantages(r, t);
        count += 1;
      }
  mean /= std::max<Real>(1.0, count);
  Real var = 0;
  for (int t = 0; t < H; ++t)
    for (Eigen::Index r = 0; r < rows; ++r)
      if (traj.live[t](r) != 0.0) var += (advantages(r, t) - mean) * (advantages(r, t) - mean);
  const Real stddev = std::sqrt(var / std::max<Real>(1.0, count)) + 1e-8;

  PolicyBatch batch;
  batch.n = traj.n;
  const Eigen::Index live_total = static_cast<Eigen::Index>(count);
  batch.z.resize(live_total, traj.z[0].cols());
  batch.h.resize(live_total, traj.h[0].cols());
  batch.mask01.resize(live_total, traj.mask01[0].cols());
  batch.action.resize(live_total);
  batch.logp_old.resize(live_total);
  batch.advantage.resize(live_total);
  Eigen::Index w = 0;
  for (int t = 0; t < H; ++t)
    for (Eigen::Index r = 0; r < rows; ++r)
      if (traj.live[t](r) != 0.0) {
        batch.z.row(w) = traj.z[t].row(r);
        batch.h.row(w) = traj.h[t].row(r);
        batch.mask01.row(w) = traj.mask01[t].row(r);
        batch.action[w] = traj.action[t][r];
        batch.logp_old(w) = traj.logp[t](r);
        batch.advantage(w) = (advantages(r, t) - mean) / stddev;
        ++w;
      }

  batch.critic_z.resize(rows * H, traj.critic_z[0].cols());
  batch.critic_h.resize(rows * H, traj.h[0].cols());
  batch.critic_target.resize(rows * H);
  batch.critic_weight.resize(rows * H);
  for (int t = 0; t < H; ++t) {
    batch.critic_z.middleRows(static_cast<Eigen::Index>(t) * rows, rows) = traj.critic_z[t];
    batch.critic_h.middleRows(static_cast<Eigen::Index>(t) * rows, rows) = traj.h[t];
    for (Eigen::Index r = 0; r < rows; ++r) {
      batch.critic_target(static_cast<Eigen::Index>(t) * rows + r) = targets(r, t);
      batch.critic_weight(static_cast<Eigen::Index>(t) * rows + r) = traj.live[t](r);
    }
  }
  return batch;
}

inline std::string describe_trajectory(const ImaginedTrajectory& traj, int rollout) {
  std::ostringstream out;
  out << "dream rollout " << rollout << " (H=" << traj.H << ", n=" << traj.n << ")\n";
  for (int t = 0; t < traj.H; ++t) {
    out << " t=" << t << ":";
    for (int i = 0; i < traj.n; ++i) {
      const Eigen::Index r = static_cast<Eigen::Index>(rollout) * traj.n + i;
      out << " agent" << i << "[";
      if (traj.live[t](r) != 0.0)
        out << "a=" << traj.action[t][r] << " logp=" << traj.logp[t](r);
      else
        out << "absorbed";
      out << " r_hat=" << traj.reward[t](r) << " d_hat=" << traj.discount[t](r) << "]";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace mamba

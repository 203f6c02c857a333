// buffer.hpp - episodic replay with joint per-step agent records
//
// Episodes store all n agents time-aligned so sampled sequences carry the
// cross-agent structure the communication block needs. Agents that die
// mid-episode continue as absorbing entries: zero observation, no action,
// reward 0, discount 0.
#pragma once

#include <cstdint>
#include <deque>
#include <istream>
#include <ostream>
#include <vector>

#include "mamba/common.hpp"
#include "mamba/rng.hpp"

namespace mamba {

struct EpisodeStep {
  Mat obs;                    // n x obs_dim, zero rows once absorbed
  std::vector<int> action;    // -1 for non-acting agents
  Vec reward;                 // immediate reward for action_t; 0 for non-acting agents
  Vec discount;               // gamma * alive_t
  Mat action_mask;            // n x A in {0,1}
  std::vector<bool> alive;    // acting at this step
  std::vector<bool> present;  // alive, or observing its terminal state this step
  BoolMat neighbors;          // n x n, diagonal true
};

struct Episode {
  int n = 0;
  int obs_dim = 0;
  int num_actions = 0;
  std::vector<EpisodeStep> steps;

  int length() const { return static_cast<int>(steps.size()); }
};

// One sampled training batch: B sequences of L steps, n agents each,
// stored step-major (each entry holds B*n rows, sequence-blocked).
struct EpisodeBatch {
  int B = 0, L = 0, n = 0, obs_dim = 0, num_actions = 0;
  std::vector<Mat> obs;                         // L x [B*n x obs_dim]
  std::vector<std::vector<int>> action;         // L x [B*n], -1 when absent
  std::vector<Vec> reward;                      // L x [B*n]
  std::vector<Vec> discount;                    // L x [B*n]
  std::vector<Mat> action_mask;                 // L x [B*n x A]
  std::vector<Vec> alive;                       // L x [B*n], 1.0 alive
  std::vector<Vec> present;                     // L x [B*n], 1.0 when obs is real
  std::vector<std::vector<BoolMat>> neighbors;  // L x B x [n x n]
  std::vector<int> prev_action_start;           // B*n, action at offset-1 (-1 none)
  Vec prev_reward_start;                        // B*n, reward at offset-1 (0 none)

  Eigen::Index rows() const { return static_cast<Eigen::Index>(B) * n; }
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::int64_t capacity_transitions) : capacity_(capacity_transitions) {}

  void add_episode(Episode ep) {
    validate(ep);
    stored_steps_ += ep.length();
    episodes_.push_back(std::move(ep));
    while (stored_steps_ > capacity_ && episodes_.size() > 1) {
      stored_steps_ -= episodes_.front().length();
      episodes_.pop_front();
    }
  }

  std::size_t num_episodes() const { return episodes_.size(); }
  std::int64_t stored_steps() const { return stored_steps_; }
  // Transition count across agents (steps x n).
  std::int64_t stored_transitions() const {
    std::int64_t total = 0;
    for (const Episode& e : episodes_) total += static_cast<std::int64_t>(e.length()) * e.n;
    return total;
  }
  const Episode& episode(std::size_t i) const { return episodes_[i]; }

  // Uniform over (episode, offset) with offset in [0, len-1]. Sequences
  // running past the episode end are padded with absorbing steps.
  EpisodeBatch sample_sequences(int count, int length, RngStream& rng) const {
    if (episodes_.empty()) throw NotReadyError("replay buffer is empty");
    require(count >= 1 && length >= 1, "sample_sequences: bad count/length");

    std::vector<std::pair<int, int>> picks(count);
    for (auto& [e, t] : picks) {
      e = static_cast<int>(rng.below(episodes_.size()));
      t = static_cast<int>(rng.below(episodes_[e].length()));
    }
    return gather(picks, length);
  }

  // Deterministic gather used by both sampling paths.
  EpisodeBatch gather(const std::vector<std::pair<int, int>>& picks, int length) const {
    if (episodes_.empty()) throw NotReadyError("replay buffer is empty");
    const Episode& first = episodes_.front();
    EpisodeBatch batch;
    batch.B = static_cast<int>(picks.size());
    batch.L = length;
    batch.n = first.n;
    batch.obs_dim = first.obs_dim;
    batch.num_actions = first.num_actions;
    const Eigen::Index rows = batch.rows();
    batch.prev_action_start.assign(rows, -1);
    batch.prev_reward_start = Vec::Zero(rows);
    for (int t = 0; t < length; ++t) {
      batch.obs.emplace_back(Mat::Zero(rows, batch.obs_dim));
      batch.action.emplace_back(rows, -1);
      batch.reward.emplace_back(Vec::Zero(rows));
      batch.discount.emplace_back(Vec::Zero(rows));
      batch.action_mask.emplace_back(Mat::Zero(rows, batch.num_actions));
      batch.alive.emplace_back(Vec::Zero(rows));
      batch.present.emplace_back(Vec::Zero(rows));
      batch.neighbors.emplace_back();
    }

    for (int b = 0; b < batch.B; ++b) {
      const auto [ei, offset] = picks[b];
      const Episode& ep = episodes_[ei];
      require(ep.n == batch.n && ep.obs_dim == batch.obs_dim && ep.num_actions == batch.num_actions,
              "gather: episodes disagree on shapes");
      require(offset >= 0 && offset < ep.length(), "gather: offset out of range");
      if (offset > 0) {
        const EpisodeStep& prev = ep.steps[offset - 1];
        for (int i = 0; i < batch.n; ++i) {
          batch.prev_action_start[b * batch.n + i] = prev.action[i];
          batch.prev_reward_start(b * batch.n + i) = prev.reward(i);
        }
      }
      for (int t = 0; t < length; ++t) {
        const int src = offset + t;
        if (src < ep.length()) {
          const EpisodeStep& s = ep.steps[src];
          for (int i = 0; i < batch.n; ++i) {
            const Eigen::Index r = static_cast<Eigen::Index>(b) * batch.n + i;
            batch.obs[t].row(r) = s.obs.row(i);
            batch.action[t][r] = s.action[i];
            batch.reward[t](r) = s.reward(i);
            batch.discount[t](r) = s.discount(i);
            batch.action_mask[t].row(r) = s.action_mask.row(i);
            batch.alive[t](r) = s.alive[i] ? 1.0 : 0.0;
            batch.present[t](r) = s.present[i] ? 1.0 : 0.0;
          }
          batch.neighbors[t].push_back(s.neighbors);
        } else {
          // absorbing padding: keep the final neighbor relation
          batch.neighbors[t].push_back(ep.steps.back().neighbors);
        }
      }
    }
    return batch;
  }

  // Versioned opaque dump for resuming runs.
  void dump(std::ostream& out) const {
    write_u64(out, 0x4d42554631ull);  // "MBUF1"
    write_u64(out, static_cast<std::uint64_t>(episodes_.size()));
    for (const Episode& ep : episodes_) {
      write_u64(out, static_cast<std::uint64_t>(ep.n));
      write_u64(out, static_cast<std::uint64_t>(ep.obs_dim));
      write_u64(out, static_cast<std::uint64_t>(ep.num_actions));
      write_u64(out, static_cast<std::uint64_t>(ep.steps.size()));
      for (const EpisodeStep& s : ep.steps) {
        write_mat(out, s.obs);
        for (int a : s.action) write_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(a)));
        write_mat(out, s.reward);
        write_mat(out, s.discount);
        write_mat(out, s.action_mask);
        for (bool b : s.alive) write_u64(out, b ? 1 : 0);
        for (bool b : s.present) write_u64(out, b ? 1 : 0);
        Mat nb(s.neighbors.rows(), s.neighbors.cols());
        for (Eigen::Index c = 0; c < nb.cols(); ++c)
          for (Eigen::Index r = 0; r < nb.rows(); ++r) nb(r, c) = s.neighbors(r, c) ? 1.0 : 0.0;
        write_mat(out, nb);
      }
    }
  }

  void restore(std::istream& in) {
    if (read_u64(in) != 0x4d42554631ull) throw InvalidInputError("buffer dump: bad magic");
    episodes_.clear();
    stored_steps_ = 0;
    const std::uint64_t count = read_u64(in);
    for (std::uint64_t e = 0; e < count; ++e) {
      Episode ep;
      ep.n = static_cast<int>(read_u64(in));
      ep.obs_dim = static_cast<int>(read_u64(in));
      ep.num_actions = static_cast<int>(read_u64(in));
      const std::uint64_t steps = read_u64(in);
      for (std::uint64_t t = 0; t < steps; ++t) {
        EpisodeStep s;
        s.obs = read_mat(in);
        s.action.resize(ep.n);
        for (int& a : s.action) a = static_cast<int>(static_cast<std::int64_t>(read_u64(in)));
        s.reward = read_mat(in);
        s.discount = read_mat(in);
        s.action_mask = read_mat(in);
        s.alive.resize(ep.n);
        for (int i = 0; i < ep.n; ++i) s.alive[i] = read_u64(in) == 1;
        s.present.resize(ep.n);
        for (int i = 0; i < ep.n; ++i) s.present[i] = read_u64(in) == 1;
        Mat nb = read_mat(in);
        s.neighbors.resize(nb.rows(), nb.cols());
        for (Eigen::Index c = 0; c < nb.cols(); ++c)
          for (Eigen::Index r = 0; r < nb.rows(); ++r) s.neighbors(r, c) = nb(r, c) != 0.0;
        ep.steps.push_back(std::move(s));
      }
      add_episode(std::move(ep));
    }
  }

 private:
  static void validate(const Episode& ep) {
    require(ep.n >= 1 && ep.obs_dim >= 1 && ep.num_actions >= 1, "episode: bad shape");
    require(!ep.steps.empty(), "episode: no steps");
    for (const EpisodeStep& s : ep.steps) {
      require(s.obs.rows() == ep.n && s.obs.cols() == ep.obs_dim, "episode: obs shape mismatch");
      require(static_cast<int>(s.action.size()) == ep.n, "episode: action length mismatch");
      require(s.reward.size() == ep.n && s.discount.size() == ep.n, "episode: reward/discount mismatch");
      require(s.action_mask.rows() == ep.n && s.action_mask.cols() == ep.num_actions,
              "episode: mask shape mismatch");
      require(static_cast<int>(s.alive.size()) == ep.n, "episode: alive length mismatch");
      require(static_cast<int>(s.present.size()) == ep.n, "episode: present length mismatch");
      require(s.neighbors.rows() == ep.n && s.neighbors.cols() == ep.n, "episode: neighbor shape");
      for (int i = 0; i < ep.n; ++i) {
        if (s.alive[i]) require(s.present[i], "episode: alive agent must be present");
        if (!s.alive[i]) {
          require(s.reward(i) == 0.0, "episode: dead agent with nonzero reward");
          require(s.discount(i) == 0.0, "episode: dead agent with nonzero discount");
          require(s.action[i] == -1, "episode: dead agent with an action");
        } else {
          require(s.action[i] >= 0 && s.action[i] < ep.num_actions, "episode: action out of range");
          require(s.action_mask(i, s.action[i]) != 0.0, "episode: chosen action is masked out");
        }
      }
    }
  }

  static void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
  }
  static std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw InvalidInputError("buffer dump: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  static void write_mat(std::ostream& out, const Mat& m) {
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), sizeof(Real) * m.size());
  }
  static Mat read_mat(std::istream& in) {
    const auto rows = static_cast<Eigen::Index>(read_u64(in));
    const auto cols = static_cast<Eigen::Index>(read_u64(in));
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), sizeof(Real) * m.size());
    if (!in) throw InvalidInputError("buffer dump: truncated matrix");
    return m;
  }

  std::int64_t capacity_;
  std::int64_t stored_steps_ = 0;
  std::deque<Episode> episodes_;
};

}  // namespace mamba

// minirail.hpp - grid rail network with per-agent start/goal pairs
//
// Agents ride a seeded connected rail graph with orientation semantics:
// forward continues along the heading, branch-left/right turn onto
// side edges, stop waits. At a dead end, forward reverses. Collisions
// (shared target cell or edge swap) halt the movers and cost -1 each.
// Arrival pays +1; a dense shaping term pays 0.01 per unit of decrease in
// the BFS distance to the goal. Locality: agents within a graph distance
// radius are neighbors.
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <queue>
#include <sstream>
#include <tuple>
#include <vector>

#include "mamba/env.hpp"
#include "mamba/rng.hpp"

namespace mamba {

struct MiniRailSpec {
  int grid = 9;
  int agents = 2;
  int locality_radius = 5;   // graph distance; < 0 means full connectivity
  int max_len = 80;
  Real arrival_reward = 1.0;
  Real collision_penalty = -1.0;
  Real shaping = 0.01;
};

class MiniRail final : public Env {
 public:
  static constexpr int kStop = 0, kForward = 1, kLeft = 2, kRight = 3;

  explicit MiniRail(const MiniRailSpec& spec) : spec_(spec) {
    require(spec_.grid >= 3, "minirail: grid too small");
    require(spec_.agents >= 1 && spec_.agents <= 10, "minirail: 1..10 agents");
  }

  int num_agents() const override { return spec_.agents; }
  int obs_dim() const override { return 4 * spec_.grid + 4 + 1 + 9 + 36; }
  int num_actions() const override { return 4; }
  int max_episode_len() const override { return spec_.max_len; }
  std::string name() const override { return "minirail"; }

  EnvStep reset(std::uint64_t seed) override {
    RngStream rng = RngStream(seed).sub("minirail");
    for (int attempt = 0;; ++attempt) {
      if (attempt > 200) throw InternalError("minirail: could not build a solvable map");
      build_graph(rng);
      if (place_agents(rng)) break;
    }
    steps_ = 0;
    done_ = false;
    last_positions_ = positions();
    return make_step(Vec::Zero(spec_.agents));
  }

  EnvStep step(const std::vector<int>& actions) override {
    require(!done_, "minirail: episode is over");
    require(static_cast<int>(actions.size()) == spec_.agents, "minirail: action count mismatch");
    Mat mask = action_masks();
    for (int i = 0; i < spec_.agents; ++i) {
      if (!agents_[i].active) {
        require(actions[i] == -1, "minirail: absent agent must pass -1");
      } else {
        require(actions[i] >= 0 && actions[i] < 4 && mask(i, actions[i]) != 0.0,
                "minirail: masked action submitted");
      }
    }

    // just_terminated agents from the previous step become fully absent now
    for (Agent& a : agents_) a.just_done = false;

    // Movement intents.
    std::vector<int> target(spec_.agents), newdir(spec_.agents);
    std::vector<bool> moving(spec_.agents, false);
    for (int i = 0; i < spec_.agents; ++i) {
      const Agent& a = agents_[i];
      target[i] = a.active ? a.node : -1;
      newdir[i] = a.active ? a.dir : 0;
      if (!a.active || actions[i] == kStop) continue;
      auto [node, dir, ok] = destination(a.node, a.dir, actions[i]);
      if (ok) {
        target[i] = node;
        newdir[i] = dir;
        moving[i] = true;
      }
    }

    // Collision resolution: movers into the same cell, into a standing
    // agent, or swapping an edge are halted. Cascades until stable.
    std::vector<bool> halted(spec_.agents, false);
    bool changed = true;
    while (changed) {
      changed = false;
      for (int i = 0; i < spec_.agents; ++i) {
        if (!moving[i] || halted[i]) continue;
        for (int j = 0; j < spec_.agents; ++j) {
          if (j == i || !agents_[j].active) continue;
          const int tj = (moving[j] && !halted[j]) ? target[j] : agents_[j].node;
          const bool swap = moving[j] && !halted[j] && target[i] == agents_[j].node &&
                            target[j] == agents_[i].node;
          if (target[i] == tj || swap) {
            halted[i] = true;
            changed = true;
            break;
          }
        }
      }
    }

    Vec reward = Vec::Zero(spec_.agents);
    for (int i = 0; i < spec_.agents; ++i) {
      Agent& a = agents_[i];
      if (!a.active) continue;
      if (moving[i] && halted[i]) {
        reward(i) += spec_.collision_penalty;
        continue;  // halted in place, heading unchanged
      }
      if (moving[i]) {
        const int before = dist_to_goal_[a.goal][a.node];
        a.node = target[i];
        a.dir = newdir[i];
        const int after = dist_to_goal_[a.goal][a.node];
        reward(i) += spec_.shaping * static_cast<Real>(before - after);
        if (a.node == a.goal) {
          reward(i) += spec_.arrival_reward;
          a.active = false;
          a.just_done = true;
          a.arrived = true;
        }
      }
    }

    ++steps_;
    const bool all_done = std::all_of(agents_.begin(), agents_.end(),
                                      [](const Agent& a) { return !a.active; });
    done_ = all_done || steps_ >= spec_.max_len;
    last_positions_ = positions();
    return make_step(reward);
  }

  Real success_metric() const override {
    int arrived = 0;
    for (const Agent& a : agents_) arrived += a.arrived ? 1 : 0;
    return static_cast<Real>(arrived) / spec_.agents;
  }

  std::string render() const override {
    std::ostringstream out;
    for (int r = 0; r < spec_.grid; ++r) {
      for (int c = 0; c < spec_.grid; ++c) {
        const int node = r * spec_.grid + c;
        char ch = edge_count(node) > 0 ? '+' : '.';
        for (int i = 0; i < spec_.agents; ++i) {
          if (agents_[i].goal == node) ch = static_cast<char>('a' + i);
          if (agents_[i].active && agents_[i].node == node) ch = static_cast<char>('0' + i);
        }
        out << ch;
      }
      out << '\n';
    }
    return out.str();
  }

  // Graph distance between agents' (frozen) positions, for the locality
  // mask and its BFS oracle in tests.
  BoolMat neighbor_matrix() const {
    const int n = spec_.agents;
    BoolMat nb = BoolMat::Constant(n, n, false);
    for (int i = 0; i < n; ++i) {
      nb(i, i) = true;
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        if (spec_.locality_radius < 0) {
          nb(i, j) = true;
        } else {
          const int d = node_distance(last_positions_[i], last_positions_[j]);
          nb(i, j) = d >= 0 && d <= spec_.locality_radius;
        }
      }
    }
    return nb;
  }

  int node_distance(int a, int b) const { return pair_dist_[a][b]; }
  bool has_edge(int node, int dir) const { return edges_[node][dir]; }
  int agent_node(int i) const { return agents_[i].node; }
  int agent_goal(int i) const { return agents_[i].goal; }
  int agent_dir(int i) const { return agents_[i].dir; }
  bool agent_active(int i) const { return agents_[i].active; }

  Mat action_masks() const {
    Mat mask = Mat::Zero(spec_.agents, 4);
    for (int i = 0; i < spec_.agents; ++i) {
      if (!agents_[i].active) continue;
      mask(i, kStop) = 1.0;
      mask(i, kForward) = destination_ok(agents_[i].node, agents_[i].dir, kForward);
      mask(i, kLeft) = destination_ok(agents_[i].node, agents_[i].dir, kLeft);
      mask(i, kRight) = destination_ok(agents_[i].node, agents_[i].dir, kRight);
    }
    return mask;
  }

 private:
  struct Agent {
    int node = 0, dir = 0, goal = 0;
    bool active = true;
    bool just_done = false;
    bool arrived = false;
  };

  // dir: 0=N 1=E 2=S 3=W
  static constexpr std::array<int, 4> kDr{-1, 0, 1, 0};
  static constexpr std::array<int, 4> kDc{0, 1, 0, -1};

  int node_of(int r, int c) const { return r * spec_.grid + c; }
  bool in_bounds(int r, int c) const { return r >= 0 && r < spec_.grid && c >= 0 && c < spec_.grid; }

  int edge_count(int node) const {
    int k = 0;
    for (int d = 0; d < 4; ++d) k += edges_[node][d] ? 1 : 0;
    return k;
  }

  // Resolves an action to (target node, new direction, valid).
  std::tuple<int, int, bool> destination(int node, int dir, int action) const {
    auto go = [&](int d) -> std::tuple<int, int, bool> {
      if (!edges_[node][d]) return {node, dir, false};
      const int r = node / spec_.grid + kDr[d];
      const int c = node % spec_.grid + kDc[d];
      return {node_of(r, c), d, true};
    };
    if (action == kForward) {
      const bool dead_end = !edges_[node][dir] && !edges_[node][(dir + 3) % 4] &&
                            !edges_[node][(dir + 1) % 4];
      if (dead_end) return go((dir + 2) % 4);
      return go(dir);
    }
    if (action == kLeft) return go((dir + 3) % 4);
    if (action == kRight) return go((dir + 1) % 4);
    return {node, dir, false};
  }
  Real destination_ok(int node, int dir, int action) const {
    return std::get<2>(destination(node, dir, action)) ? 1.0 : 0.0;
  }

  void build_graph(RngStream& rng) {
    const int N = spec_.grid * spec_.grid;
    edges_.assign(N, {false, false, false, false});
    // Randomized spanning tree, then extra edges for branching.
    std::vector<bool> visited(N, false);
    std::vector<int> stack{static_cast<int>(rng.below(N))};
    visited[stack[0]] = true;
    while (!stack.empty()) {
      const int node = stack.back();
      std::array<int, 4> order{0, 1, 2, 3};
      for (int k = 3; k > 0; --k) std::swap(order[k], order[rng.below(k + 1)]);
      bool advanced = false;
      for (int d : order) {
        const int r = node / spec_.grid + kDr[d];
        const int c = node % spec_.grid + kDc[d];
        if (!in_bounds(r, c) || visited[node_of(r, c)]) continue;
        add_edge(node, d);
        visited[node_of(r, c)] = true;
        stack.push_back(node_of(r, c));
        advanced = true;
        break;
      }
      if (!advanced) stack.pop_back();
    }
    const int extra = N / 4;
    for (int k = 0; k < extra; ++k) {
      const int node = static_cast<int>(rng.below(N));
      const int d = static_cast<int>(rng.below(4));
      const int r = node / spec_.grid + kDr[d];
      const int c = node % spec_.grid + kDc[d];
      if (in_bounds(r, c)) add_edge(node, d);
    }
    compute_distances();
  }

  void add_edge(int node, int d) {
    const int other = node_of(node / spec_.grid + kDr[d], node % spec_.grid + kDc[d]);
    edges_[node][d] = true;
    edges_[other][(d + 2) % 4] = true;
  }

  void compute_distances() {
    const int N = spec_.grid * spec_.grid;
    pair_dist_.assign(N, std::vector<int>(N, -1));
    for (int s = 0; s < N; ++s) {
      std::queue<int> q;
      q.push(s);
      pair_dist_[s][s] = 0;
      while (!q.empty()) {
        const int node = q.front();
        q.pop();
        for (int d = 0; d < 4; ++d) {
          if (!edges_[node][d]) continue;
          const int next = node_of(node / spec_.grid + kDr[d], node % spec_.grid + kDc[d]);
          if (pair_dist_[s][next] < 0) {
            pair_dist_[s][next] = pair_dist_[s][node] + 1;
            q.push(next);
          }
        }
      }
    }
  }

  // (node, dir) reachability under the movement rules.
  bool reachable(int start_node, int start_dir, int goal) const {
    std::vector<bool> seen(edges_.size() * 4, false);
    std::queue<std::pair<int, int>> q;
    q.emplace(start_node, start_dir);
    seen[start_node * 4 + start_dir] = true;
    while (!q.empty()) {
      auto [node, dir] = q.front();
      q.pop();
      if (node == goal) return true;
      for (int action : {kForward, kLeft, kRight}) {
        auto [next, ndir, ok] = destination(node, dir, action);
        if (ok && !seen[next * 4 + ndir]) {
          seen[next * 4 + ndir] = true;
          q.emplace(next, ndir);
        }
      }
    }
    return false;
  }

  bool place_agents(RngStream& rng) {
    const int N = spec_.grid * spec_.grid;
    agents_.assign(spec_.agents, Agent{});
    dist_to_goal_.clear();
    std::vector<int> taken;
    for (int i = 0; i < spec_.agents; ++i) {
      Agent& a = agents_[i];
      bool placed = false;
      for (int tries = 0; tries < 100 && !placed; ++tries) {
        const int node = static_cast<int>(rng.below(N));
        if (edge_count(node) == 0) continue;
        if (std::find(taken.begin(), taken.end(), node) != taken.end()) continue;
        int goal = static_cast<int>(rng.below(N));
        if (edge_count(goal) == 0 || goal == node) continue;
        std::vector<int> dirs;
        for (int d = 0; d < 4; ++d)
          if (edges_[node][d]) dirs.push_back(d);
        const int dir = dirs[rng.below(dirs.size())];
        if (!reachable(node, dir, goal)) continue;
        a.node = node;
        a.dir = dir;
        a.goal = goal;
        a.active = true;
        taken.push_back(node);
        placed = true;
      }
      if (!placed) return false;
    }
    for (const Agent& a : agents_) {
      if (dist_to_goal_.count(a.goal) == 0) {
        dist_to_goal_[a.goal] = std::vector<int>(N);
        for (int v = 0; v < N; ++v) dist_to_goal_[a.goal][v] = std::max(0, pair_dist_[a.goal][v]);
      }
    }
    return true;
  }

  std::vector<int> positions() const {
    std::vector<int> out(spec_.agents);
    for (int i = 0; i < spec_.agents; ++i) out[i] = agents_[i].node;
    return out;
  }

  EnvStep make_step(const Vec& reward) const {
    EnvStep s;
    const int n = spec_.agents;
    s.obs = Mat::Zero(n, obs_dim());
    s.reward = reward;
    s.alive.resize(n);
    s.present.resize(n);
    s.action_mask = done_ ? Mat::Zero(n, 4) : action_masks();
    s.neighbors = neighbor_matrix();
    s.done = done_;
    for (int i = 0; i < n; ++i) {
      const Agent& a = agents_[i];
      s.alive[i] = a.active && !done_;
      s.present[i] = a.active || a.just_done;
      if (s.present[i]) s.obs.row(i) = observe(i);
    }
    return s;
  }

  RowVec observe(int i) const {
    const Agent& a = agents_[i];
    RowVec o = RowVec::Zero(obs_dim());
    const int G = spec_.grid;
    int off = 0;
    o(off + a.node / G) = 1.0;
    off += G;
    o(off + a.node % G) = 1.0;
    off += G;
    o(off + a.goal / G) = 1.0;
    off += G;
    o(off + a.goal % G) = 1.0;
    off += G;
    o(off + a.dir) = 1.0;
    off += 4;
    const int d = dist_to_goal_.at(a.goal)[a.node];
    o(off) = static_cast<Real>(d) / (2.0 * G);
    off += 1;
    // 3x3 occupancy of other active agents
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int r = a.node / G + dr, c = a.node % G + dc;
        Real occupied = 0.0;
        if (in_bounds(r, c))
          for (int j = 0; j < spec_.agents; ++j)
            if (j != i && agents_[j].active && agents_[j].node == node_of(r, c)) occupied = 1.0;
        o(off++) = occupied;
      }
    // 3x3 window of rail edges (4 bits per cell)
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc)
        for (int dir = 0; dir < 4; ++dir) {
          const int r = a.node / G + dr, c = a.node % G + dc;
          o(off++) = (in_bounds(r, c) && edges_[node_of(r, c)][dir]) ? 1.0 : 0.0;
        }
    return o;
  }

  MiniRailSpec spec_;
  std::vector<std::array<bool, 4>> edges_;
  std::vector<std::vector<int>> pair_dist_;
  std::map<int, std::vector<int>> dist_to_goal_;
  std::vector<Agent> agents_;
  std::vector<int> last_positions_;
  int steps_ = 0;
  bool done_ = false;
};

}  // namespace mamba

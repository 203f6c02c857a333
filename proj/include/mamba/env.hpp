// env.hpp - environment interface
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mamba/common.hpp"

namespace mamba {

// One environment tick as seen by the learner. `alive` marks agents that
// act this step; `present` additionally covers an agent's single
// terminal-observation step (real obs, no action) before it disappears.
struct EnvStep {
  Mat obs;                    // n x d_obs; zero rows once absent
  Vec reward;                 // reward for the action just taken (zeros on reset)
  std::vector<bool> alive;
  std::vector<bool> present;
  Mat action_mask;            // n x A; every alive agent has >= 1 available action
  BoolMat neighbors;          // n x n, diagonal true
  bool done = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int num_agents() const = 0;
  virtual int obs_dim() const = 0;
  virtual int num_actions() const = 0;
  virtual int max_episode_len() const = 0;
  virtual std::string name() const = 0;

  virtual EnvStep reset(std::uint64_t seed) = 0;
  // actions[i] must satisfy the current mask for alive agents and be -1
  // otherwise; environments never silently fix actions.
  virtual EnvStep step(const std::vector<int>& actions) = 0;

  // Task success in [0,1] for the finished episode (arrival rate / win).
  virtual Real success_metric() const = 0;
  virtual std::string render() const = 0;
};

}  // namespace mamba

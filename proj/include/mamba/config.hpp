// config.hpp - run configuration, key=value config files, run manifest
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mamba/common.hpp"

namespace mamba {

// Shortest decimal representation that round-trips the exact double.
// Integral values print without an exponent.
inline std::string repr_real(Real v) {
  char buf[64];
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

// All tunables of a run. Defaults follow the rail-network column of the
// reference hyperparameter table; the skirmish presets override the four
// fields that differ (model_epochs, seq_length, buffer_capacity,
// hidden_size).
struct Config {
  // PPO
  int batch_size = 2000;          // PPO minibatch size (transitions)
  Real gae_lambda = 0.95;
  Real entropy_coef = 0.001;
  Real entropy_anneal = 0.99998;  // multiplied in per minibatch step
  int ppo_updates = 4;
  int ppo_epochs = 5;
  Real clip_eps = 0.2;
  Real actor_lr = 5e-4;
  Real critic_lr = 5e-4;
  Real gamma = 0.99;

  // World model
  Real model_lr = 2e-4;
  int model_epochs = 40;
  int sampled_rollouts = 40;      // sequences per model epoch and dream starts
  int seq_length = 50;
  int horizon = 15;               // imagined rollout length H
  std::int64_t buffer_capacity = 500000;  // environment transitions
  int latent_groups = 32;         // K
  int latent_classes = 32;        // C
  Real kl_balance_entropy = 0.2;  // posterior branch
  Real kl_balance_cross = 0.8;    // prior (cross-entropy) branch

  // Common
  Real grad_clip = 100;           // global gradient norm
  int trajectories_between_updates = 1;
  int hidden_size = 400;          // GRU state D and MLP width

  // Ablation toggles
  bool use_info_loss = true;
  Real info_loss_weight = 1.0;
  bool use_kl_balancing = true;
  Real comm_dropout = 0.1;
  bool use_positional_encoding = true;
  int locality_radius = -1;       // <0: full connectivity
  bool use_linear_comm = false;

  // Architecture knobs
  int comm_dim = 0;               // attention width; 0 -> hidden_size
  int comm_layers = 3;
  int critic_attention_layers = 1;
  bool use_action_embedding = false;  // default: one-hot action inputs
  int action_embed_dim = 16;
  bool critic_uses_h = false;     // critic attends over z only by default
  bool mask_dead_agents = false;  // drop dead agents from the attention mask
  bool dead_broadcast = false;    // re-send frozen frames of dead agents
  bool absorbing_posterior_from_prior = false;

  // Training loop
  std::int64_t total_steps = 50000;
  int eval_interval = 2000;       // env steps between evaluations
  int eval_episodes = 10;

  // Environment
  std::string env = "minirail";
  int agents = 2;
  int max_episode_len = 0;        // 0 -> environment default
  int minirail_size = 9;

  std::uint64_t seed = 1;

  template <class F>
  void for_each_field(F&& f) {
    f("batch_size", batch_size);
    f("gae_lambda", gae_lambda);
    f("entropy_coef", entropy_coef);
    f("entropy_anneal", entropy_anneal);
    f("ppo_updates", ppo_updates);
    f("ppo_epochs", ppo_epochs);
    f("clip_eps", clip_eps);
    f("actor_lr", actor_lr);
    f("critic_lr", critic_lr);
    f("gamma", gamma);
    f("model_lr", model_lr);
    f("model_epochs", model_epochs);
    f("sampled_rollouts", sampled_rollouts);
    f("seq_length", seq_length);
    f("horizon", horizon);
    f("buffer_capacity", buffer_capacity);
    f("latent_groups", latent_groups);
    f("latent_classes", latent_classes);
    f("kl_balance_entropy", kl_balance_entropy);
    f("kl_balance_cross", kl_balance_cross);
    f("grad_clip", grad_clip);
    f("trajectories_between_updates", trajectories_between_updates);
    f("hidden_size", hidden_size);
    f("use_info_loss", use_info_loss);
    f("info_loss_weight", info_loss_weight);
    f("use_kl_balancing", use_kl_balancing);
    f("comm_dropout", comm_dropout);
    f("use_positional_encoding", use_positional_encoding);
    f("locality_radius", locality_radius);
    f("use_linear_comm", use_linear_comm);
    f("comm_dim", comm_dim);
    f("comm_layers", comm_layers);
    f("critic_attention_layers", critic_attention_layers);
    f("use_action_embedding", use_action_embedding);
    f("action_embed_dim", action_embed_dim);
    f("critic_uses_h", critic_uses_h);
    f("mask_dead_agents", mask_dead_agents);
    f("dead_broadcast", dead_broadcast);
    f("absorbing_posterior_from_prior", absorbing_posterior_from_prior);
    f("total_steps", total_steps);
    f("eval_interval", eval_interval);
    f("eval_episodes", eval_episodes);
    f("env", env);
    f("agents", agents);
    f("max_episode_len", max_episode_len);
    f("minirail_size", minirail_size);
    f("seed", seed);
  }
  template <class F>
  void for_each_field(F&& f) const {
    const_cast<Config*>(this)->for_each_field([&](const char* n, auto& v) {
      f(n, const_cast<const std::remove_reference_t<decltype(v)>&>(v));
    });
  }

  int resolved_comm_dim() const { return comm_dim > 0 ? comm_dim : hidden_size; }
  int latent_flat_dim() const { return latent_groups * latent_classes; }

  void validate() const {
    auto rate_ok = [](Real r) { return r > 0.0 && r <= 1.0; };
    if (!rate_ok(gae_lambda)) throw ConfigError("gae_lambda must be in (0,1]");
    if (!rate_ok(gamma)) throw ConfigError("gamma must be in (0,1]");
    if (!rate_ok(entropy_anneal)) throw ConfigError("entropy_anneal must be in (0,1]");
    if (!rate_ok(clip_eps)) throw ConfigError("clip_eps must be in (0,1]");
    if (!rate_ok(actor_lr)) throw ConfigError("actor_lr must be in (0,1]");
    if (!rate_ok(critic_lr)) throw ConfigError("critic_lr must be in (0,1]");
    if (!rate_ok(model_lr)) throw ConfigError("model_lr must be in (0,1]");
    if (comm_dropout < 0.0 || comm_dropout >= 1.0) throw ConfigError("comm_dropout must be in [0,1)");
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (latent_groups < 1 || latent_classes < 2) throw ConfigError("latent shape must be at least 1x2");
    if (std::abs(kl_balance_entropy + kl_balance_cross - 1.0) > 1e-12)
      throw ConfigError("KL balance weights must sum to 1");
    if (seq_length < 2) throw ConfigError("seq_length must be >= 2");
    if (hidden_size < 1 || resolved_comm_dim() < 1) throw ConfigError("hidden sizes must be positive");
    if (agents < 1) throw ConfigError("agents must be >= 1");
    if (env != "minirail" && env != "skirmish") throw ConfigError("unknown env: " + env);
    if (latent_groups == 32 && latent_classes == 32) {
      // 32 groups x log2(32) bits is the 160-bit message payload.
      if (latent_groups * 5 != 160) throw ConfigError("latent payload arithmetic broken");
    }
  }

  std::string to_key_value() const {
    std::string out;
    for_each_field([&](const char* name, const auto& v) {
      out += name;
      out += '=';
      out += field_to_string(v);
      out += '\n';
    });
    return out;
  }

  std::uint64_t hash() const { return fnv1a(to_key_value()); }

  // Parse "key=value" lines. Blank lines and '#' comments allowed.
  // Unknown keys are rejected.
  void apply_key_value(const std::string& text, const std::string& origin = "<config>") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto hash_pos = line.find('#');
      if (hash_pos != std::string::npos) line.erase(hash_pos);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (!set_field(key, value))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_key_value(ss.str(), path);
  }

  bool set_field(const std::string& key, const std::string& value) {
    bool found = false;
    for_each_field([&](const char* name, auto& v) {
      if (!found && key == name) {
        parse_into(v, value, key);
        found = true;
      }
    });
    return found;
  }

  // Flat UTF-8 key=value manifest written at run start.
  void write_manifest(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write manifest: " + path);
    out << to_key_value();
    out << "config_hash=" << std::hex << hash() << std::dec << '\n';
  }

 private:
  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t");
    auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  static std::string field_to_string(const bool& v) { return v ? "true" : "false"; }
  static std::string field_to_string(const int& v) { return std::to_string(v); }
  static std::string field_to_string(const std::int64_t& v) { return std::to_string(v); }
  static std::string field_to_string(const std::uint64_t& v) { return std::to_string(v); }
  static std::string field_to_string(const Real& v) { return repr_real(v); }
  static std::string field_to_string(const std::string& v) { return v; }

  static void parse_into(bool& v, const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") v = true;
    else if (s == "false" || s == "0") v = false;
    else throw ConfigError("bad boolean for " + key + ": " + s);
  }
  static void parse_into(int& v, const std::string& s, const std::string& key) {
    try { std::size_t pos; v = std::stoi(s, &pos); if (pos != s.size()) throw std::invalid_argument(""); }
    catch (...) { throw ConfigError("bad integer for " + key + ": " + s); }
  }
  static void parse_into(std::int64_t& v, const std::string& s, const std::string& key) {
    try { std::size_t pos; v = std::stoll(s, &pos); if (pos != s.size()) throw std::invalid_argument(""); }
    catch (...) { throw ConfigError("bad integer for " + key + ": " + s); }
  }
  static void parse_into(std::uint64_t& v, const std::string& s, const std::string& key) {
    try { std::size_t pos; v = std::stoull(s, &pos); if (pos != s.size()) throw std::invalid_argument(""); }
    catch (...) { throw ConfigError("bad integer for " + key + ": " + s); }
  }
  static void parse_into(Real& v, const std::string& s, const std::string& key) {
    try { std::size_t pos; v = std::stod(s, &pos); if (pos != s.size()) throw std::invalid_argument(""); }
    catch (...) { throw ConfigError("bad number for " + key + ": " + s); }
  }
  static void parse_into(std::string& v, const std::string& s, const std::string&) { v = s; }
};

}  // namespace mamba

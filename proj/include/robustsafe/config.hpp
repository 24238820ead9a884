#pragma once

#include <cstdint>
#include <limits>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustsafe/env.hpp"

namespace robustsafe::runtime {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every hyperparameter of every command. Loaded from flat `key = value`
/// text; `#` starts a comment. Unknown keys are rejected.
struct TrainConfig {
  // environment
  std::string env = "double_integrator";
  double disturbance_scale = 1.0;
  double goal = std::numeric_limits<double>::quiet_NaN();  // NaN: environment default

  // seeding
  std::uint64_t seed = 0;

  // discounts and rates
  double gamma = 0.99;
  double gamma_h = 0.99;
  double alpha_init = 0.2;
  double target_entropy = std::numeric_limits<double>::quiet_NaN();  // NaN: -dim(U)
  double lambda_init = 0.0;
  double lambda_lr = 1e-2;
  double tau = 0.005;
  double lr_safety_critic = 3e-4;
  double lr_protagonist = 3e-4;
  double lr_adversary = 3e-4;
  double lr_critic = 3e-4;
  double lr_policy = 3e-4;
  double lr_alpha = 3e-4;

  // networks
  std::size_t hidden_layers = 2;
  std::size_t hidden_units = 64;

  // training loop
  std::size_t batch_size = 256;
  std::size_t total_steps = 200'000;
  std::size_t steps_per_epoch = 5'000;
  std::size_t max_episode_length = 500;
  std::size_t warmup_steps = 5'000;
  std::size_t update_every = 1;
  std::size_t updates_per_step = 1;
  double exploration_noise = 0.1;
  double init_scale = 0.5;
  std::size_t buffer_capacity = 1'000'000;
  std::size_t eval_episodes = 10;
  std::size_t checkpoint_every = 1;
  bool freeze_lambda = false;
  bool freeze_adversary = false;
  double divergence_threshold = 1e6;

  // grid solver
  std::size_t grid_nodes = 101;
  std::size_t control_points = 11;
  std::size_t disturbance_points = 11;
  double tol = 1e-6;
  std::size_t max_sweeps = 1'000'000;
  std::size_t max_policy_iterations = 10'000;
  std::string solver = "policy_iteration";

  // evaluation / export
  std::string protocol = "learned";
  std::string checkpoint;
  std::size_t probe_nodes = 101;

  /// Environment options implied by this config.
  env::EnvOptions env_options() const;

  /// Replaces NaN placeholders (goal, target_entropy) with the defaults of `env`.
  void resolve_defaults();

  /// Throws ConfigError when a value is out of its admissible range.
  void validate() const;
};

/// Parses config text. Keys not given keep their defaults; env-dependent
/// defaults (goal, target_entropy) are resolved afterwards.
TrainConfig parse_config(std::istream& in);
TrainConfig load_config(const std::string& path);

/// Applies `key = value` overrides on top of an existing config.
void apply_overrides(TrainConfig& config, const std::map<std::string, std::string>& overrides);

/// Writes every key with its effective value, one per line, in a fixed order.
void write_config(std::ostream& out, const TrainConfig& config);

std::vector<std::string> config_keys();

}  // namespace robustsafe::runtime

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustsafe/config.hpp"
#include "robustsafe/env.hpp"
#include "robustsafe/grid.hpp"
#include "robustsafe/net.hpp"
#include "robustsafe/runtime.hpp"

namespace robustsafe::ris {

/// A training loss left the admissible range; the run is abandoned.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step(step) {}
  std::size_t step;
};

struct LossGrad {
  double value = 0.0;
  net::Vector grad;
};

/// Safety critic Q_h(x, u, a) with its target copy, protagonist pi_h and
/// adversary mu.
struct RisAgent {
  std::size_t state_dim = 0, input_dim = 0, dist_dim = 0;
  double gamma_h = 0.99;
  double tau = 0.005;

  net::Mlp critic, critic_target;
  net::DeterministicPolicy protagonist, adversary;
  net::Adam critic_opt, protagonist_opt, adversary_opt;
};

/// Hidden layer sizes for `config`: hidden_layers copies of hidden_units.
std::vector<std::size_t> layer_sizes(std::size_t in, const runtime::TrainConfig& config, std::size_t out);

/// Builds an agent for `spec`. With `zero_adversary` the adversary's output
/// range is collapsed to {0}.
RisAgent make_ris_agent(const env::SystemSpec& spec, const runtime::TrainConfig& config, net::Rng& rng,
                        bool zero_adversary = false);

/// Stacks [x; u; a] row-wise into a critic input.
net::Matrix critic_input(const net::Matrix& x, const net::Matrix& u, const net::Matrix& a);

/// (1 - gamma_h) h + gamma_h min{h, next_value}.
double safety_backup(double h, double next_value, double gamma_h);

/// Bootstrapped safety targets for every transition of `batch`, read from
/// the target critic at (x', pi_h(x'), mu(x')).
net::RowVector qh_targets(const RisAgent& agent, const runtime::Batch& batch);
double qh_target(const RisAgent& agent, const runtime::Transition& transition);

/// Mean squared error of the live critic against qh_targets; gradient in psi.
LossGrad qh_loss(const RisAgent& agent, const runtime::Batch& batch);
/// -mean Q_h(x, pi_h(x), mu(x)); gradient in phi.
LossGrad protagonist_loss(const RisAgent& agent, const runtime::Batch& batch);
/// +mean Q_h(x, pi_h(x), mu(x)); gradient in beta.
LossGrad adversary_loss(const RisAgent& agent, const runtime::Batch& batch);

struct RisUpdateStats {
  double qh_loss = 0.0;
  double protagonist_loss = 0.0;
  double adversary_loss = 0.0;
};

/// One gradient step: critic, protagonist, adversary, then the target blend.
RisUpdateStats ris_update(RisAgent& agent, const runtime::Batch& batch);

/// Learned safety value V_h(x) = Q_h(x, pi_h(x), mu(x)) for state columns.
net::RowVector safety_value(const RisAgent& agent, const net::Matrix& states);

/// Learned values at every node of `grid`.
std::vector<double> safety_value_on_grid(const RisAgent& agent, const grid::StateGrid& grid);

/// Deterministic action functions for rollouts.
runtime::ActionFn protagonist_fn(const RisAgent& agent);
runtime::ActionFn adversary_fn(const RisAgent& agent);

/// Exploration: Gaussian noise with sigma = scale * (high - low), clipped to
/// the bounds.
std::vector<double> perturb(std::vector<double> action, const std::vector<double>& low,
                            const std::vector<double>& high, double scale, net::Rng& rng);

/// Independent random streams derived from one seed.
struct Streams {
  explicit Streams(std::uint64_t seed);
  net::Rng init;     // network initialization
  net::Rng explore;  // initial states, warm-up actions, exploration noise
  net::Rng replay;   // minibatch sampling
  net::Rng policy;   // reparameterization noise
  net::Rng eval;     // evaluation rollouts
  net::Rng report;   // final evaluation after training
};

struct EpochReport {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double qh_loss = 0.0;          // mean over the epoch's gradient steps
  double protagonist_loss = 0.0;
  std::size_t episodes = 0;      // training episodes finished in the epoch
  double episode_return = 0.0;   // means over those episodes
  double episode_violation = 0.0;
  double violation_steps = 0.0;
};

using RisEpochHook = std::function<void(const RisAgent&, const EpochReport&)>;

/// Actor-critic synthesis of the robust invariant set. Calls `on_epoch`
/// after every steps_per_epoch environment steps. Throws DivergenceError when
/// a loss exceeds config.divergence_threshold or turns non-finite.
RisAgent ris_train(const env::Environment& environment, const runtime::TrainConfig& config,
                   const RisEpochHook& on_epoch = {});

/// Checkpoints: a header line, then named sections.
void save_ris(std::ostream& out, const RisAgent& agent);
RisAgent load_ris(std::istream& in);

// Section helpers shared with SAC-RIS checkpoints.
void write_policy(std::ostream& out, const net::DeterministicPolicy& policy);
net::DeterministicPolicy read_policy(std::istream& in);
void expect_token(std::istream& in, const std::string& token);

}  // namespace robustsafe::ris

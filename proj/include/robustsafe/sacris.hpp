#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "robustsafe/config.hpp"
#include "robustsafe/env.hpp"
#include "robustsafe/net.hpp"
#include "robustsafe/ris.hpp"
#include "robustsafe/runtime.hpp"

namespace robustsafe::sacris {

using ris::LossGrad;

/// Task policy pi (theta) with twin critics (omega_1, omega_2), temperature
/// and multiplier, on top of the safety game agent (psi, phi, beta).
struct SacRisAgent {
  ris::RisAgent safety;

  net::Mlp q1, q2, q1_target, q2_target;
  net::GaussianPolicy policy;
  net::Adam q1_opt, q2_opt, policy_opt, alpha_opt;
  net::Vector log_alpha = net::Vector::Zero(1);

  double lambda = 0.0;
  double lambda_lr = 1e-2;
  double gamma = 0.99;
  double target_entropy = -1.0;
  double tau = 0.005;
  bool freeze_lambda = false;

  double alpha() const;
};

/// With config.freeze_adversary the adversary's output range is {0}.
SacRisAgent make_sacris_agent(const env::SystemSpec& spec, const runtime::TrainConfig& config, net::Rng& rng);

/// r + gamma (min_q - alpha log_prob).
double soft_q_backup(double r, double gamma, double min_q, double alpha, double log_prob);

/// Standard normal noise of shape (action_dim, n).
net::Matrix policy_noise(const SacRisAgent& agent, std::size_t n, net::Rng& rng);

/// Soft targets from the target critics at (x', u', mu(x')) with
/// u' = pi(x') reparameterized by `noise`.
net::RowVector q_targets(const SacRisAgent& agent, const runtime::Batch& batch, const net::Matrix& noise);

/// MSE of critic i (1 or 2) at the stored (x, u, a) against `targets`.
LossGrad q_loss(const SacRisAgent& agent, const runtime::Batch& batch, int i, const net::RowVector& targets);

/// mean(alpha log pi(u|x) - min_j Q_j(x, u, mu(x))), u reparameterized by
/// `noise`; gradient in theta.
LossGrad policy_loss(const SacRisAgent& agent, const runtime::Batch& batch, const net::Matrix& noise);

/// mean Q_h(x, u, mu(x)) with u from pi reparameterized by `noise`.
double safety_term(const SacRisAgent& agent, const runtime::Batch& batch, const net::Matrix& noise);

/// policy_loss - lambda * safety_term; gradient in theta only.
LossGrad lagrangian(const SacRisAgent& agent, const runtime::Batch& batch, const net::Matrix& noise);

/// mean(-alpha log pi(u|x) - alpha H); gradient with respect to log alpha.
LossGrad temperature_loss(const SacRisAgent& agent, const runtime::Batch& batch, const net::Matrix& noise);

/// lambda <- max(0, lambda - lambda_lr * mean_qh).
void dual_update(SacRisAgent& agent, double mean_qh);

struct UpdateStats {
  double qh_loss = 0.0;
  double q1_loss = 0.0, q2_loss = 0.0;
  double lagrangian = 0.0;
  double temperature_loss = 0.0;
  double safety_term = 0.0;
};

/// One gradient step in the order psi, omega_1, omega_2, theta, phi, beta,
/// alpha, targets, lambda. Noise is drawn from `rng` for the critic
/// targets, the policy step, the temperature step and the multiplier step,
/// in that order.
UpdateStats sacris_update(SacRisAgent& agent, const runtime::Batch& batch, net::Rng& rng);

/// Deterministic evaluation policy: the squashed mean action.
runtime::ActionFn policy_fn(const SacRisAgent& agent);

struct ProtocolResult {
  runtime::AdversaryMode mode;
  std::vector<runtime::EpisodeMetrics> episodes;
};

struct EpochReport {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double qh_loss = 0.0;
  double q_loss = 0.0;  // mean of both critics
  double lambda = 0.0;
  double alpha = 0.0;
  std::size_t episodes = 0;  // training episodes finished in the epoch
  double episode_return = 0.0;
  double episode_violation = 0.0;
  double violation_steps = 0.0;
  std::vector<ProtocolResult> evaluations;  // learned adversary, then none
};

using EpochHook = std::function<void(const SacRisAgent&, const EpochReport&)>;

/// Evaluates the deterministic policy under `mode`.
std::vector<runtime::EpisodeMetrics> evaluate(const env::Environment& environment, const SacRisAgent& agent,
                                              runtime::AdversaryMode mode, std::size_t episodes,
                                              std::size_t max_len, double init_scale, net::Rng& rng);

/// Soft actor-critic constrained to the learned robust invariant set.
/// Throws ris::DivergenceError like ris_train.
SacRisAgent sacris_train(const env::Environment& environment, const runtime::TrainConfig& config,
                         const EpochHook& on_epoch = {});

void save_sacris(std::ostream& out, const SacRisAgent& agent);
SacRisAgent load_sacris(std::istream& in);

}  // namespace robustsafe::sacris

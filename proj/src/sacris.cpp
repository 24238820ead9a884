#include "robustsafe/sacris.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "training_loop.hpp"

namespace robustsafe::sacris {

using net::Matrix;
using net::RowVector;
using net::Vector;

namespace {

Matrix column(std::span<const double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return m;
}

std::vector<double> to_std(const Matrix& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

void check_loss(double value, const char* name, double threshold, std::size_t step) {
  if (!std::isfinite(value) || std::abs(value) > threshold) {
    throw ris::DivergenceError(std::string(name) + " diverged (" + std::to_string(value) + ")", step);
  }
}

struct TwinQ {
  RowVector q1, q2;
  net::MlpTape t1, t2;
};

// Both live critics at (x, u, a) with tapes for the input gradient.
TwinQ twin_forward(const SacRisAgent& agent, const Matrix& in) {
  TwinQ out;
  out.q1 = agent.q1.forward(in, out.t1);
  out.q2 = agent.q2.forward(in, out.t2);
  return out;
}

// dL/d(critic input) of mean(-min(Q1, Q2)) scaled by `scale`, with the
// gradient routed to the smaller critic per sample (ties go to Q1).
Matrix min_q_input_grad(const SacRisAgent& agent, const TwinQ& tq, double scale) {
  const auto n = tq.q1.size();
  RowVector g1 = RowVector::Zero(n), g2 = RowVector::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (tq.q1[j] <= tq.q2[j]) {
      g1[j] = scale;
    } else {
      g2[j] = scale;
    }
  }
  return agent.q1.backward(tq.t1, g1, nullptr) + agent.q2.backward(tq.t2, g2, nullptr);
}

struct PolicyTerms {
  double value = 0.0;        // mean(alpha log pi - min Q)
  double safety = 0.0;       // mean Q_h(x, u, mu(x))
  Vector grad;               // in theta
};

// Shared pass for policy_loss and lagrangian; `lambda` weights the safety
// term (0 leaves it out of the gradient).
PolicyTerms policy_terms(const SacRisAgent& agent, const runtime::Batch& batch, const Matrix& noise,
                         double lambda) {
  if (batch.size() == 0) throw std::invalid_argument("policy losses need a nonempty batch");
  const double n = static_cast<double>(batch.size());
  const double alpha = agent.alpha();
  const auto sx = static_cast<Eigen::Index>(agent.safety.state_dim);
  const auto su = static_cast<Eigen::Index>(agent.safety.input_dim);

  net::GaussianPolicy::Tape pt;
  const auto sample = agent.policy.sample_with_noise(batch.x, noise, &pt);
  const Matrix a = agent.safety.adversary.act(batch.x);
  const Matrix in = ris::critic_input(batch.x, sample.action, a);

  const TwinQ tq = twin_forward(agent, in);
  const RowVector min_q = tq.q1.cwiseMin(tq.q2);

  PolicyTerms out;
  out.value = (alpha * sample.log_prob - min_q).sum() / n;

  Matrix d_in = min_q_input_grad(agent, tq, -1.0 / n);

  net::MlpTape ht;
  const RowVector qh = agent.safety.critic.forward(in, ht);
  out.safety = qh.sum() / n;
  if (lambda != 0.0) {
    d_in += agent.safety.critic.backward(ht, RowVector::Constant(qh.size(), -lambda / n), nullptr);
  }

  out.grad = Vector::Zero(static_cast<Eigen::Index>(agent.policy.net().num_params()));
  agent.policy.backward(pt, d_in.middleRows(sx, su), RowVector::Constant(sample.log_prob.size(), alpha / n),
                        &out.grad);
  return out;
}

}  // namespace

double SacRisAgent::alpha() const { return std::exp(log_alpha[0]); }

SacRisAgent make_sacris_agent(const env::SystemSpec& spec, const runtime::TrainConfig& config, net::Rng& rng) {
  SacRisAgent agent;
  agent.safety = ris::make_ris_agent(spec, config, rng, config.freeze_adversary);
  const std::size_t sx = spec.state_dim, su = spec.input_dim(), sa = spec.dist_dim();

  agent.q1 = net::Mlp(ris::layer_sizes(sx + su + sa, config, 1), rng);
  agent.q2 = net::Mlp(ris::layer_sizes(sx + su + sa, config, 1), rng);
  agent.q1_target = agent.q1;
  agent.q2_target = agent.q2;
  agent.policy = net::GaussianPolicy(net::Mlp(ris::layer_sizes(sx, config, 2 * su), rng), spec.input_low,
                                     spec.input_high);

  agent.q1_opt = net::Adam(agent.q1.num_params(), config.lr_critic);
  agent.q2_opt = net::Adam(agent.q2.num_params(), config.lr_critic);
  agent.policy_opt = net::Adam(agent.policy.net().num_params(), config.lr_policy);
  agent.alpha_opt = net::Adam(1, config.lr_alpha);
  agent.log_alpha = Vector::Constant(1, std::log(config.alpha_init));

  agent.lambda = config.lambda_init;
  agent.lambda_lr = config.lambda_lr;
  agent.gamma = config.gamma;
  agent.target_entropy = config.target_entropy;
  agent.tau = config.tau;
  agent.freeze_lambda = config.freeze_lambda;
  return agent;
}

double soft_q_backup(double r, double gamma, double min_q, double alpha, double log_prob) {
  return r + gamma * (min_q - alpha * log_prob);
}

Matrix policy_noise(const SacRisAgent& agent, std::size_t n, net::Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix noise(static_cast<Eigen::Index>(agent.policy.action_dim()), static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < noise.cols(); ++j) {
    for (Eigen::Index i = 0; i < noise.rows(); ++i) noise(i, j) = normal(rng);
  }
  return noise;
}

RowVector q_targets(const SacRisAgent& agent, const runtime::Batch& batch, const Matrix& noise) {
  const auto next = agent.policy.sample_with_noise(batch.x_next, noise);
  const Matrix a_next = agent.safety.adversary.act(batch.x_next);
  const Matrix in = ris::critic_input(batch.x_next, next.action, a_next);
  const RowVector min_q = agent.q1_target.forward(in).cwiseMin(agent.q2_target.forward(in));
  const double alpha = agent.alpha();
  RowVector target(batch.r.size());
  for (Eigen::Index j = 0; j < target.size(); ++j) {
    target[j] = soft_q_backup(batch.r[j], agent.gamma, min_q[j], alpha, next.log_prob[j]);
  }
  return target;
}

LossGrad q_loss(const SacRisAgent& agent, const runtime::Batch& batch, int i, const RowVector& targets) {
  if (batch.size() == 0) throw std::invalid_argument("q_loss needs a nonempty batch");
  if (i != 1 && i != 2) throw std::invalid_argument("critic index must be 1 or 2");
  const net::Mlp& critic = i == 1 ? agent.q1 : agent.q2;
  net::MlpTape tape;
  const RowVector q = critic.forward(ris::critic_input(batch.x, batch.u, batch.a), tape);
  const RowVector diff = q - targets;
  const double n = static_cast<double>(batch.size());

  LossGrad out;
  out.value = diff.squaredNorm() / n;
  out.grad = Vector::Zero(static_cast<Eigen::Index>(critic.num_params()));
  critic.backward(tape, (2.0 / n) * diff, &out.grad);
  return out;
}

LossGrad policy_loss(const SacRisAgent& agent, const runtime::Batch& batch, const Matrix& noise) {
  PolicyTerms terms = policy_terms(agent, batch, noise, 0.0);
  return {terms.value, std::move(terms.grad)};
}

double safety_term(const SacRisAgent& agent, const runtime::Batch& batch, const Matrix& noise) {
  const auto sample = agent.policy.sample_with_noise(batch.x, noise);
  const Matrix a = agent.safety.adversary.act(batch.x);
  return agent.safety.critic.forward(ris::critic_input(batch.x, sample.action, a)).mean();
}

LossGrad lagrangian(const SacRisAgent& agent, const runtime::Batch& batch, const Matrix& noise) {
  PolicyTerms terms = policy_terms(agent, batch, noise, agent.lambda);
  return {terms.value - agent.lambda * terms.safety, std::move(terms.grad)};
}

LossGrad temperature_loss(const SacRisAgent& agent, const runtime::Batch& batch, const Matrix& noise) {
  if (batch.size() == 0) throw std::invalid_argument("temperature_loss needs a nonempty batch");
  const auto sample = agent.policy.sample_with_noise(batch.x, noise);
  const double alpha = agent.alpha();
  const double mean_log_prob = sample.log_prob.mean();
  LossGrad out;
  out.value = -alpha * mean_log_prob - alpha * agent.target_entropy;
  // d/d(log alpha) of alpha * c is alpha * c.
  out.grad = Vector::Constant(1, out.value);
  return out;
}

void dual_update(SacRisAgent& agent, double mean_qh) {
  agent.lambda = std::max(0.0, agent.lambda - agent.lambda_lr * mean_qh);
}

UpdateStats sacris_update(SacRisAgent& agent, const runtime::Batch& batch, net::Rng& rng) {
  UpdateStats stats;
  const std::size_t n = batch.size();

  const LossGrad qh = ris::qh_loss(agent.safety, batch);
  agent.safety.critic_opt.step(agent.safety.critic.params(), qh.grad);
  stats.qh_loss = qh.value;

  const RowVector targets = q_targets(agent, batch, policy_noise(agent, n, rng));
  const LossGrad l1 = q_loss(agent, batch, 1, targets);
  const LossGrad l2 = q_loss(agent, batch, 2, targets);
  agent.q1_opt.step(agent.q1.params(), l1.grad);
  agent.q2_opt.step(agent.q2.params(), l2.grad);
  stats.q1_loss = l1.value;
  stats.q2_loss = l2.value;

  const LossGrad lag = lagrangian(agent, batch, policy_noise(agent, n, rng));
  agent.policy_opt.step(agent.policy.net().params(), lag.grad);
  stats.lagrangian = lag.value;

  const LossGrad pro = ris::protagonist_loss(agent.safety, batch);
  agent.safety.protagonist_opt.step(agent.safety.protagonist.net().params(), pro.grad);
  const LossGrad adv = ris::adversary_loss(agent.safety, batch);
  agent.safety.adversary_opt.step(agent.safety.adversary.net().params(), adv.grad);

  const LossGrad temp = temperature_loss(agent, batch, policy_noise(agent, n, rng));
  agent.alpha_opt.step(agent.log_alpha, temp.grad);
  stats.temperature_loss = temp.value;

  net::soft_update(agent.safety.critic_target, agent.safety.critic, agent.safety.tau);
  net::soft_update(agent.q1_target, agent.q1, agent.tau);
  net::soft_update(agent.q2_target, agent.q2, agent.tau);

  if (!agent.freeze_lambda) {
    stats.safety_term = safety_term(agent, batch, policy_noise(agent, n, rng));
    dual_update(agent, stats.safety_term);
  }
  return stats;
}

runtime::ActionFn policy_fn(const SacRisAgent& agent) {
  return [&agent](std::span<const double> x) { return to_std(agent.policy.mean_action(column(x))); };
}

std::vector<runtime::EpisodeMetrics> evaluate(const env::Environment& environment, const SacRisAgent& agent,
                                              runtime::AdversaryMode mode, std::size_t episodes,
                                              std::size_t max_len, double init_scale, net::Rng& rng) {
  return runtime::evaluate(environment, policy_fn(agent), ris::adversary_fn(agent.safety), mode, episodes, max_len,
                           init_scale, rng);
}

SacRisAgent sacris_train(const env::Environment& environment, const runtime::TrainConfig& config,
                         const EpochHook& on_epoch) {
  config.validate();
  const auto& spec = environment.spec();
  ris::Streams streams(config.seed);
  SacRisAgent agent = make_sacris_agent(spec, config, streams.init);
  runtime::ReplayBuffer buffer(spec.state_dim, spec.input_dim(), spec.dist_dim(), config.buffer_capacity);

  // A frozen adversary applies no disturbance at all, warm-up included.
  const std::vector<double> zeros(spec.dist_dim(), 0.0);
  const auto& dist_low = config.freeze_adversary ? zeros : spec.dist_low;
  const auto& dist_high = config.freeze_adversary ? zeros : spec.dist_high;

  EpochReport report;
  std::size_t updates = 0;

  detail::LoopHooks hooks;
  hooks.act = [&](const env::State& x) {
    const Matrix state = column(x);
    std::vector<double> u = to_std(agent.policy.sample(state, streams.explore).action);
    std::vector<double> a = ris::perturb(to_std(agent.safety.adversary.act(state)), dist_low, dist_high,
                                         config.exploration_noise, streams.explore);
    return std::pair{std::move(u), std::move(a)};
  };
  hooks.update = [&](std::size_t step) {
    for (std::size_t k = 0; k < config.updates_per_step; ++k) {
      const runtime::Batch batch = buffer.sample(config.batch_size, streams.replay);
      UpdateStats stats;
      try {
        stats = sacris_update(agent, batch, streams.policy);
      } catch (const net::NonFiniteError& e) {
        throw ris::DivergenceError(e.what(), step);
      }
      check_loss(stats.qh_loss, "safety critic loss", config.divergence_threshold, step);
      check_loss(stats.q1_loss, "critic 1 loss", config.divergence_threshold, step);
      check_loss(stats.q2_loss, "critic 2 loss", config.divergence_threshold, step);
      check_loss(stats.lagrangian, "policy loss", config.divergence_threshold, step);
      report.qh_loss += stats.qh_loss;
      report.q_loss += 0.5 * (stats.q1_loss + stats.q2_loss);
      ++updates;
    }
  };
  hooks.epoch_end = [&](std::size_t step, const detail::EpisodeSummary& episodes) {
    report.step = step;
    ++report.epoch;
    if (updates > 0) {
      report.qh_loss /= static_cast<double>(updates);
      report.q_loss /= static_cast<double>(updates);
    }
    report.lambda = agent.lambda;
    report.alpha = agent.alpha();
    report.episodes = episodes.episodes;
    report.episode_return = episodes.episode_return;
    report.episode_violation = episodes.episode_violation;
    report.violation_steps = episodes.violation_steps;
    for (auto mode : {runtime::AdversaryMode::Learned, runtime::AdversaryMode::None}) {
      report.evaluations.push_back({mode, evaluate(environment, agent, mode, config.eval_episodes,
                                                   config.max_episode_length, config.init_scale, streams.eval)});
    }
    if (on_epoch) on_epoch(agent, report);
    const std::size_t epoch = report.epoch;
    report = EpochReport{};
    report.epoch = epoch;
    updates = 0;
  };
  detail::run_training_loop(environment, config, streams.explore, buffer, hooks);
  return agent;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_sacris(std::ostream& out, const SacRisAgent& agent) {
  const auto precision = out.precision(17);
  out << "robustsafe-sacris 1\n";
  out << "lambda " << agent.lambda << "\nlambda_lr " << agent.lambda_lr << "\ngamma " << agent.gamma
      << "\ntarget_entropy " << agent.target_entropy << "\ntau " << agent.tau << "\nfreeze_lambda "
      << (agent.freeze_lambda ? 1 : 0) << "\nlog_alpha " << agent.log_alpha[0] << '\n';
  out << "section safety\n";
  ris::save_ris(out, agent.safety);
  out.precision(17);
  out << "section q1\n";
  net::write_mlp(out, agent.q1);
  out << "section q2\n";
  net::write_mlp(out, agent.q2);
  out << "section q1_target\n";
  net::write_mlp(out, agent.q1_target);
  out << "section q2_target\n";
  net::write_mlp(out, agent.q2_target);
  out << "section policy\nbounds " << agent.policy.action_dim();
  for (Eigen::Index i = 0; i < agent.policy.center().size(); ++i) {
    out << ' ' << agent.policy.center()[i] - agent.policy.half_range()[i];
  }
  for (Eigen::Index i = 0; i < agent.policy.center().size(); ++i) {
    out << ' ' << agent.policy.center()[i] + agent.policy.half_range()[i];
  }
  out << '\n';
  net::write_mlp(out, agent.policy.net());
  out << "section q1_opt\n";
  agent.q1_opt.write(out);
  out << "section q2_opt\n";
  agent.q2_opt.write(out);
  out << "section policy_opt\n";
  agent.policy_opt.write(out);
  out << "section alpha_opt\n";
  agent.alpha_opt.write(out);
  out << "end\n";
  out.precision(precision);
}

SacRisAgent load_sacris(std::istream& in) {
  using ris::expect_token;
  expect_token(in, "robustsafe-sacris");
  expect_token(in, "1");
  SacRisAgent agent;
  int freeze = 0;
  double log_alpha = 0.0;
  expect_token(in, "lambda");
  in >> agent.lambda;
  expect_token(in, "lambda_lr");
  in >> agent.lambda_lr;
  expect_token(in, "gamma");
  in >> agent.gamma;
  expect_token(in, "target_entropy");
  in >> agent.target_entropy;
  expect_token(in, "tau");
  in >> agent.tau;
  expect_token(in, "freeze_lambda");
  in >> freeze;
  expect_token(in, "log_alpha");
  in >> log_alpha;
  if (!in) throw std::runtime_error("malformed checkpoint header");
  agent.freeze_lambda = freeze != 0;
  agent.log_alpha = Vector::Constant(1, log_alpha);

  auto section = [&in](const std::string& name) {
    expect_token(in, "section");
    expect_token(in, name);
  };
  section("safety");
  agent.safety = ris::load_ris(in);
  section("q1");
  agent.q1 = net::read_mlp(in);
  section("q2");
  agent.q2 = net::read_mlp(in);
  section("q1_target");
  agent.q1_target = net::read_mlp(in);
  section("q2_target");
  agent.q2_target = net::read_mlp(in);
  section("policy");
  expect_token(in, "bounds");
  std::size_t m = 0;
  in >> m;
  std::vector<double> low(m), high(m);
  for (auto& v : low) in >> v;
  for (auto& v : high) in >> v;
  if (!in) throw std::runtime_error("malformed checkpoint: policy bounds");
  agent.policy = net::GaussianPolicy(net::read_mlp(in), low, high);
  section("q1_opt");
  agent.q1_opt = net::Adam::read(in);
  section("q2_opt");
  agent.q2_opt = net::Adam::read(in);
  section("policy_opt");
  agent.policy_opt = net::Adam::read(in);
  section("alpha_opt");
  agent.alpha_opt = net::Adam::read(in);
  expect_token(in, "end");

  const std::size_t critic_in = agent.safety.state_dim + agent.safety.input_dim + agent.safety.dist_dim;
  if (agent.q1.input_dim() != critic_in || agent.q2.input_dim() != critic_in ||
      agent.policy.net().input_dim() != agent.safety.state_dim || m != agent.safety.input_dim) {
    throw std::runtime_error("checkpoint networks do not match the recorded dimensions");
  }
  return agent;
}

}  // namespace robustsafe::sacris

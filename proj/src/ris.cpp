#include "robustsafe/ris.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>

#include "training_loop.hpp"

namespace robustsafe::ris {

using net::Matrix;
using net::RowVector;
using net::Vector;

namespace {

Matrix column(std::span<const double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return m;
}

std::vector<double> to_std(const Matrix& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

std::vector<double> bounds_of(const Vector& center, const Vector& half, double sign) {
  std::vector<double> out(static_cast<std::size_t>(center.size()));
  for (Eigen::Index i = 0; i < center.size(); ++i) out[static_cast<std::size_t>(i)] = center[i] + sign * half[i];
  return out;
}

void check_loss(double value, const char* name, double threshold, std::size_t step) {
  if (!std::isfinite(value) || std::abs(value) > threshold) {
    throw DivergenceError(std::string(name) + " diverged (" + std::to_string(value) + ")", step);
  }
}

}  // namespace

std::vector<std::size_t> layer_sizes(std::size_t in, const runtime::TrainConfig& config, std::size_t out) {
  std::vector<std::size_t> sizes{in};
  for (std::size_t i = 0; i < config.hidden_layers; ++i) sizes.push_back(config.hidden_units);
  sizes.push_back(out);
  return sizes;
}

RisAgent make_ris_agent(const env::SystemSpec& spec, const runtime::TrainConfig& config, net::Rng& rng,
                        bool zero_adversary) {
  RisAgent agent;
  agent.state_dim = spec.state_dim;
  agent.input_dim = spec.input_dim();
  agent.dist_dim = spec.dist_dim();
  agent.gamma_h = config.gamma_h;
  agent.tau = config.tau;

  agent.critic = net::Mlp(layer_sizes(agent.state_dim + agent.input_dim + agent.dist_dim, config, 1), rng);
  agent.critic_target = agent.critic;
  agent.protagonist = net::DeterministicPolicy(net::Mlp(layer_sizes(agent.state_dim, config, agent.input_dim), rng),
                                               spec.input_low, spec.input_high);
  const std::vector<double> zeros(agent.dist_dim, 0.0);
  agent.adversary = net::DeterministicPolicy(net::Mlp(layer_sizes(agent.state_dim, config, agent.dist_dim), rng),
                                             zero_adversary ? zeros : spec.dist_low,
                                             zero_adversary ? zeros : spec.dist_high);

  agent.critic_opt = net::Adam(agent.critic.num_params(), config.lr_safety_critic);
  agent.protagonist_opt = net::Adam(agent.protagonist.net().num_params(), config.lr_protagonist);
  agent.adversary_opt = net::Adam(agent.adversary.net().num_params(), config.lr_adversary);
  return agent;
}

Matrix critic_input(const Matrix& x, const Matrix& u, const Matrix& a) {
  Matrix in(x.rows() + u.rows() + a.rows(), x.cols());
  in.topRows(x.rows()) = x;
  in.middleRows(x.rows(), u.rows()) = u;
  in.bottomRows(a.rows()) = a;
  return in;
}

double safety_backup(double h, double next_value, double gamma_h) {
  return (1.0 - gamma_h) * h + gamma_h * std::min(h, next_value);
}

RowVector qh_targets(const RisAgent& agent, const runtime::Batch& batch) {
  const Matrix u_next = agent.protagonist.act(batch.x_next);
  const Matrix a_next = agent.adversary.act(batch.x_next);
  const RowVector next = agent.critic_target.forward(critic_input(batch.x_next, u_next, a_next));
  RowVector target(batch.h.size());
  for (Eigen::Index j = 0; j < target.size(); ++j) target[j] = safety_backup(batch.h[j], next[j], agent.gamma_h);
  return target;
}

double qh_target(const RisAgent& agent, const runtime::Transition& transition) {
  const std::array<runtime::Transition, 1> one{transition};
  return qh_targets(agent, runtime::make_batch(one))[0];
}

LossGrad qh_loss(const RisAgent& agent, const runtime::Batch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("qh_loss needs a nonempty batch");
  const RowVector target = qh_targets(agent, batch);
  net::MlpTape tape;
  const RowVector q = agent.critic.forward(critic_input(batch.x, batch.u, batch.a), tape);
  const RowVector diff = q - target;
  const double n = static_cast<double>(batch.size());

  LossGrad out;
  out.value = diff.squaredNorm() / n;
  out.grad = Vector::Zero(static_cast<Eigen::Index>(agent.critic.num_params()));
  agent.critic.backward(tape, (2.0 / n) * diff, &out.grad);
  return out;
}

namespace {

// Mean Q_h(x, pi_h(x), mu(x)) with the gradient routed to one of the two
// players. `sign` multiplies the objective.
LossGrad player_loss(const RisAgent& agent, const runtime::Batch& batch, bool protagonist, double sign) {
  if (batch.size() == 0) throw std::invalid_argument("player losses need a nonempty batch");
  net::DeterministicPolicy::Tape pt, at;
  const Matrix u = agent.protagonist.act(batch.x, pt);
  const Matrix a = agent.adversary.act(batch.x, at);
  net::MlpTape ct;
  const RowVector q = agent.critic.forward(critic_input(batch.x, u, a), ct);
  const double n = static_cast<double>(batch.size());

  LossGrad out;
  out.value = sign * q.sum() / n;
  const RowVector upstream = RowVector::Constant(q.size(), sign / n);
  const Matrix d_in = agent.critic.backward(ct, upstream, nullptr);
  const auto sx = static_cast<Eigen::Index>(agent.state_dim);
  const auto su = static_cast<Eigen::Index>(agent.input_dim);
  const auto sa = static_cast<Eigen::Index>(agent.dist_dim);
  if (protagonist) {
    out.grad = Vector::Zero(static_cast<Eigen::Index>(agent.protagonist.net().num_params()));
    agent.protagonist.backward(pt, d_in.middleRows(sx, su), &out.grad);
  } else {
    out.grad = Vector::Zero(static_cast<Eigen::Index>(agent.adversary.net().num_params()));
    agent.adversary.backward(at, d_in.bottomRows(sa), &out.grad);
  }
  return out;
}

}  // namespace

LossGrad protagonist_loss(const RisAgent& agent, const runtime::Batch& batch) {
  return player_loss(agent, batch, true, -1.0);
}

LossGrad adversary_loss(const RisAgent& agent, const runtime::Batch& batch) {
  return player_loss(agent, batch, false, 1.0);
}

RisUpdateStats ris_update(RisAgent& agent, const runtime::Batch& batch) {
  RisUpdateStats stats;
  const LossGrad critic = qh_loss(agent, batch);
  agent.critic_opt.step(agent.critic.params(), critic.grad);
  stats.qh_loss = critic.value;

  const LossGrad pro = protagonist_loss(agent, batch);
  agent.protagonist_opt.step(agent.protagonist.net().params(), pro.grad);
  stats.protagonist_loss = pro.value;

  const LossGrad adv = adversary_loss(agent, batch);
  agent.adversary_opt.step(agent.adversary.net().params(), adv.grad);
  stats.adversary_loss = adv.value;

  net::soft_update(agent.critic_target, agent.critic, agent.tau);
  return stats;
}

RowVector safety_value(const RisAgent& agent, const Matrix& states) {
  return agent.critic.forward(critic_input(states, agent.protagonist.act(states), agent.adversary.act(states)));
}

std::vector<double> safety_value_on_grid(const RisAgent& agent, const grid::StateGrid& grid) {
  const std::size_t n = grid.size();
  std::vector<double> out(n);
  const std::size_t chunk = 4096;
  std::vector<double> coord(grid.dims());
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Matrix states(static_cast<Eigen::Index>(grid.dims()), static_cast<Eigen::Index>(count));
    for (std::size_t j = 0; j < count; ++j) {
      grid.coordinates(start + j, coord);
      for (std::size_t i = 0; i < coord.size(); ++i) {
        states(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = coord[i];
      }
    }
    const RowVector v = safety_value(agent, states);
    std::copy(v.data(), v.data() + v.size(), out.begin() + static_cast<std::ptrdiff_t>(start));
  }
  return out;
}

runtime::ActionFn protagonist_fn(const RisAgent& agent) {
  return [&agent](std::span<const double> x) { return to_std(agent.protagonist.act(column(x))); };
}

runtime::ActionFn adversary_fn(const RisAgent& agent) {
  return [&agent](std::span<const double> x) { return to_std(agent.adversary.act(column(x))); };
}

std::vector<double> perturb(std::vector<double> action, const std::vector<double>& low,
                            const std::vector<double>& high, double scale, net::Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < action.size(); ++i) {
    const double sigma = scale * (high[i] - low[i]);
    if (sigma > 0.0) action[i] += sigma * normal(rng);
    action[i] = std::clamp(action[i], low[i], high[i]);
  }
  return action;
}

Streams::Streams(std::uint64_t seed) {
  auto derive = [seed](std::uint64_t k) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k)};
    return net::Rng(seq);
  };
  init = derive(1);
  explore = derive(2);
  replay = derive(3);
  policy = derive(4);
  eval = derive(5);
  report = derive(6);
}

RisAgent ris_train(const env::Environment& environment, const runtime::TrainConfig& config,
                   const RisEpochHook& on_epoch) {
  config.validate();
  const auto& spec = environment.spec();
  Streams streams(config.seed);
  RisAgent agent = make_ris_agent(spec, config, streams.init);
  runtime::ReplayBuffer buffer(spec.state_dim, spec.input_dim(), spec.dist_dim(), config.buffer_capacity);

  EpochReport report;
  std::size_t updates = 0;

  detail::LoopHooks hooks;
  hooks.act = [&](const env::State& x) {
    return std::pair{perturb(to_std(agent.protagonist.act(column(x))), spec.input_low, spec.input_high,
                             config.exploration_noise, streams.explore),
                     perturb(to_std(agent.adversary.act(column(x))), spec.dist_low, spec.dist_high,
                             config.exploration_noise, streams.explore)};
  };
  hooks.update = [&](std::size_t step) {
    for (std::size_t k = 0; k < config.updates_per_step; ++k) {
      const runtime::Batch batch = buffer.sample(config.batch_size, streams.replay);
      RisUpdateStats stats;
      try {
        stats = ris_update(agent, batch);
      } catch (const net::NonFiniteError& e) {
        throw DivergenceError(e.what(), step);
      }
      check_loss(stats.qh_loss, "safety critic loss", config.divergence_threshold, step);
      check_loss(stats.protagonist_loss, "protagonist loss", config.divergence_threshold, step);
      report.qh_loss += stats.qh_loss;
      report.protagonist_loss += stats.protagonist_loss;
      ++updates;
    }
  };
  hooks.epoch_end = [&](std::size_t step, const detail::EpisodeSummary& episodes) {
    report.step = step;
    ++report.epoch;
    if (updates > 0) {
      report.qh_loss /= static_cast<double>(updates);
      report.protagonist_loss /= static_cast<double>(updates);
    }
    report.episodes = episodes.episodes;
    report.episode_return = episodes.episode_return;
    report.episode_violation = episodes.episode_violation;
    report.violation_steps = episodes.violation_steps;
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

void expect_token(std::istream& in, const std::string& token) {
  std::string got;
  if (!(in >> got) || got != token) {
    throw std::runtime_error("malformed checkpoint: expected '" + token + "', got '" + got + "'");
  }
}

void write_policy(std::ostream& out, const net::DeterministicPolicy& policy) {
  const auto low = bounds_of(policy.center(), policy.half_range(), -1.0);
  const auto high = bounds_of(policy.center(), policy.half_range(), 1.0);
  out << "bounds " << low.size();
  for (double v : low) out << ' ' << v;
  for (double v : high) out << ' ' << v;
  out << '\n';
  net::write_mlp(out, policy.net());
}

net::DeterministicPolicy read_policy(std::istream& in) {
  expect_token(in, "bounds");
  std::size_t n = 0;
  if (!(in >> n)) throw std::runtime_error("malformed checkpoint: bounds size");
  std::vector<double> low(n), high(n);
  for (auto& v : low) in >> v;
  for (auto& v : high) in >> v;
  if (!in) throw std::runtime_error("malformed checkpoint: bounds values");
  return net::DeterministicPolicy(net::read_mlp(in), low, high);
}

void save_ris(std::ostream& out, const RisAgent& agent) {
  const auto precision = out.precision(17);
  out << "robustsafe-ris 1\n";
  out << "dims " << agent.state_dim << ' ' << agent.input_dim << ' ' << agent.dist_dim << '\n';
  out << "gamma_h " << agent.gamma_h << "\ntau " << agent.tau << '\n';
  out << "section critic\n";
  net::write_mlp(out, agent.critic);
  out << "section critic_target\n";
  net::write_mlp(out, agent.critic_target);
  out << "section protagonist\n";
  write_policy(out, agent.protagonist);
  out << "section adversary\n";
  write_policy(out, agent.adversary);
  out << "section critic_opt\n";
  agent.critic_opt.write(out);
  out << "section protagonist_opt\n";
  agent.protagonist_opt.write(out);
  out << "section adversary_opt\n";
  agent.adversary_opt.write(out);
  out << "end\n";
  out.precision(precision);
}

RisAgent load_ris(std::istream& in) {
  expect_token(in, "robustsafe-ris");
  expect_token(in, "1");
  RisAgent agent;
  expect_token(in, "dims");
  in >> agent.state_dim >> agent.input_dim >> agent.dist_dim;
  expect_token(in, "gamma_h");
  in >> agent.gamma_h;
  expect_token(in, "tau");
  in >> agent.tau;
  if (!in) throw std::runtime_error("malformed checkpoint header");
  expect_token(in, "section");
  expect_token(in, "critic");
  agent.critic = net::read_mlp(in);
  expect_token(in, "section");
  expect_token(in, "critic_target");
  agent.critic_target = net::read_mlp(in);
  expect_token(in, "section");
  expect_token(in, "protagonist");
  agent.protagonist = read_policy(in);
  expect_token(in, "section");
  expect_token(in, "adversary");
  agent.adversary = read_policy(in);
  expect_token(in, "section");
  expect_token(in, "critic_opt");
  agent.critic_opt = net::Adam::read(in);
  expect_token(in, "section");
  expect_token(in, "protagonist_opt");
  agent.protagonist_opt = net::Adam::read(in);
  expect_token(in, "section");
  expect_token(in, "adversary_opt");
  agent.adversary_opt = net::Adam::read(in);
  expect_token(in, "end");

  if (agent.critic.input_dim() != agent.state_dim + agent.input_dim + agent.dist_dim ||
      agent.protagonist.net().input_dim() != agent.state_dim ||
      agent.adversary.net().input_dim() != agent.state_dim) {
    throw std::runtime_error("checkpoint networks do not match the recorded dimensions");
  }
  return agent;
}

}  // namespace robustsafe::ris

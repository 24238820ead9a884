#include "robustsafe/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace robustsafe::env {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::domain_error(std::string(what) + " contains a non-finite entry");
    }
  }
}

void require_size(std::span<const double> values, std::size_t n, const char* what) {
  if (values.size() != n) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(n) +
                                " entries, got " + std::to_string(values.size()));
  }
}

std::vector<double> scaled(const std::vector<double>& v, double s) {
  std::vector<double> out(v);
  for (double& x : out) x *= s;
  return out;
}

}  // namespace

void SystemSpec::validate() const {
  if (state_dim == 0) throw std::invalid_argument("state_dim must be positive");
  if (state_low.size() != state_dim || state_high.size() != state_dim) {
    throw std::invalid_argument("state box dimension mismatch");
  }
  if (input_low.size() != input_high.size() || input_low.empty()) {
    throw std::invalid_argument("input bounds dimension mismatch");
  }
  if (dist_low.size() != dist_high.size() || dist_low.empty()) {
    throw std::invalid_argument("disturbance bounds dimension mismatch");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  for (std::size_t i = 0; i < input_low.size(); ++i) {
    if (!(input_low[i] < input_high[i])) throw std::invalid_argument("input_low must be < input_high");
  }
  for (std::size_t i = 0; i < dist_low.size(); ++i) {
    if (!(dist_low[i] <= dist_high[i])) throw std::invalid_argument("dist_low must be <= dist_high");
  }
  for (std::size_t i = 0; i < state_dim; ++i) {
    if (!(state_low[i] < state_high[i])) throw std::invalid_argument("state_low must be < state_high");
  }
}

State Environment::step(const State& x, const State& u, const State& a) const {
  State next(spec().state_dim);
  step(x, u, a, next);
  return next;
}

bool Environment::in_region(std::span<const double> x) const {
  const auto& s = spec();
  for (std::size_t i = 0; i < s.state_dim; ++i) {
    if (x[i] < s.state_low[i] || x[i] > s.state_high[i]) return false;
  }
  return true;
}

double position_reward(double goal, std::span<const double> u, std::span<const double> next) {
  double effort = 0.0;
  for (double ui : u) effort += ui * ui;
  return -std::abs(next[0] - goal) - 0.01 * effort;
}

// ---------------------------------------------------------------------------
// Double integrator

State double_integrator_step(const State& state, double u, double a) {
  DoubleIntegrator sys;
  State next(2);
  const double uu[1] = {u};
  const double aa[1] = {a};
  sys.step(state, uu, aa, next);
  return next;
}

double double_integrator_h(const State& state) {
  return DoubleIntegrator{}.constraint(state);
}

DoubleIntegrator::DoubleIntegrator(const EnvOptions& options)
    : goal_(options.has_goal ? options.goal : kIntegratorGoal) {
  spec_.state_dim = 2;
  spec_.input_low = {-1.0};
  spec_.input_high = {1.0};
  spec_.dist_low = scaled({-0.5}, options.disturbance_scale);
  spec_.dist_high = scaled({0.5}, options.disturbance_scale);
  spec_.dt = kIntegratorDt;
  spec_.state_low = {-2.0, -2.0};
  spec_.state_high = {2.0, 2.0};
  spec_.validate();
}

void DoubleIntegrator::step(std::span<const double> x, std::span<const double> u,
                            std::span<const double> a, std::span<double> next) const {
  require_size(x, 2, "double integrator state");
  require_finite(x, "double integrator state");
  const double dt = spec_.dt;
  const double pos = x[0];
  const double vel = x[1];
  next[0] = pos + dt * vel;
  next[1] = vel + dt * (u[0] + a[0]);
}

double DoubleIntegrator::constraint(std::span<const double> x) const {
  require_size(x, 2, "double integrator state");
  require_finite(x, "double integrator state");
  return std::min({x[0] + 2.0, 2.0 - x[0], x[1] + 2.0, 2.0 - x[1]});
}

double DoubleIntegrator::reward(std::span<const double>, std::span<const double> u,
                                std::span<const double> next) const {
  return position_reward(goal_, u, next);
}

// ---------------------------------------------------------------------------
// Cart-pole

State cartpole_step(const State& state, double u, double a) {
  CartPole sys;
  State next(4);
  const double uu[1] = {u};
  const double aa[1] = {a};
  sys.step(state, uu, aa, next);
  return next;
}

double cartpole_h(const State& state) { return CartPole{}.constraint(state); }

CartPole::CartPole(const EnvOptions& options)
    : goal_(options.has_goal ? options.goal : kCartPoleGoal) {
  spec_.state_dim = 4;
  spec_.input_low = {-1.0};
  spec_.input_high = {1.0};
  spec_.dist_low = scaled({-0.5}, options.disturbance_scale);
  spec_.dist_high = scaled({0.5}, options.disturbance_scale);
  spec_.dt = params_.dt;
  spec_.state_low = {-2.4, -3.0, -0.4, -3.0};
  spec_.state_high = {2.4, 3.0, 0.4, 3.0};
  spec_.validate();
}

void CartPole::step(std::span<const double> x, std::span<const double> u,
                    std::span<const double> a, std::span<double> next) const {
  require_size(x, 4, "cart-pole state");
  require_finite(x, "cart-pole state");
  const auto& p = params_;
  const double total_mass = p.cart_mass + p.pole_mass;
  const double polemass_length = p.pole_mass * p.half_length;

  const double force = p.force_scale * (u[0] + a[0]);
  const double pos = x[0], vel = x[1], theta = x[2], omega = x[3];
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);

  const double temp = (force + polemass_length * omega * omega * sin_t) / total_mass;
  const double theta_acc =
      (p.gravity * sin_t - cos_t * temp) /
      (p.half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

  next[0] = pos + p.dt * vel;
  next[1] = vel + p.dt * x_acc;
  next[2] = theta + p.dt * omega;
  next[3] = omega + p.dt * theta_acc;
}

double CartPole::constraint(std::span<const double> x) const {
  require_size(x, 4, "cart-pole state");
  require_finite(x, "cart-pole state");
  return std::min(x[2] + kCartPoleAngleLimit, kCartPoleAngleLimit - x[2]);
}

double CartPole::reward(std::span<const double>, std::span<const double> u,
                        std::span<const double> next) const {
  return position_reward(goal_, u, next);
}

std::unique_ptr<Environment> make_environment(std::string_view id, const EnvOptions& options) {
  if (id == "double_integrator") return std::make_unique<DoubleIntegrator>(options);
  if (id == "cartpole") return std::make_unique<CartPole>(options);
  throw std::invalid_argument("unknown environment id: " + std::string(id));
}

}  // namespace robustsafe::env

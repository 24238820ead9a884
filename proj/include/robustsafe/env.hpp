#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace robustsafe::env {

using State = std::vector<double>;

/// Disturbed discrete-time system x' = f(x, u, a) with u in U and a in A.
struct SystemSpec {
  std::size_t state_dim = 0;
  std::vector<double> input_low, input_high;
  std::vector<double> dist_low, dist_high;
  double dt = 0.0;
  /// Box bounds of the region of interest.
  std::vector<double> state_low, state_high;

  std::size_t input_dim() const { return input_low.size(); }
  std::size_t dist_dim() const { return dist_low.size(); }

  /// Throws std::invalid_argument when a bound or dimension is inconsistent.
  /// A disturbance interval may collapse to a point (dist_low == dist_high),
  /// which expresses a disturbance-free system.
  void validate() const;
};

/// Per-run overrides read from config files.
struct EnvOptions {
  /// Multiplies the disturbance bounds; 0 removes the disturbance.
  double disturbance_scale = 1.0;
  /// Replaces the built-in goal position of the reward when set.
  bool has_goal = false;
  double goal = 0.0;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string_view id() const = 0;
  virtual const SystemSpec& spec() const = 0;

  /// Writes f(x, u, a) into `next`. Inputs are used as given (callers clamp).
  virtual void step(std::span<const double> x, std::span<const double> u,
                    std::span<const double> a, std::span<double> next) const = 0;

  /// Constraint function h; h(x) >= 0 exactly on the safe set.
  virtual double constraint(std::span<const double> x) const = 0;

  virtual double reward(std::span<const double> x, std::span<const double> u,
                        std::span<const double> next) const = 0;

  State step(const State& x, const State& u, const State& a) const;

  /// True if x lies inside the region-of-interest box.
  bool in_region(std::span<const double> x) const;
};

// Double integrator: x' = x + dt v, v' = v + dt (u + a), dt = 0.005.
inline constexpr double kIntegratorDt = 0.005;
inline constexpr double kIntegratorGoal = 1.5;

State double_integrator_step(const State& state, double u, double a);
double double_integrator_h(const State& state);

// Frictionless cart-pole, explicit Euler. State is (x, v, theta, omega).
struct CartPoleParams {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force_scale = 10.0;
  double dt = 0.01;
};
inline constexpr double kCartPoleGoal = 1.0;
inline constexpr double kCartPoleAngleLimit = 0.2;

State cartpole_step(const State& state, double u, double a);
double cartpole_h(const State& state);

/// -|x' - goal| - 0.01 |u|^2, where x' is the first coordinate of `next`.
double position_reward(double goal, std::span<const double> u,
                       std::span<const double> next);

class DoubleIntegrator final : public Environment {
 public:
  explicit DoubleIntegrator(const EnvOptions& options = {});

  std::string_view id() const override { return "double_integrator"; }
  const SystemSpec& spec() const override { return spec_; }
  void step(std::span<const double> x, std::span<const double> u,
            std::span<const double> a, std::span<double> next) const override;
  double constraint(std::span<const double> x) const override;
  double reward(std::span<const double> x, std::span<const double> u,
                std::span<const double> next) const override;

 private:
  SystemSpec spec_;
  double goal_;
};

class CartPole final : public Environment {
 public:
  explicit CartPole(const EnvOptions& options = {});

  std::string_view id() const override { return "cartpole"; }
  const SystemSpec& spec() const override { return spec_; }
  void step(std::span<const double> x, std::span<const double> u,
            std::span<const double> a, std::span<double> next) const override;
  double constraint(std::span<const double> x) const override;
  double reward(std::span<const double> x, std::span<const double> u,
                std::span<const double> next) const override;

 private:
  SystemSpec spec_;
  CartPoleParams params_;
  double goal_;
};

/// Builds an environment by id ("double_integrator" or "cartpole").
/// Throws std::invalid_argument for unknown ids.
std::unique_ptr<Environment> make_environment(std::string_view id,
                                              const EnvOptions& options = {});

}  // namespace robustsafe::env

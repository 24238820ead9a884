#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "robustsafe/env.hpp"

namespace robustsafe::grid {

/// Uniform tensor-product grid over a box; nodes are stored row-major
/// (the last dimension varies fastest).
class StateGrid {
 public:
  StateGrid(std::vector<double> low, std::vector<double> high, std::vector<std::size_t> counts);

  /// `nodes_per_dim` nodes along every axis of the spec's state box.
  static StateGrid uniform(const env::SystemSpec& spec, std::size_t nodes_per_dim);

  std::size_t dims() const { return low_.size(); }
  std::size_t size() const { return size_; }
  const std::vector<double>& low() const { return low_; }
  const std::vector<double>& high() const { return high_; }
  const std::vector<std::size_t>& counts() const { return counts_; }
  double spacing(std::size_t dim) const { return spacing_[dim]; }

  void coordinates(std::size_t index, std::span<double> out) const;
  std::vector<double> coordinates(std::size_t index) const;

  /// Multilinear interpolation of node values. Points outside the box are
  /// clamped onto it and charged the Euclidean distance to the box, so that
  /// leaving the region reads as unsafe.
  double interpolate(std::span<const double> values, std::span<const double> point) const;

  /// Stencil form of `interpolate`: fills corner indices and weights
  /// (2^dims entries each) and returns the out-of-box penalty.
  double stencil(std::span<const double> point, std::span<std::uint32_t> indices,
                 std::span<double> weights) const;

 private:
  std::vector<double> low_, high_, spacing_;
  std::vector<std::size_t> counts_, strides_;
  std::size_t size_ = 0;
};

/// Tensor-product discretization of a box with `points_per_dim` uniform
/// points per axis, endpoints included. A degenerate axis (low == high)
/// contributes a single point.
std::vector<std::vector<double>> discretize_box(const std::vector<double>& low,
                                                const std::vector<double>& high,
                                                std::size_t points_per_dim);

struct ValueTable {
  std::vector<double> values;
  double discount = 0.99;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

enum class Role { Protagonist, Adversary };

struct TabularPolicy {
  std::vector<std::size_t> actions;
  Role role = Role::Protagonist;

  static TabularPolicy constant(std::size_t states, std::size_t action, Role role);
  std::size_t operator[](std::size_t s) const { return actions[s]; }
};

/// One flag per node; true exactly where the value is nonnegative.
struct SetMask {
  std::vector<std::uint8_t> inside;

  std::size_t size() const { return inside.size(); }
  std::size_t count() const;
  bool operator[](std::size_t i) const { return inside[i] != 0; }
};

bool is_subset(const SetMask& inner, const SetMask& outer);
double intersection_over_union(const SetMask& a, const SetMask& b);

/// Finite zero-sum safety game: the protagonist picks control index u, the
/// adversary picks disturbance index a, and the value of the successor of
/// node s is read off a value table.
class SafetyGame {
 public:
  virtual ~SafetyGame() = default;

  virtual std::size_t num_states() const = 0;
  virtual std::size_t num_controls() const = 0;
  virtual std::size_t num_disturbances() const = 0;
  virtual double constraint(std::size_t s) const = 0;
  virtual double successor_value(std::span<const double> values, std::size_t s, std::size_t u,
                                 std::size_t a) const = 0;

  std::vector<double> constraint_values() const;
};

/// Game with explicit successor indices, next[(s * controls + u) * disturbances + a].
class DiscreteGame final : public SafetyGame {
 public:
  DiscreteGame(std::vector<double> h, std::size_t controls, std::size_t disturbances,
               std::vector<std::size_t> next);

  std::size_t num_states() const override { return h_.size(); }
  std::size_t num_controls() const override { return controls_; }
  std::size_t num_disturbances() const override { return disturbances_; }
  double constraint(std::size_t s) const override { return h_[s]; }
  double successor_value(std::span<const double> values, std::size_t s, std::size_t u,
                         std::size_t a) const override;

  std::size_t successor(std::size_t s, std::size_t u, std::size_t a) const {
    return next_[(s * controls_ + u) * disturbances_ + a];
  }

 private:
  std::vector<double> h_;
  std::size_t controls_, disturbances_;
  std::vector<std::size_t> next_;
};

/// s0 -> s1 with s1 absorbing, h = (2, -1), one action per player.
DiscreteGame two_state_chain();

/// Environment dynamics sampled on a state grid with discretized action sets.
/// Successor values come from `StateGrid::interpolate`; interpolation
/// stencils are precomputed when they fit in `stencil_budget` entries.
class GridGame final : public SafetyGame {
 public:
  GridGame(const env::Environment& environment, StateGrid grid,
           std::vector<std::vector<double>> controls,
           std::vector<std::vector<double>> disturbances,
           std::size_t stencil_budget = std::size_t{1} << 26);

  /// Uniform grid with `control_points`/`disturbance_points` per action axis.
  static GridGame uniform(const env::Environment& environment, std::size_t nodes_per_dim,
                          std::size_t control_points, std::size_t disturbance_points);

  std::size_t num_states() const override { return grid_.size(); }
  std::size_t num_controls() const override { return controls_.size(); }
  std::size_t num_disturbances() const override { return disturbances_.size(); }
  double constraint(std::size_t s) const override { return h_[s]; }
  double successor_value(std::span<const double> values, std::size_t s, std::size_t u,
                         std::size_t a) const override;

  const StateGrid& grid() const { return grid_; }
  const env::Environment& environment() const { return *environment_; }
  const std::vector<std::vector<double>>& controls() const { return controls_; }
  const std::vector<std::vector<double>>& disturbances() const { return disturbances_; }
  bool has_stencils() const { return !penalty_.empty(); }

 private:
  void build_stencils();

  const env::Environment* environment_;
  StateGrid grid_;
  std::vector<std::vector<double>> controls_, disturbances_;
  std::vector<double> coords_;
  std::vector<double> h_;
  std::size_t corners_ = 0;
  std::vector<std::uint32_t> stencil_index_;
  std::vector<double> stencil_weight_;
  std::vector<double> penalty_;
};

// ---------------------------------------------------------------------------
// Safety self-consistency operators. Each returns a fresh table:
//   T(V)(x) = (1 - g) h(x) + g min{h(x), W(x)}
// where W is the successor value under (pi, mu), the worst disturbance for
// pi, or the max-min over both action sets.

ValueTable backup_fixed(const SafetyGame& game, const ValueTable& v, const TabularPolicy& pi,
                        const TabularPolicy& mu);
ValueTable backup_protagonist(const SafetyGame& game, const ValueTable& v,
                              const TabularPolicy& pi);
ValueTable backup_optimal(const SafetyGame& game, const ValueTable& v);

double sup_norm_distance(std::span<const double> a, std::span<const double> b);

struct SolverOptions {
  double discount = 0.99;
  double tol = 1e-6;
  std::size_t max_sweeps = 1'000'000;
  std::size_t max_policy_iterations = 10'000;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual, std::size_t iterations)
      : std::runtime_error(what), residual_(residual), iterations_(iterations) {}
  double residual() const { return residual_; }
  std::size_t iterations() const { return iterations_; }

 private:
  double residual_;
  std::size_t iterations_;
};

/// Iterates backup_protagonist from `initial` (h when empty) until the
/// sup-norm change drops below tol.
ValueTable policy_evaluation(const SafetyGame& game, const TabularPolicy& pi,
                             const SolverOptions& options,
                             const std::vector<double>& initial = {},
                             std::size_t* sweeps = nullptr);

/// Greedy protagonist: argmax over u of min over a of the successor value,
/// lowest index on ties.
TabularPolicy policy_improvement(const SafetyGame& game, const ValueTable& v);

/// Worst-case disturbance against `pi`: argmin over a, lowest index on ties.
TabularPolicy greedy_adversary(const SafetyGame& game, const ValueTable& v,
                               const TabularPolicy& pi);

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t sweeps = 0;
  /// ||T_h(V) - V|| for the evaluated table.
  double residual = 0.0;
  /// min over nodes of V_k - V_{k-1}; +inf on the first iteration.
  double min_increment = std::numeric_limits<double>::infinity();
  /// sup-norm change against the previous iterate.
  double value_change = std::numeric_limits<double>::infinity();
  std::size_t policy_changes = 0;
};

struct PolicyIterationResult {
  ValueTable value;
  TabularPolicy policy;
  std::vector<IterationRecord> history;
};

/// Alternates evaluation and greedy improvement until the policy is stable.
/// Each evaluation is warm-started from the previous value table.
PolicyIterationResult policy_iteration(const SafetyGame& game, const SolverOptions& options,
                                       const TabularPolicy* initial_policy = nullptr);

struct ValueIterationResult {
  ValueTable value;
  std::vector<double> changes;
};

/// Repeats backup_optimal from V0 = h.
ValueIterationResult value_iteration(const SafetyGame& game, const SolverOptions& options);

SetMask extract_set(const ValueTable& v);
SetMask extract_set(std::span<const double> values);

/// CSV with header `dim0,...,dimN,value`, one node per line, row-major order.
void write_value_csv(std::ostream& out, const StateGrid& grid, std::span<const double> values);
void write_mask_csv(std::ostream& out, const StateGrid& grid, const SetMask& mask);
/// Discrete games have no coordinates; the node index is written as dim0.
void write_value_csv(std::ostream& out, std::span<const double> values);
void write_mask_csv(std::ostream& out, const SetMask& mask);

/// Worker count for operator sweeps: RIS_THREADS when set, else hardware
/// concurrency. Results never depend on it.
unsigned solver_threads();

}  // namespace robustsafe::grid

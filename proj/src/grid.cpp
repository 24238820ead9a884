#include "robustsafe/grid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <string>
#include <thread>

namespace robustsafe::grid {

namespace {

constexpr std::size_t kMaxDims = 8;

// Runs body(begin, end) over contiguous chunks of [0, n). Each index is
// handled by exactly one worker, so the output never depends on the split.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(solver_threads(), std::max<std::size_t>(n / 512, 1));
  if (workers <= 1) {
    body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = std::min(n, w * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

double backup_value(double h, double successor, double discount) {
  return (1.0 - discount) * h + discount * std::min(h, successor);
}

void check_policy(const SafetyGame& game, const TabularPolicy& policy, std::size_t actions) {
  if (policy.actions.size() != game.num_states()) {
    throw std::invalid_argument("policy size does not match the number of states");
  }
  for (std::size_t a : policy.actions) {
    if (a >= actions) throw std::out_of_range("policy action index out of range");
  }
}

void check_table(const SafetyGame& game, const ValueTable& v) {
  if (v.size() != game.num_states()) {
    throw std::invalid_argument("value table size does not match the number of states");
  }
}

// max over u of min over a of the successor value; alpha-beta pruning keeps
// the result and the lowest-index argmax exact.
struct GreedyChoice {
  double value;
  std::size_t action;
};

GreedyChoice best_control(const SafetyGame& game, std::span<const double> values, std::size_t s) {
  const std::size_t nu = game.num_controls();
  const std::size_t na = game.num_disturbances();
  GreedyChoice best{-std::numeric_limits<double>::infinity(), 0};
  for (std::size_t u = 0; u < nu; ++u) {
    double inner = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < na; ++a) {
      inner = std::min(inner, game.successor_value(values, s, u, a));
      if (inner <= best.value) break;
    }
    if (inner > best.value) best = {inner, u};
  }
  return best;
}

double worst_disturbance(const SafetyGame& game, std::span<const double> values, std::size_t s,
                         std::size_t u) {
  double inner = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < game.num_disturbances(); ++a) {
    inner = std::min(inner, game.successor_value(values, s, u, a));
  }
  return inner;
}

}  // namespace

unsigned solver_threads() {
  if (const char* env = std::getenv("RIS_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------
// StateGrid

StateGrid::StateGrid(std::vector<double> low, std::vector<double> high,
                     std::vector<std::size_t> counts)
    : low_(std::move(low)), high_(std::move(high)), counts_(std::move(counts)) {
  const std::size_t d = low_.size();
  if (d == 0 || d > kMaxDims || high_.size() != d || counts_.size() != d) {
    throw std::invalid_argument("grid bounds and counts must share a dimension in [1, 8]");
  }
  spacing_.resize(d);
  strides_.resize(d);
  size_ = 1;
  for (std::size_t k = d; k-- > 0;) {
    if (counts_[k] < 2) throw std::invalid_argument("grid needs at least 2 nodes per dimension");
    if (!(low_[k] < high_[k])) throw std::invalid_argument("grid bounds must satisfy low < high");
    spacing_[k] = (high_[k] - low_[k]) / static_cast<double>(counts_[k] - 1);
    strides_[k] = size_;
    size_ *= counts_[k];
  }
}

StateGrid StateGrid::uniform(const env::SystemSpec& spec, std::size_t nodes_per_dim) {
  return StateGrid(spec.state_low, spec.state_high,
                   std::vector<std::size_t>(spec.state_dim, nodes_per_dim));
}

void StateGrid::coordinates(std::size_t index, std::span<double> out) const {
  for (std::size_t k = 0; k < dims(); ++k) {
    const std::size_t i = (index / strides_[k]) % counts_[k];
    out[k] = low_[k] + static_cast<double>(i) * spacing_[k];
  }
}

std::vector<double> StateGrid::coordinates(std::size_t index) const {
  std::vector<double> out(dims());
  coordinates(index, out);
  return out;
}

double StateGrid::stencil(std::span<const double> point, std::span<std::uint32_t> indices,
                          std::span<double> weights) const {
  const std::size_t d = dims();
  std::array<std::size_t, kMaxDims> base{};
  std::array<double, kMaxDims> frac{};
  double outside_sq = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double x = point[k];
    if (x < low_[k]) {
      outside_sq += (low_[k] - x) * (low_[k] - x);
      x = low_[k];
    } else if (x > high_[k]) {
      outside_sq += (x - high_[k]) * (x - high_[k]);
      x = high_[k];
    }
    const double t = (x - low_[k]) / spacing_[k];
    const auto cell = std::min(static_cast<std::size_t>(std::floor(t)), counts_[k] - 2);
    base[k] = cell;
    frac[k] = t - static_cast<double>(cell);
  }
  const std::size_t corners = std::size_t{1} << d;
  for (std::size_t c = 0; c < corners; ++c) {
    std::size_t idx = 0;
    double w = 1.0;
    for (std::size_t k = 0; k < d; ++k) {
      const bool upper = (c >> k) & 1U;
      idx += (base[k] + (upper ? 1 : 0)) * strides_[k];
      w *= upper ? frac[k] : 1.0 - frac[k];
    }
    indices[c] = static_cast<std::uint32_t>(idx);
    weights[c] = w;
  }
  return std::sqrt(outside_sq);
}

double StateGrid::interpolate(std::span<const double> values, std::span<const double> point) const {
  if (values.size() != size_) throw std::invalid_argument("value table size does not match grid");
  if (point.size() != dims()) throw std::invalid_argument("point dimension does not match grid");
  std::array<std::uint32_t, std::size_t{1} << kMaxDims> idx{};
  std::array<double, std::size_t{1} << kMaxDims> w{};
  const std::size_t corners = std::size_t{1} << dims();
  const double penalty = stencil(point, std::span(idx).first(corners), std::span(w).first(corners));
  double acc = 0.0;
  for (std::size_t c = 0; c < corners; ++c) acc += w[c] * values[idx[c]];
  return acc - penalty;
}

std::vector<std::vector<double>> discretize_box(const std::vector<double>& low,
                                                const std::vector<double>& high,
                                                std::size_t points_per_dim) {
  if (low.size() != high.size() || low.empty()) throw std::invalid_argument("box dimension mismatch");
  if (points_per_dim < 2) throw std::invalid_argument("need at least 2 points per action axis");
  std::vector<std::vector<double>> axes(low.size());
  for (std::size_t k = 0; k < low.size(); ++k) {
    if (low[k] == high[k]) {
      axes[k] = {low[k]};
      continue;
    }
    for (std::size_t i = 0; i < points_per_dim; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(points_per_dim - 1);
      axes[k].push_back(i + 1 == points_per_dim ? high[k] : low[k] + t * (high[k] - low[k]));
    }
  }
  std::vector<std::vector<double>> out{{}};
  for (const auto& axis : axes) {
    std::vector<std::vector<double>> next;
    for (const auto& prefix : out) {
      for (double x : axis) {
        next.push_back(prefix);
        next.back().push_back(x);
      }
    }
    out = std::move(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policies, masks

TabularPolicy TabularPolicy::constant(std::size_t states, std::size_t action, Role role) {
  return TabularPolicy{std::vector<std::size_t>(states, action), role};
}

std::size_t SetMask::count() const {
  return static_cast<std::size_t>(std::count(inside.begin(), inside.end(), std::uint8_t{1}));
}

bool is_subset(const SetMask& inner, const SetMask& outer) {
  if (inner.size() != outer.size()) throw std::invalid_argument("mask size mismatch");
  for (std::size_t i = 0; i < inner.size(); ++i) {
    if (inner[i] && !outer[i]) return false;
  }
  return true;
}

double intersection_over_union(const SetMask& a, const SetMask& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask size mismatch");
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    both += (a[i] && b[i]) ? 1 : 0;
    either += (a[i] || b[i]) ? 1 : 0;
  }
  return either == 0 ? 1.0 : static_cast<double>(both) / static_cast<double>(either);
}

SetMask extract_set(std::span<const double> values) {
  SetMask mask;
  mask.inside.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) mask.inside[i] = values[i] >= 0.0 ? 1 : 0;
  return mask;
}

SetMask extract_set(const ValueTable& v) { return extract_set(std::span<const double>(v.values)); }

// ---------------------------------------------------------------------------
// Games

std::vector<double> SafetyGame::constraint_values() const {
  std::vector<double> h(num_states());
  for (std::size_t s = 0; s < h.size(); ++s) h[s] = constraint(s);
  return h;
}

DiscreteGame::DiscreteGame(std::vector<double> h, std::size_t controls, std::size_t disturbances,
                           std::vector<std::size_t> next)
    : h_(std::move(h)), controls_(controls), disturbances_(disturbances), next_(std::move(next)) {
  if (controls_ == 0 || disturbances_ == 0) throw std::invalid_argument("empty action set");
  if (next_.size() != h_.size() * controls_ * disturbances_) {
    throw std::invalid_argument("successor table has the wrong size");
  }
  for (std::size_t s : next_) {
    if (s >= h_.size()) throw std::out_of_range("successor index out of range");
  }
}

double DiscreteGame::successor_value(std::span<const double> values, std::size_t s, std::size_t u,
                                     std::size_t a) const {
  return values[successor(s, u, a)];
}

DiscreteGame two_state_chain() { return DiscreteGame({2.0, -1.0}, 1, 1, {1, 1}); }

GridGame::GridGame(const env::Environment& environment, StateGrid grid,
                   std::vector<std::vector<double>> controls,
                   std::vector<std::vector<double>> disturbances, std::size_t stencil_budget)
    : environment_(&environment),
      grid_(std::move(grid)),
      controls_(std::move(controls)),
      disturbances_(std::move(disturbances)),
      corners_(std::size_t{1} << grid_.dims()) {
  const auto& spec = environment.spec();
  if (grid_.dims() != spec.state_dim) throw std::invalid_argument("grid dimension does not match the environment");
  if (controls_.empty() || disturbances_.empty()) throw std::invalid_argument("empty action set");
  for (const auto& u : controls_) {
    if (u.size() != spec.input_dim()) throw std::invalid_argument("control dimension mismatch");
  }
  for (const auto& a : disturbances_) {
    if (a.size() != spec.dist_dim()) throw std::invalid_argument("disturbance dimension mismatch");
  }
  const std::size_t d = grid_.dims();
  coords_.resize(grid_.size() * d);
  h_.resize(grid_.size());
  for (std::size_t s = 0; s < grid_.size(); ++s) {
    std::span<double> x(coords_.data() + s * d, d);
    grid_.coordinates(s, x);
    h_[s] = environment.constraint(x);
  }
  const std::size_t entries = grid_.size() * controls_.size() * disturbances_.size() * corners_;
  if (entries <= stencil_budget) build_stencils();
}

GridGame GridGame::uniform(const env::Environment& environment, std::size_t nodes_per_dim,
                           std::size_t control_points, std::size_t disturbance_points) {
  const auto& spec = environment.spec();
  return GridGame(environment, StateGrid::uniform(spec, nodes_per_dim),
                  discretize_box(spec.input_low, spec.input_high, control_points),
                  discretize_box(spec.dist_low, spec.dist_high, disturbance_points));
}

void GridGame::build_stencils() {
  const std::size_t d = grid_.dims();
  const std::size_t nu = controls_.size();
  const std::size_t na = disturbances_.size();
  const std::size_t triples = grid_.size() * nu * na;
  stencil_index_.resize(triples * corners_);
  stencil_weight_.resize(triples * corners_);
  penalty_.resize(triples);
  parallel_for(grid_.size(), [&](std::size_t begin, std::size_t end) {
    std::array<double, kMaxDims> next{};
    for (std::size_t s = begin; s < end; ++s) {
      std::span<const double> x(coords_.data() + s * d, d);
      for (std::size_t u = 0; u < nu; ++u) {
        for (std::size_t a = 0; a < na; ++a) {
          const std::size_t t = (s * nu + u) * na + a;
          environment_->step(x, controls_[u], disturbances_[a], std::span(next).first(d));
          penalty_[t] = grid_.stencil(std::span(next).first(d),
                                      std::span(stencil_index_).subspan(t * corners_, corners_),
                                      std::span(stencil_weight_).subspan(t * corners_, corners_));
        }
      }
    }
  });
}

double GridGame::successor_value(std::span<const double> values, std::size_t s, std::size_t u,
                                 std::size_t a) const {
  if (has_stencils()) {
    const std::size_t t = (s * controls_.size() + u) * disturbances_.size() + a;
    const std::uint32_t* idx = stencil_index_.data() + t * corners_;
    const double* w = stencil_weight_.data() + t * corners_;
    double acc = 0.0;
    for (std::size_t c = 0; c < corners_; ++c) acc += w[c] * values[idx[c]];
    return acc - penalty_[t];
  }
  const std::size_t d = grid_.dims();
  std::array<double, kMaxDims> next{};
  environment_->step(std::span<const double>(coords_.data() + s * d, d), controls_[u],
                     disturbances_[a], std::span(next).first(d));
  return grid_.interpolate(values, std::span<const double>(next.data(), d));
}

// ---------------------------------------------------------------------------
// Operators

double sup_norm_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("size mismatch in sup-norm distance");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ValueTable backup_fixed(const SafetyGame& game, const ValueTable& v, const TabularPolicy& pi,
                        const TabularPolicy& mu) {
  check_table(game, v);
  check_policy(game, pi, game.num_controls());
  check_policy(game, mu, game.num_disturbances());
  ValueTable out{std::vector<double>(v.size()), v.discount};
  parallel_for(v.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      const double h = game.constraint(s);
      out.values[s] = backup_value(h, game.successor_value(v.values, s, pi[s], mu[s]), v.discount);
    }
  });
  return out;
}

ValueTable backup_protagonist(const SafetyGame& game, const ValueTable& v, const TabularPolicy& pi) {
  check_table(game, v);
  check_policy(game, pi, game.num_controls());
  ValueTable out{std::vector<double>(v.size()), v.discount};
  parallel_for(v.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      const double h = game.constraint(s);
      out.values[s] = backup_value(h, worst_disturbance(game, v.values, s, pi[s]), v.discount);
    }
  });
  return out;
}

ValueTable backup_optimal(const SafetyGame& game, const ValueTable& v) {
  check_table(game, v);
  ValueTable out{std::vector<double>(v.size()), v.discount};
  parallel_for(v.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      const double h = game.constraint(s);
      out.values[s] = backup_value(h, best_control(game, v.values, s).value, v.discount);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Solvers

ValueTable policy_evaluation(const SafetyGame& game, const TabularPolicy& pi,
                             const SolverOptions& options, const std::vector<double>& initial,
                             std::size_t* sweeps) {
  if (!(options.tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
  ValueTable v{initial.empty() ? game.constraint_values() : initial, options.discount};
  double change = std::numeric_limits<double>::infinity();
  for (std::size_t n = 1; n <= options.max_sweeps; ++n) {
    ValueTable next = backup_protagonist(game, v, pi);
    change = sup_norm_distance(next.values, v.values);
    v = std::move(next);
    if (change < options.tol) {
      if (sweeps) *sweeps = n;
      return v;
    }
  }
  throw ConvergenceError("policy evaluation hit the sweep cap (residual " + std::to_string(change) + ")",
                         change, options.max_sweeps);
}

TabularPolicy policy_improvement(const SafetyGame& game, const ValueTable& v) {
  check_table(game, v);
  TabularPolicy pi{std::vector<std::size_t>(v.size()), Role::Protagonist};
  parallel_for(v.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) pi.actions[s] = best_control(game, v.values, s).action;
  });
  return pi;
}

TabularPolicy greedy_adversary(const SafetyGame& game, const ValueTable& v, const TabularPolicy& pi) {
  check_table(game, v);
  check_policy(game, pi, game.num_controls());
  TabularPolicy mu{std::vector<std::size_t>(v.size()), Role::Adversary};
  parallel_for(v.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      double worst = std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < game.num_disturbances(); ++a) {
        const double w = game.successor_value(v.values, s, pi[s], a);
        if (w < worst) {
          worst = w;
          mu.actions[s] = a;
        }
      }
    }
  });
  return mu;
}

PolicyIterationResult policy_iteration(const SafetyGame& game, const SolverOptions& options,
                                       const TabularPolicy* initial_policy) {
  const std::size_t n = game.num_states();
  TabularPolicy pi = initial_policy ? *initial_policy : TabularPolicy::constant(n, 0, Role::Protagonist);
  check_policy(game, pi, game.num_controls());

  PolicyIterationResult result;
  // Later evaluations start from the previous table, which lies below the
  // next policy's fixed point, so their sweeps only raise values. The first
  // one starts from h and descends; it is solved tightly so that an early
  // stop cannot leave it above what the next policy attains.
  SolverOptions first = options;
  first.tol = std::min(options.tol, 1e-12);
  std::vector<double> previous;
  for (std::size_t k = 0; k < options.max_policy_iterations; ++k) {
    IterationRecord rec;
    rec.iteration = k;
    ValueTable v = policy_evaluation(game, pi, previous.empty() ? first : options, previous, &rec.sweeps);

    // Greedy step and the optimal-operator residual share one pass.
    TabularPolicy next{std::vector<std::size_t>(n), Role::Protagonist};
    std::vector<double> residual(n);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
      for (std::size_t s = begin; s < end; ++s) {
        const GreedyChoice best = best_control(game, v.values, s);
        next.actions[s] = best.action;
        residual[s] = std::abs(backup_value(game.constraint(s), best.value, v.discount) - v.values[s]);
      }
    });
    rec.residual = *std::max_element(residual.begin(), residual.end());
    if (!previous.empty()) {
      rec.min_increment = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < n; ++s) rec.min_increment = std::min(rec.min_increment, v.values[s] - previous[s]);
      rec.value_change = sup_norm_distance(v.values, previous);
    }
    for (std::size_t s = 0; s < n; ++s) rec.policy_changes += next[s] != pi[s] ? 1 : 0;
    result.history.push_back(rec);

    // A stable policy ends the loop; so does a table that no longer moves
    // while greedy choices flip between numerically tied actions.
    const bool stalled = rec.value_change < options.tol && rec.residual < options.tol;
    if (rec.policy_changes == 0 || stalled) {
      result.value = std::move(v);
      result.policy = std::move(pi);
      return result;
    }
    previous = std::move(v.values);
    pi = std::move(next);
  }
  const double last = result.history.empty() ? 0.0 : result.history.back().residual;
  throw ConvergenceError("policy iteration hit the iteration cap", last, options.max_policy_iterations);
}

ValueIterationResult value_iteration(const SafetyGame& game, const SolverOptions& options) {
  if (!(options.tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
  ValueIterationResult result{{game.constraint_values(), options.discount}, {}};
  for (std::size_t n = 1; n <= options.max_sweeps; ++n) {
    ValueTable next = backup_optimal(game, result.value);
    const double change = sup_norm_distance(next.values, result.value.values);
    result.changes.push_back(change);
    result.value = std::move(next);
    if (change < options.tol) return result;
  }
  const double last = result.changes.back();
  throw ConvergenceError("value iteration hit the sweep cap (residual " + std::to_string(last) + ")",
                         last, options.max_sweeps);
}

// ---------------------------------------------------------------------------
// CSV export

namespace {

template <typename Cell>
void write_grid_csv(std::ostream& out, const StateGrid& grid, std::size_t n, Cell&& cell) {
  if (n != grid.size()) throw std::invalid_argument("table size does not match grid");
  for (std::size_t k = 0; k < grid.dims(); ++k) out << "dim" << k << ',';
  out << "value\n";
  std::vector<double> x(grid.dims());
  const auto old = out.precision(17);
  for (std::size_t s = 0; s < n; ++s) {
    grid.coordinates(s, x);
    for (double c : x) out << c << ',';
    cell(s);
    out << '\n';
  }
  out.precision(old);
}

}  // namespace

void write_value_csv(std::ostream& out, const StateGrid& grid, std::span<const double> values) {
  write_grid_csv(out, grid, values.size(), [&](std::size_t s) { out << values[s]; });
}

void write_mask_csv(std::ostream& out, const StateGrid& grid, const SetMask& mask) {
  write_grid_csv(out, grid, mask.size(), [&](std::size_t s) { out << (mask[s] ? 1 : 0); });
}

void write_value_csv(std::ostream& out, std::span<const double> values) {
  const auto old = out.precision(17);
  out << "dim0,value\n";
  for (std::size_t s = 0; s < values.size(); ++s) out << s << ',' << values[s] << '\n';
  out.precision(old);
}

void write_mask_csv(std::ostream& out, const SetMask& mask) {
  out << "dim0,value\n";
  for (std::size_t s = 0; s < mask.size(); ++s) out << s << ',' << (mask[s] ? 1 : 0) << '\n';
}

}  // namespace robustsafe::grid

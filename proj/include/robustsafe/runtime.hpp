#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "robustsafe/env.hpp"

namespace robustsafe::runtime {

using Rng = std::mt19937_64;

/// One experience tuple (x, u, a, r, h, x').
struct Transition {
  env::State x;
  std::vector<double> u;
  std::vector<double> a;
  double r = 0.0;
  double h = 0.0;  // constraint value at x
  env::State x_next;
  bool done = false;  // the episode ended with this transition
};

/// Column-per-sample view of a sampled minibatch.
struct Batch {
  Eigen::MatrixXd x, u, a, x_next;
  Eigen::RowVectorXd r, h;
  std::vector<std::uint8_t> done;

  std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
};

/// Packs transitions into a Batch (columns in the given order).
Batch make_batch(std::span<const Transition> transitions);

/// Bounded FIFO replay memory with uniform sampling (with replacement).
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t state_dim, std::size_t input_dim, std::size_t dist_dim,
               std::size_t capacity = 1'000'000);

  /// Appends; evicts the oldest entry once full. Rejects non-finite data.
  void push(const Transition& t);

  /// Draws `batch_size` stored transitions uniformly with replacement.
  /// Throws std::logic_error on an empty buffer when batch_size > 0.
  Batch sample(std::size_t batch_size, Rng& rng) const;

  Transition at(std::size_t i) const;  // i-th oldest
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return size_ == 0; }

 private:
  std::size_t slot(std::size_t i) const { return (head_ + i) % capacity_; }

  std::size_t sx_, su_, sa_, stride_;
  std::size_t capacity_;
  std::size_t size_ = 0;
  std::size_t head_ = 0;  // oldest entry
  std::vector<double> data_;
};

struct EpisodeMetrics {
  double episode_return = 0.0;
  /// Sum of max(0, -h) over every visited state, initial and final included.
  double episode_violation = 0.0;
  std::size_t violation_steps = 0;
  std::size_t length = 0;
  bool aborted = false;  // a non-finite state was produced
};

/// Recomputes the metrics of a stored trajectory from its raw states.
EpisodeMetrics compute_metrics(const env::Environment& environment,
                               std::span<const Transition> trajectory);

using ActionFn = std::function<std::vector<double>(std::span<const double> state)>;

enum class AdversaryMode { Learned, None, UniformRandom };

AdversaryMode parse_adversary_mode(const std::string& name);
std::string to_string(AdversaryMode mode);

/// Uniform over the central `scale` fraction of the state box.
env::State sample_initial_state(const env::SystemSpec& spec, double scale, Rng& rng);

/// Uniform over [low, high] per coordinate.
std::vector<double> sample_uniform(const std::vector<double>& low, const std::vector<double>& high,
                                   Rng& rng);

struct Episode {
  std::vector<Transition> trajectory;
  EpisodeMetrics metrics;
};

/// Rolls out from `initial` until `max_len` transitions or until the state
/// leaves the region of interest. A null adversary applies zero disturbance.
/// Actions are clamped to the environment's bounds.
Episode run_episode(const env::Environment& environment, const ActionFn& policy,
                    const ActionFn* adversary, std::size_t max_len, const env::State& initial);

/// Runs `episodes` rollouts of `policy` from the initial-state distribution
/// (central `init_scale` fraction of the box). The disturbance follows
/// `mode`: the learned adversary, none, or uniform random over the bounds.
std::vector<EpisodeMetrics> evaluate(const env::Environment& environment, const ActionFn& policy,
                                     const ActionFn& learned_adversary, AdversaryMode mode,
                                     std::size_t episodes, std::size_t max_len, double init_scale, Rng& rng);

/// Line-per-object JSON writer.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path);
  void write(const std::string& json_line);
  bool ok() const { return static_cast<bool>(out_); }

 private:
  std::ofstream out_;
};

/// Mean and half-width of a two-sided 95% Student-t interval.
struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
};
Interval mean_ci95(std::span<const double> samples);

}  // namespace robustsafe::runtime

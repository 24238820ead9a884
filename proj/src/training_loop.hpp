#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "robustsafe/config.hpp"
#include "robustsafe/env.hpp"
#include "robustsafe/runtime.hpp"

namespace robustsafe::detail {

/// Means over the training episodes that finished during one epoch.
struct EpisodeSummary {
  std::size_t episodes = 0;
  double episode_return = 0.0;
  double episode_violation = 0.0;
  double violation_steps = 0.0;
};

struct LoopHooks {
  /// (u, a) to apply at state x after the warm-up phase.
  std::function<std::pair<std::vector<double>, std::vector<double>>(const env::State& x)> act;
  /// Runs the gradient steps scheduled at `step`.
  std::function<void(std::size_t step)> update;
  /// Called every steps_per_epoch environment steps.
  std::function<void(std::size_t step, const EpisodeSummary& summary)> epoch_end;
};

/// Shared off-policy collection loop: warm-up with uniform random actions,
/// then `act`; episodes restart from the initial-state distribution when
/// they leave the region, reach max_episode_length, or produce a
/// non-finite state.
void run_training_loop(const env::Environment& environment, const runtime::TrainConfig& config,
                       runtime::Rng& explore, runtime::ReplayBuffer& buffer, const LoopHooks& hooks);

}  // namespace robustsafe::detail

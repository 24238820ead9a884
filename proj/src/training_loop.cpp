#include "training_loop.hpp"

namespace robustsafe::detail {

void run_training_loop(const env::Environment& environment, const runtime::TrainConfig& config,
                       runtime::Rng& explore, runtime::ReplayBuffer& buffer, const LoopHooks& hooks) {
  const auto& spec = environment.spec();
  env::State x = runtime::sample_initial_state(spec, config.init_scale, explore);

  double ret = 0.0, violation = 0.0;
  std::size_t violation_steps = 0, length = 0;
  EpisodeSummary summary;

  auto visit = [&](double h) {
    if (h < 0.0) {
      violation += -h;
      ++violation_steps;
    }
  };
  auto finish_episode = [&](const env::State* last) {
    if (last) visit(environment.constraint(*last));
    ++summary.episodes;
    summary.episode_return += ret;
    summary.episode_violation += violation;
    summary.violation_steps += static_cast<double>(violation_steps);
    ret = violation = 0.0;
    violation_steps = length = 0;
    x = runtime::sample_initial_state(spec, config.init_scale, explore);
  };

  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    runtime::Transition t;
    t.x = x;
    t.h = environment.constraint(x);
    if (step <= config.warmup_steps) {
      t.u = runtime::sample_uniform(spec.input_low, spec.input_high, explore);
      t.a = runtime::sample_uniform(spec.dist_low, spec.dist_high, explore);
    } else {
      std::tie(t.u, t.a) = hooks.act(x);
    }
    bool aborted = false;
    try {
      t.x_next = environment.step(x, t.u, t.a);
    } catch (const std::domain_error&) {
      aborted = true;
    }
    if (aborted) {
      finish_episode(nullptr);
    } else {
      t.r = environment.reward(x, t.u, t.x_next);
      visit(t.h);
      ret += t.r;
      ++length;
      const bool left = !environment.in_region(t.x_next);
      t.done = left || length >= config.max_episode_length;
      buffer.push(t);
      x = t.x_next;
      if (t.done) finish_episode(&t.x_next);
    }

    if (step > config.warmup_steps && step % config.update_every == 0 && !buffer.empty()) hooks.update(step);

    if (step % config.steps_per_epoch == 0) {
      EpisodeSummary means = summary;
      if (means.episodes > 0) {
        const double n = static_cast<double>(means.episodes);
        means.episode_return /= n;
        means.episode_violation /= n;
        means.violation_steps /= n;
      }
      hooks.epoch_end(step, means);
      summary = EpisodeSummary{};
    }
  }
}

}  // namespace robustsafe::detail

#include "robustsafe/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "robustsafe/config.hpp"
#include "robustsafe/env.hpp"
#include "robustsafe/grid.hpp"
#include "robustsafe/ris.hpp"
#include "robustsafe/runtime.hpp"
#include "robustsafe/sacris.hpp"

namespace robustsafe::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using runtime::TrainConfig;

// Failures that map to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return json(v).dump();
}

TrainConfig effective_config(const CommandOptions& options, std::optional<std::uint64_t> seed) {
  TrainConfig config;
  if (!options.config_path.empty()) {
    config = runtime::load_config(options.config_path);
  } else {
    std::istringstream empty;
    config = runtime::parse_config(empty);
  }
  std::map<std::string, std::string> overrides = options.overrides;
  if (seed) overrides["seed"] = std::to_string(*seed);
  runtime::apply_overrides(config, overrides);
  return config;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::out | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& fn) {
  std::ostringstream out;
  fn(out);
  write_text(path, out.str());
}

void echo_config(const fs::path& dir, const TrainConfig& config) {
  write_file(dir / "config.txt", [&](std::ostream& out) { runtime::write_config(out, config); });
}

std::unique_ptr<env::Environment> environment_for(const TrainConfig& config) {
  try {
    return env::make_environment(config.env, config.env_options());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

json metrics_json(const runtime::EpisodeMetrics& m) {
  return json{{"episode_return", m.episode_return},
              {"episode_violation", m.episode_violation},
              {"violation_steps", m.violation_steps},
              {"length", m.length},
              {"aborted", m.aborted}};
}

json aggregate_json(const std::vector<runtime::EpisodeMetrics>& episodes) {
  std::vector<double> ret, vio, steps;
  std::size_t violating = 0;
  for (const auto& m : episodes) {
    ret.push_back(m.episode_return);
    vio.push_back(m.episode_violation);
    steps.push_back(static_cast<double>(m.violation_steps));
    if (m.violation_steps > 0) ++violating;
  }
  auto ci = [](const std::vector<double>& v) {
    const auto i = runtime::mean_ci95(v);
    return json{{"mean", i.mean}, {"ci95", i.half_width}};
  };
  return json{{"episodes", episodes.size()},
              {"episodes_with_violation", violating},
              {"episode_return", ci(ret)},
              {"episode_violation", ci(vio)},
              {"violation_steps", ci(steps)}};
}

json eval_line(std::size_t step, runtime::AdversaryMode mode, const std::vector<runtime::EpisodeMetrics>& episodes,
               const json& extra) {
  double ret = 0.0, vio = 0.0, steps = 0.0;
  for (const auto& m : episodes) {
    ret += m.episode_return;
    vio += m.episode_violation;
    steps += static_cast<double>(m.violation_steps);
  }
  const double n = episodes.empty() ? 1.0 : static_cast<double>(episodes.size());
  json line = {{"phase", "eval"},
               {"step", step},
               {"adversary", runtime::to_string(mode)},
               {"episodes", episodes.size()},
               {"episode_return", ret / n},
               {"episode_violation", vio / n},
               {"violation_steps", steps / n}};
  line.update(extra);
  return line;
}

// ---------------------------------------------------------------------------

int solve_grid(const TrainConfig& config, const fs::path& dir, std::ostream& log) {
  std::unique_ptr<env::Environment> environment;
  std::unique_ptr<grid::SafetyGame> game;
  const grid::StateGrid* state_grid = nullptr;
  if (config.env == "two_state_chain") {
    game = std::make_unique<grid::DiscreteGame>(grid::two_state_chain());
  } else {
    environment = environment_for(config);
    auto g = std::make_unique<grid::GridGame>(grid::GridGame::uniform(
        *environment, config.grid_nodes, config.control_points, config.disturbance_points));
    state_grid = &g->grid();
    game = std::move(g);
  }

  grid::SolverOptions options;
  options.discount = config.gamma_h;
  options.tol = config.tol;
  options.max_sweeps = config.max_sweeps;
  options.max_policy_iterations = config.max_policy_iterations;

  fs::create_directories(dir);
  echo_config(dir, config);

  auto write_values = [&](const std::string& stem, const std::vector<double>& values) {
    write_file(dir / (stem + ".csv"), [&](std::ostream& out) {
      state_grid ? grid::write_value_csv(out, *state_grid, values) : grid::write_value_csv(out, values);
    });
  };
  auto write_mask = [&](const std::string& stem, const grid::SetMask& mask) {
    write_file(dir / (stem + ".csv"), [&](std::ostream& out) {
      state_grid ? grid::write_mask_csv(out, *state_grid, mask) : grid::write_mask_csv(out, mask);
    });
  };

  json summary = {{"env", config.env}, {"solver", config.solver}, {"nodes", game->num_states()}};
  try {
    std::vector<double> primary;
    if (config.solver == "policy_iteration" || config.solver == "both") {
      const auto result = grid::policy_iteration(*game, options);
      primary = result.value.values;
      write_file(dir / "convergence.csv", [&](std::ostream& out) {
        out << "iteration,sweeps,residual,min_increment,value_change,policy_changes,monotone\n";
        for (const auto& r : result.history) {
          out << r.iteration << ',' << r.sweeps << ',' << number(r.residual) << ',' << number(r.min_increment)
              << ',' << number(r.value_change) << ',' << r.policy_changes << ','
              << (r.min_increment >= -1e-9 ? 1 : 0) << '\n';
        }
      });
      summary["iterations"] = result.history.size();
      summary["residual"] = result.history.empty() ? 0.0 : result.history.back().residual;
      log << "policy iteration converged in " << result.history.size() << " iterations\n";
    }
    if (config.solver == "value_iteration" || config.solver == "both") {
      const auto result = grid::value_iteration(*game, options);
      const std::string name = config.solver == "both" ? "convergence_vi.csv" : "convergence.csv";
      write_file(dir / name, [&](std::ostream& out) {
        out << "sweep,change\n";
        for (std::size_t i = 0; i < result.changes.size(); ++i) out << i + 1 << ',' << number(result.changes[i]) << '\n';
      });
      if (primary.empty()) {
        primary = result.value.values;
        summary["sweeps"] = result.changes.size();
      } else {
        write_values("value_vi", result.value.values);
        summary["sweeps_vi"] = result.changes.size();
        summary["solver_gap"] = grid::sup_norm_distance(primary, result.value.values);
      }
      log << "value iteration converged in " << result.changes.size() << " sweeps\n";
    }
    const grid::SetMask mask = grid::extract_set(primary);
    write_values("value", primary);
    write_mask("mask", mask);
    summary["set_fraction"] = static_cast<double>(mask.count()) / static_cast<double>(mask.inside.size());
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    log << "set covers " << mask.count() << " of " << mask.inside.size() << " nodes\n";
  } catch (const grid::ConvergenceError& e) {
    log << "iteration cap reached: " << e.what() << '\n';
    return kIterationCap;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const ris::RisAgent& agent) {
  write_file(path, [&](std::ostream& out) { ris::save_ris(out, agent); });
}

void save_checkpoint(const fs::path& path, const sacris::SacRisAgent& agent) {
  write_file(path, [&](std::ostream& out) { sacris::save_sacris(out, agent); });
}

int train_ris(const TrainConfig& config, const fs::path& dir, std::ostream& log) {
  auto environment = environment_for(config);
  fs::create_directories(dir);
  echo_config(dir, config);
  {
    ris::Streams streams(config.seed);
    save_checkpoint(dir / "checkpoint.txt", ris::make_ris_agent(environment->spec(), config, streams.init));
  }
  runtime::JsonlWriter metrics((dir / "metrics.jsonl").string());
  net::Rng eval_rng = ris::Streams(config.seed).eval;

  auto hook = [&](const ris::RisAgent& agent, const ris::EpochReport& r) {
    const json common = {{"lambda", nullptr}, {"alpha", nullptr}, {"qh_loss", r.qh_loss}, {"q_loss", nullptr}};
    json train = {{"phase", "train"},
                  {"step", r.step},
                  {"adversary", "training"},
                  {"episodes", r.episodes},
                  {"episode_return", r.episode_return},
                  {"episode_violation", r.episode_violation},
                  {"violation_steps", r.violation_steps},
                  {"protagonist_loss", r.protagonist_loss}};
    train.update(common);
    metrics.write(train.dump());
    for (auto mode : {runtime::AdversaryMode::Learned, runtime::AdversaryMode::None}) {
      const auto episodes =
          runtime::evaluate(*environment, ris::protagonist_fn(agent), ris::adversary_fn(agent), mode,
                            config.eval_episodes, config.max_episode_length, config.init_scale, eval_rng);
      metrics.write(eval_line(r.step, mode, episodes, common).dump());
    }
    if (r.epoch % config.checkpoint_every == 0) save_checkpoint(dir / "checkpoint.txt", agent);
    log << "step " << r.step << " qh_loss " << r.qh_loss << '\n';
  };

  ris::RisAgent agent;
  try {
    agent = ris::ris_train(*environment, config, hook);
  } catch (const ris::DivergenceError& e) {
    log << "training diverged at step " << e.step << ": " << e.what() << '\n';
    return kDivergence;
  }
  save_checkpoint(dir / "checkpoint.txt", agent);
  if (config.total_steps > 0) {
    json summary;
    for (auto mode : {runtime::AdversaryMode::Learned, runtime::AdversaryMode::None}) {
      summary[runtime::to_string(mode)] = aggregate_json(
          runtime::evaluate(*environment, ris::protagonist_fn(agent), ris::adversary_fn(agent), mode,
                            config.eval_episodes, config.max_episode_length, config.init_scale, eval_rng));
    }
    write_text(dir / "summary.json", summary.dump(2) + "\n");
  }
  return kOk;
}

int train_sacris(const TrainConfig& config, const fs::path& dir, std::ostream& log) {
  auto environment = environment_for(config);
  fs::create_directories(dir);
  echo_config(dir, config);
  {
    ris::Streams streams(config.seed);
    save_checkpoint(dir / "checkpoint.txt", sacris::make_sacris_agent(environment->spec(), config, streams.init));
  }
  runtime::JsonlWriter metrics((dir / "metrics.jsonl").string());

  auto hook = [&](const sacris::SacRisAgent& agent, const sacris::EpochReport& r) {
    const json common = {{"lambda", r.lambda}, {"alpha", r.alpha}, {"qh_loss", r.qh_loss}, {"q_loss", r.q_loss}};
    json train = {{"phase", "train"},
                  {"step", r.step},
                  {"adversary", "training"},
                  {"episodes", r.episodes},
                  {"episode_return", r.episode_return},
                  {"episode_violation", r.episode_violation},
                  {"violation_steps", r.violation_steps}};
    train.update(common);
    metrics.write(train.dump());
    for (const auto& e : r.evaluations) metrics.write(eval_line(r.step, e.mode, e.episodes, common).dump());
    if (r.epoch % config.checkpoint_every == 0) save_checkpoint(dir / "checkpoint.txt", agent);
    log << "step " << r.step << " lambda " << r.lambda << " alpha " << r.alpha << " q_loss " << r.q_loss << '\n';
  };

  sacris::SacRisAgent agent;
  try {
    agent = sacris::sacris_train(*environment, config, hook);
  } catch (const ris::DivergenceError& e) {
    log << "training diverged at step " << e.step << ": " << e.what() << '\n';
    return kDivergence;
  }
  save_checkpoint(dir / "checkpoint.txt", agent);
  if (config.total_steps > 0) {
    net::Rng eval_rng = ris::Streams(config.seed).report;
    json summary;
    for (auto mode : {runtime::AdversaryMode::Learned, runtime::AdversaryMode::None}) {
      summary[runtime::to_string(mode)] = aggregate_json(sacris::evaluate(
          *environment, agent, mode, config.eval_episodes, config.max_episode_length, config.init_scale, eval_rng));
    }
    write_text(dir / "summary.json", summary.dump(2) + "\n");
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct LoadedCheckpoint {
  std::string kind;
  ris::RisAgent ris;
  sacris::SacRisAgent sac;

  const ris::RisAgent& safety() const { return kind == "ris" ? ris : sac.safety; }
};

LoadedCheckpoint load_checkpoint(const TrainConfig& config, const env::SystemSpec& spec) {
  if (config.checkpoint.empty()) throw UsageError("config key 'checkpoint' is required");
  std::ifstream in(config.checkpoint);
  if (!in) throw UsageError("cannot open checkpoint " + config.checkpoint);
  std::string header;
  in >> header;
  in.seekg(0);
  LoadedCheckpoint c;
  try {
    if (header == "robustsafe-ris") {
      c.kind = "ris";
      c.ris = ris::load_ris(in);
    } else if (header == "robustsafe-sacris") {
      c.kind = "sacris";
      c.sac = sacris::load_sacris(in);
    } else {
      throw UsageError("unrecognized checkpoint " + config.checkpoint);
    }
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot load checkpoint: ") + e.what());
  }
  const auto& s = c.safety();
  if (s.state_dim != spec.state_dim || s.input_dim != spec.input_dim() || s.dist_dim != spec.dist_dim()) {
    throw UsageError("checkpoint dimensions do not match env '" + config.env + "'");
  }
  return c;
}

int evaluate_command(const TrainConfig& config, const fs::path& dir, std::ostream& log) {
  auto environment = environment_for(config);
  const LoadedCheckpoint c = load_checkpoint(config, environment->spec());
  const auto mode = runtime::parse_adversary_mode(config.protocol);
  const runtime::ActionFn policy =
      c.kind == "ris" ? ris::protagonist_fn(c.ris) : sacris::policy_fn(c.sac);
  net::Rng rng = ris::Streams(config.seed).eval;
  const auto episodes = runtime::evaluate(*environment, policy, ris::adversary_fn(c.safety()), mode,
                                          config.eval_episodes, config.max_episode_length, config.init_scale, rng);

  fs::create_directories(dir);
  echo_config(dir, config);
  write_file(dir / "eval.jsonl", [&](std::ostream& out) {
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      json line = metrics_json(episodes[i]);
      line["episode"] = i;
      line["adversary"] = runtime::to_string(mode);
      out << line.dump() << '\n';
    }
  });
  if (!episodes.empty()) {
    json summary = aggregate_json(episodes);
    summary["adversary"] = runtime::to_string(mode);
    write_text(dir / "eval_summary.json", summary.dump(2) + "\n");
    log << "mean violation_steps " << summary["violation_steps"]["mean"].get<double>() << " over "
        << episodes.size() << " episodes\n";
  }
  return kOk;
}

int export_values(const TrainConfig& config, const fs::path& dir, std::ostream& log) {
  auto environment = environment_for(config);
  const LoadedCheckpoint c = load_checkpoint(config, environment->spec());
  const auto state_grid = grid::StateGrid::uniform(environment->spec(), config.probe_nodes);
  const auto values = ris::safety_value_on_grid(c.safety(), state_grid);
  const auto mask = grid::extract_set(values);

  fs::create_directories(dir);
  echo_config(dir, config);
  write_file(dir / "values.csv", [&](std::ostream& out) { grid::write_value_csv(out, state_grid, values); });
  write_file(dir / "mask.csv", [&](std::ostream& out) { grid::write_mask_csv(out, state_grid, mask); });
  log << "learned set covers " << mask.count() << " of " << mask.inside.size() << " probe nodes\n";
  return kOk;
}

int dispatch(const std::string& command, const TrainConfig& config, const fs::path& dir, std::ostream& log) {
  if (command == "solve-grid") return solve_grid(config, dir, log);
  if (command == "train-ris") return train_ris(config, dir, log);
  if (command == "train-sacris") return train_sacris(config, dir, log);
  if (command == "eval") return evaluate_command(config, dir, log);
  if (command == "export-values") return export_values(config, dir, log);
  throw UsageError("unknown command '" + command + "'");
}

// Mean and 95% interval across seeds of every per-epoch evaluation metric.
void write_curve(const fs::path& dir, const std::vector<std::uint64_t>& seeds) {
  struct Key {
    std::string adversary;
    std::size_t step;
    bool operator<(const Key& o) const { return std::tie(adversary, step) < std::tie(o.adversary, o.step); }
  };
  static const char* kFields[] = {"episode_return", "episode_violation", "violation_steps"};
  std::map<Key, std::array<std::vector<double>, 3>> groups;
  for (auto seed : seeds) {
    std::ifstream in(dir / ("seed_" + std::to_string(seed)) / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      const json j = json::parse(line);
      if (j.value("phase", "") != "eval") continue;
      auto& g = groups[{j["adversary"].get<std::string>(), j["step"].get<std::size_t>()}];
      for (int f = 0; f < 3; ++f) g[f].push_back(j[kFields[f]].get<double>());
    }
  }
  write_file(dir / "curve.csv", [&](std::ostream& out) {
    out << "adversary,step,seeds";
    for (const char* f : kFields) out << ',' << f << "_mean," << f << "_ci95";
    out << '\n';
    for (const auto& [key, g] : groups) {
      out << key.adversary << ',' << key.step << ',' << g[0].size();
      for (const auto& values : g) {
        const auto ci = runtime::mean_ci95(values);
        out << ',' << number(ci.mean) << ',' << number(ci.half_width);
      }
      out << '\n';
    }
  });
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw std::invalid_argument("bad seed '" + item + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw std::invalid_argument("empty seed list");
  return seeds;
}

int run_command(const CommandOptions& options, std::ostream& log, std::ostream& err) {
  if (options.out_dir.empty()) {
    err << "error: --out is required\n";
    return kInvalidConfig;
  }
  const fs::path dir(options.out_dir);
  try {
    if (options.seeds.empty()) {
      const TrainConfig config = effective_config(options, options.seed);
      return dispatch(options.command, config, dir, log);
    }
    // Validate every run before writing anything.
    std::vector<TrainConfig> configs;
    for (auto seed : options.seeds) configs.push_back(effective_config(options, seed));
    int status = kOk;
    for (std::size_t i = 0; i < configs.size() && status == kOk; ++i) {
      log << "seed " << options.seeds[i] << '\n';
      status = dispatch(options.command, configs[i], dir / ("seed_" + std::to_string(options.seeds[i])), log);
    }
    if (status == kOk && (options.command == "train-ris" || options.command == "train-sacris")) {
      write_curve(dir, options.seeds);
    }
    return status;
  } catch (const runtime::ConfigError& e) {
    err << "invalid config: " << e.what() << '\n';
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
  }
  return kInvalidConfig;
}

}  // namespace robustsafe::cli

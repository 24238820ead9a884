#include "robustsafe/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>

#include <json.hpp>

namespace robustsafe::runtime {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_unsigned(const std::string& key, const std::string& v) {
  // Accept integral values written in scientific notation (e.g. 2e5).
  if (v.find_first_of("eE.") != std::string::npos) {
    const double d = to_double(key, v);
    if (d < 0 || d != static_cast<double>(static_cast<std::uint64_t>(d))) {
      throw ConfigError("key '" + key + "': expected a nonnegative integer, got '" + v + "'");
    }
    return static_cast<std::uint64_t>(d);
  }
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::string format_double(double v) { return nlohmann::json(v).dump(); }

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field field(const std::string& key, T TrainConfig::*member) {
  Field f;
  f.key = key;
  if constexpr (std::is_same_v<T, double>) {
    f.set = [key, member](TrainConfig& c, const std::string& v) { c.*member = to_double(key, v); };
    f.get = [member](const TrainConfig& c) { return format_double(c.*member); };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.set = [key, member](TrainConfig& c, const std::string& v) { c.*member = to_bool(key, v); };
    f.get = [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    f.set = [member](TrainConfig& c, const std::string& v) { c.*member = v; };
    f.get = [member](const TrainConfig& c) { return c.*member; };
  } else {
    f.set = [key, member](TrainConfig& c, const std::string& v) { c.*member = static_cast<T>(to_unsigned(key, v)); };
    f.get = [member](const TrainConfig& c) { return std::to_string(c.*member); };
  }
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("env", &TrainConfig::env),
      field("disturbance_scale", &TrainConfig::disturbance_scale),
      field("goal", &TrainConfig::goal),
      field("seed", &TrainConfig::seed),
      field("gamma", &TrainConfig::gamma),
      field("gamma_h", &TrainConfig::gamma_h),
      field("alpha_init", &TrainConfig::alpha_init),
      field("target_entropy", &TrainConfig::target_entropy),
      field("lambda_init", &TrainConfig::lambda_init),
      field("lambda_lr", &TrainConfig::lambda_lr),
      field("tau", &TrainConfig::tau),
      field("lr_safety_critic", &TrainConfig::lr_safety_critic),
      field("lr_protagonist", &TrainConfig::lr_protagonist),
      field("lr_adversary", &TrainConfig::lr_adversary),
      field("lr_critic", &TrainConfig::lr_critic),
      field("lr_policy", &TrainConfig::lr_policy),
      field("lr_alpha", &TrainConfig::lr_alpha),
      field("hidden_layers", &TrainConfig::hidden_layers),
      field("hidden_units", &TrainConfig::hidden_units),
      field("batch_size", &TrainConfig::batch_size),
      field("total_steps", &TrainConfig::total_steps),
      field("steps_per_epoch", &TrainConfig::steps_per_epoch),
      field("max_episode_length", &TrainConfig::max_episode_length),
      field("warmup_steps", &TrainConfig::warmup_steps),
      field("update_every", &TrainConfig::update_every),
      field("updates_per_step", &TrainConfig::updates_per_step),
      field("exploration_noise", &TrainConfig::exploration_noise),
      field("init_scale", &TrainConfig::init_scale),
      field("buffer_capacity", &TrainConfig::buffer_capacity),
      field("eval_episodes", &TrainConfig::eval_episodes),
      field("checkpoint_every", &TrainConfig::checkpoint_every),
      field("freeze_lambda", &TrainConfig::freeze_lambda),
      field("freeze_adversary", &TrainConfig::freeze_adversary),
      field("divergence_threshold", &TrainConfig::divergence_threshold),
      field("grid_nodes", &TrainConfig::grid_nodes),
      field("control_points", &TrainConfig::control_points),
      field("disturbance_points", &TrainConfig::disturbance_points),
      field("tol", &TrainConfig::tol),
      field("max_sweeps", &TrainConfig::max_sweeps),
      field("max_policy_iterations", &TrainConfig::max_policy_iterations),
      field("solver", &TrainConfig::solver),
      field("protocol", &TrainConfig::protocol),
      field("checkpoint", &TrainConfig::checkpoint),
      field("probe_nodes", &TrainConfig::probe_nodes),
  };
  return table;
}

const Field& lookup(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

bool is_toy_env(const std::string& id) { return id == "two_state_chain"; }

}  // namespace

env::EnvOptions TrainConfig::env_options() const {
  env::EnvOptions o;
  o.disturbance_scale = disturbance_scale;
  o.has_goal = !std::isnan(goal);
  if (o.has_goal) o.goal = goal;
  return o;
}

void TrainConfig::resolve_defaults() {
  if (is_toy_env(env)) {
    if (std::isnan(goal)) goal = 0.0;
    if (std::isnan(target_entropy)) target_entropy = 0.0;
    return;
  }
  std::unique_ptr<env::Environment> e;
  try {
    e = env::make_environment(env, env_options());
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  }
  if (std::isnan(goal)) goal = env == "cartpole" ? env::kCartPoleGoal : env::kIntegratorGoal;
  if (std::isnan(target_entropy)) target_entropy = -static_cast<double>(e->spec().input_dim());
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(std::isfinite(goal) && std::isfinite(target_entropy), "goal and target_entropy must be finite");
  require(env == "double_integrator" || env == "cartpole" || is_toy_env(env), "unknown env '" + env + "'");
  require(disturbance_scale >= 0.0, "disturbance_scale must be >= 0");
  require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
  require(gamma_h > 0.0 && gamma_h < 1.0, "gamma_h must lie in (0, 1)");
  require(alpha_init > 0.0, "alpha_init must be positive");
  require(lambda_init >= 0.0, "lambda_init must be >= 0");
  require(lambda_lr > 0.0, "lambda_lr must be positive");
  require(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
  for (double lr : {lr_safety_critic, lr_protagonist, lr_adversary, lr_critic, lr_policy, lr_alpha}) {
    require(lr > 0.0, "learning rates must be positive");
  }
  require(hidden_units > 0, "hidden_units must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(steps_per_epoch > 0, "steps_per_epoch must be positive");
  require(max_episode_length > 0, "max_episode_length must be positive");
  require(update_every > 0, "update_every must be positive");
  require(exploration_noise >= 0.0, "exploration_noise must be >= 0");
  require(init_scale > 0.0 && init_scale <= 1.0, "init_scale must lie in (0, 1]");
  require(buffer_capacity > 0, "buffer_capacity must be positive");
  require(checkpoint_every > 0, "checkpoint_every must be positive");
  require(divergence_threshold > 0.0, "divergence_threshold must be positive");
  require(grid_nodes >= 2, "grid_nodes must be >= 2");
  require(control_points >= 2 && disturbance_points >= 2, "action discretization needs >= 2 points");
  require(tol > 0.0, "tol must be positive");
  require(solver == "policy_iteration" || solver == "value_iteration" || solver == "both",
          "solver must be policy_iteration, value_iteration or both");
  require(protocol == "learned" || protocol == "learned-adversary" || protocol == "none" ||
              protocol == "uniform-random",
          "protocol must be learned, none or uniform-random");
  require(probe_nodes >= 2, "probe_nodes must be >= 2");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

TrainConfig parse_config(std::istream& in) {
  std::map<std::string, std::string> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (entries.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    entries[key] = value;
  }
  TrainConfig config;
  apply_overrides(config, entries);
  return config;
}

void apply_overrides(TrainConfig& config, const std::map<std::string, std::string>& overrides) {
  // Switching environments drops the previous environment's defaults.
  if (overrides.count("env")) {
    if (!overrides.count("goal")) config.goal = std::numeric_limits<double>::quiet_NaN();
    if (!overrides.count("target_entropy")) config.target_entropy = std::numeric_limits<double>::quiet_NaN();
  }
  for (const auto& [key, value] : overrides) lookup(key).set(config, value);
  config.resolve_defaults();
  config.validate();
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in);
}

void write_config(std::ostream& out, const TrainConfig& config) {
  for (const auto& f : fields()) out << f.key << " = " << f.get(config) << '\n';
}

}  // namespace robustsafe::runtime

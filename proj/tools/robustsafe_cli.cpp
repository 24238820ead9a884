#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "robustsafe/commands.hpp"

namespace cli = robustsafe::cli;

int main(int argc, char** argv) {
  CLI::App app{"Robust invariant sets and safe reinforcement learning under disturbances"};
  app.require_subcommand(1);

  cli::CommandOptions options;
  std::uint64_t seed = 0;
  std::string seeds;
  std::vector<std::string> sets;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"solve-grid", "Solve the discretized safety game by policy or value iteration"},
      {"train-ris", "Train the safety critic, protagonist and adversary"},
      {"train-sacris", "Train the constrained soft actor-critic agent"},
      {"eval", "Evaluate a checkpoint under an adversary protocol"},
      {"export-values", "Write the learned safety value on a probe grid"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", options.config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--out", options.out_dir, "Output directory")->required();
    sub->add_option("--seed", seed, "Seed override");
    sub->add_option("--seeds", seeds, "Comma-separated seeds, run sequentially");
    sub->add_option("--set", sets, "Config override key=value (repeatable)");
    sub->callback([&options, name = name] { options.command = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kInvalidConfig;
  }

  for (const auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) options.seed = seed;
  }
  try {
    if (!seeds.empty()) options.seeds = cli::parse_seed_list(seeds);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kInvalidConfig;
  }
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::cerr << "error: --set expects key=value, got '" << kv << "'\n";
      return cli::kInvalidConfig;
    }
    options.overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return cli::run_command(options, std::cout, std::cerr);
}

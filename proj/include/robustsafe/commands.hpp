#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace robustsafe::cli {

enum ExitCode : int {
  kOk = 0,
  kInvalidConfig = 1,
  kIterationCap = 2,
  kDivergence = 3,
};

struct CommandOptions {
  std::string command;  // solve-grid, train-ris, train-sacris, eval, export-values
  std::string config_path;  // empty: defaults only
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;  // run once per seed into out_dir/seed_<n>
  std::map<std::string, std::string> overrides;
};

/// Runs one command. Progress goes to `log`, errors to `err`. Nothing is
/// written to `out_dir` when the configuration is invalid.
int run_command(const CommandOptions& options, std::ostream& log, std::ostream& err);

/// Parses "1,2,3".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace robustsafe::cli

#include "stochlag/parallel.hpp"
#include "stochlag/runner.hpp"
#include "stochlag/scenario.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

constexpr int kExitCheckFailure = 1;
constexpr int kExitConfigError = 2;
constexpr std::size_t kGoldenRealizations = 200;

void print_report(const stochlag::RunReport& report) {
  std::cout << "scenario " << report.scenario << " (config " << stochlag::hash_hex(report.config_hash) << ", seed "
            << report.seed << ", " << report.realizations << " realizations, " << report.threads << " threads)\n";
  for (const auto& check : report.checks) {
    std::cout << "  " << (check.verdict == stochlag::Verdict::Pass ? "PASS " : "FAIL ") << check.name;
    if (!check.message.empty()) std::cout << ": " << check.message;
    std::cout << " [" << check.seconds << " s]\n";
  }
  for (const auto& w : report.warnings) std::cout << "  warning: " << w << '\n';
  std::cout << (report.all_passed() ? "all checks passed" : "some checks failed") << " in " << report.seconds
            << " s\n";
}

int run(const std::string& config_arg, std::filesystem::path out, std::optional<std::uint64_t> seed,
        std::optional<std::size_t> realizations, int threads, bool golden) {
  const auto config = stochlag::load_scenario(stochlag::resolve_scenario(config_arg));
  if (golden) {
    out = stochlag::scenario_directory() / "golden" / config.name;
    realizations = kGoldenRealizations;
    std::filesystem::remove_all(out);
  }
  if (out.empty()) throw stochlag::ConfigError("--out", "an output directory is required");
  stochlag::RunOptions options;
  options.out_dir = out;
  options.seed = seed;
  options.realizations = realizations;
  options.threads = threads;
  const auto report = stochlag::run_scenario(config, options);
  print_report(report);
  return report.exit_code() == 0 ? 0 : kExitCheckFailure;
}

int converge(const std::string& config_arg, int levels, std::optional<std::size_t> realizations, int threads,
             const std::filesystem::path& out) {
  const auto config = stochlag::load_scenario(stochlag::resolve_scenario(config_arg));
  const std::size_t R = realizations.value_or(std::min(config.realizations, stochlag::kRefinementRealizations));
  const auto table = stochlag::convergence_study(config, levels, R, threads);
  stochlag::write_convergence_csv(table, std::cout);
  std::cout << "# realizations " << table.realizations << " (discarded " << table.discarded << "), labels "
            << table.labels << '\n';
  if (table.lambda_rounding_level) {
    std::cout << "# D_direct vs exp(log_lambda): rounding level on every level (exact trackers)\n";
  } else {
    std::cout << "# fitted order D_direct vs exp(log_lambda): " << stochlag::format_number(table.order_lambda) << '\n';
  }
  if (table.sde_rounding_level) {
    std::cout << "# D_direct vs D_sde: rounding level on every level (identical updates)\n";
  } else {
    std::cout << "# fitted order D_direct vs D_sde: " << stochlag::format_number(table.order_sde) << '\n';
  }
  if (!out.empty()) {
    std::ofstream file(out, std::ios::binary);
    stochlag::write_convergence_csv(table, file);
    if (!file) throw stochlag::IoError("cannot write " + out.string());
  }
  return 0;
}

int list(const std::filesystem::path& dir) {
  for (const auto& s : stochlag::list_scenarios(dir)) {
    std::cout << s.name;
    if (!s.description.empty()) std::cout << "  " << s.description;
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic Lagrangian Monte Carlo engine and verification suite"};
  app.require_subcommand(1);

  std::string config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> realizations;
  int threads = stochlag::default_thread_count();
  bool golden = false;
  int levels = 0;
  std::filesystem::path dir = stochlag::scenario_directory();

  auto* run_cmd = app.add_subcommand("run", "Run the checks of a scenario and write its report");
  run_cmd->add_option("config", config, "Config file or bundled scenario name")->required();
  run_cmd->add_option("--out", out, "Output directory");
  run_cmd->add_option("--seed", seed, "Override the config seed");
  run_cmd->add_option("--realizations", realizations, "Override the realization count");
  run_cmd->add_option("--threads", threads, "Worker threads (default: STOCHLAG_THREADS or hardware)")
      ->check(CLI::PositiveNumber);
  run_cmd->add_flag("--golden", golden, "Regenerate the bundled golden outputs of this scenario");

  auto* converge_cmd = app.add_subcommand("converge", "Determinant tracker refinement study");
  converge_cmd->add_option("config", config, "Config file or bundled scenario name")->required();
  converge_cmd->add_option("--levels", levels, "Number of dt halvings, at least 2")->required();
  converge_cmd->add_option("--realizations", realizations, "Realizations (default: min(config, 200))");
  converge_cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  converge_cmd->add_option("--out", out, "Also write the table to this CSV file");

  auto* list_cmd = app.add_subcommand("list-scenarios", "List the bundled scenarios");
  list_cmd->add_option("--dir", dir, "Scenario directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }

  try {
    if (*run_cmd) return run(config, out, seed, realizations, threads, golden);
    if (*converge_cmd) return converge(config, levels, realizations, threads, out);
    if (*list_cmd) return list(dir);
  } catch (const stochlag::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const stochlag::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const stochlag::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfigError;
  }
  return 0;
}

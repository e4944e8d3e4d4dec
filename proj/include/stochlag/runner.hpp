#pragma once

// Scenario runner: turns a ScenarioConfig into coefficients, grids and data
// fields, runs the enabled checks and writes a JSON report plus CSV series and
// field snapshots. Every CSV depends only on the config, the seed and the
// realization count, never on the thread count.

#include "stochlag/estimators.hpp"
#include "stochlag/scenario.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace stochlag {

inline constexpr const char* kVersion = "0.1.0";

/// Realizations used by the determinant refinement study and the round-trip
/// check; both are pathwise properties, so a modest sample suffices.
inline constexpr std::size_t kRefinementRealizations = 200;
inline constexpr std::size_t kRoundtripRealizations = 20;

/// Largest tolerated fraction of discarded realizations.
inline constexpr double kMaxDiscardFraction = 1e-3;

/// C in the Feynman-Kac tolerance max(4 SE, C (dt + dx^2)), calibrated once on
/// the heat scenario and frozen: twice its noise-free t = 0 distance
/// (9.49e-5) over dt + dx^2 = 3.5e-3, rounded up (see docs/checks.md).
inline constexpr double kFeynmanKacConstant = 0.06;

/// Output directory or file could not be written.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class Verdict { Pass, Fail, Skip };
std::string to_string(Verdict v);

struct CheckResult {
  std::string name;
  Verdict verdict = Verdict::Skip;
  std::string message;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  double seconds = 0.0;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> realizations;
  int threads = 1;
};

struct RunReport {
  std::string scenario;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::size_t realizations = 0;
  int threads = 1;
  std::vector<CheckResult> checks;
  nlohmann::ordered_json discards = nlohmann::ordered_json::object();
  std::vector<std::string> warnings;
  double seconds = 0.0;

  bool all_passed() const;
  /// 0 when every enabled check passed, 1 otherwise.
  int exit_code() const;
  const CheckResult* find(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
};

/// Everything derived from a config.
struct Scenario {
  ScenarioConfig config;
  CoefficientSet cs;        // unrestricted, used by the oracle
  CoefficientSet cs_paths;  // restricted to the padded box, used by paths
  Box padded;
  UniformGrid labels;
  UniformGrid query;
  UniformGrid oracle_grid;
  TimeGrid time_grid;
  SpaceTimeField f0, rho0, phi_terminal;
  std::vector<SpaceTimeField> h0;
  std::optional<SpaceTimeField> f_exact;
  std::vector<Vec> martingale_labels;

  static Scenario build(const ScenarioConfig& config);
  SimulationPlan plan() const;
  double oracle_dt() const;
};

RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options);

struct ConvergenceRow {
  double dt = 0.0;
  double rms_sde = 0.0;     // RMS |D_direct - D_sde| at T
  double rms_lambda = 0.0;  // RMS |D_direct - exp(log_lambda)| at T
};

struct ConvergenceTable {
  std::vector<ConvergenceRow> rows;
  double order_sde = 0.0;
  double order_lambda = 0.0;
  /// True when |D_direct - D_sde| stays at rounding level on every level, as
  /// it does in one dimension where the two updates coincide.
  bool sde_rounding_level = false;
  /// Same for |D_direct - exp(log_lambda)|, which happens when sigma is
  /// constant and every tracker is exact.
  bool lambda_rounding_level = false;
  std::size_t realizations = 0;
  std::size_t discarded = 0;
  std::size_t labels = 0;
};

/// Determinant tracker discrepancies at dt, dt/2, ..., dt/2^(levels-1) on a
/// shared Brownian path. Throws PreconditionError when levels < 2.
ConvergenceTable convergence_study(const ScenarioConfig& config, int levels, std::size_t realizations, int threads);

/// Least-squares slope of log(error) against log(dt).
double fitted_order(std::span<const double> dt, std::span<const double> error);

void write_convergence_csv(const ConvergenceTable& table, std::ostream& out);

/// Shortest round-trip decimal form ("nan" and "inf" for non-finite values).
std::string format_number(double x);

}  // namespace stochlag

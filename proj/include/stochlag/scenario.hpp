#pragma once

// Scenario configuration: a YAML file describing the operator, the initial
// and terminal data, the grids and the list of checks to run. Unknown keys
// are errors; every diagnostic names the field and, when known, the line.

#include "stochlag/coefficients.hpp"
#include "stochlag/grid.hpp"
#include "stochlag/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace stochlag {

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message, int line = -1, int column = -1);

  const std::string& field() const { return field_; }
  int line() const { return line_; }  // 1-based, -1 when unknown
  int column() const { return column_; }

 private:
  std::string field_;
  int line_;
  int column_;
};

enum class Check {
  DeterminantConsistency,
  MartingaleM,
  Conservation,
  EntropyMc,
  EntropyOracle,
  Jensen,
  FeynmanKacVsOracle,
  FieldVsExact,
  FlowRoundtrip,
};

std::string to_string(Check check);
std::optional<Check> check_from_string(std::string_view name);
std::vector<std::string> check_names();

/// True for checks whose verdict is a Monte Carlo statistic.
bool is_statistical(Check check);

struct ScenarioConfig {
  std::string name;
  std::string description;
  int dimension = 0;
  double nu = 0.0;
  std::vector<std::vector<std::string>> sigma;
  std::vector<std::string> U;
  std::string V;
  std::string f0;
  std::string rho0;
  std::vector<std::string> h0;
  std::string phi_terminal;
  std::optional<std::string> f_exact;
  std::vector<std::string> H;
  Box box;
  std::array<int, kMaxDim> label_resolution{1, 1, 1};
  double T = 0.0;
  double dt = 0.0;
  std::vector<double> output_times;
  std::size_t realizations = 0;
  std::uint64_t seed = 0;
  double oracle_dx = 0.0;
  std::optional<double> oracle_dt;
  std::optional<Box> query_box;
  std::optional<std::array<int, kMaxDim>> query_resolution;
  std::vector<Vec> martingale_labels;
  double entropy_slack = 1e-8;
  std::vector<Check> checks;

  /// Key-sorted compact JSON of the parsed document and its FNV-1a hash.
  std::string canonical;
  std::uint64_t hash = 0;

  bool has_check(Check c) const;
  std::size_t steps() const;
};

ScenarioConfig parse_scenario(std::string_view text, const std::string& origin = "<config>");
ScenarioConfig load_scenario(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_hex(std::uint64_t hash);

/// Directory of bundled scenarios: STOCHLAG_SCENARIOS if set, otherwise the
/// directory compiled in at build time.
std::filesystem::path scenario_directory();

/// A config path as given, or the bundled scenario of that name.
std::filesystem::path resolve_scenario(const std::string& name_or_path);

struct ScenarioEntry {
  std::string name;
  std::filesystem::path path;
  std::string description;
};
std::vector<ScenarioEntry> list_scenarios(const std::filesystem::path& directory);

}  // namespace stochlag

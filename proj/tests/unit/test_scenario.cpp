#include "stochlag/runner.hpp"
#include "stochlag/scenario.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using namespace stochlag;

namespace {

const char* kMinimal = R"yaml(name: tiny
dimension: 1
nu: 0.1
sigma: [["1"]]
U: ["0"]
V: "0"
f0: "exp(-x1^2)"
rho0: "exp(-x1^2/4)"
h0: ["exp(-x1^2)"]
phi_terminal: "1"
H: [r2]
box: {lower: [-3], upper: [3]}
label_resolution: 61
T: 0.1
dt: 0.01
output_times: [0, 0.05, 0.1]
realizations: 100
seed: 9
oracle_dx: 0.05
checks: [jensen, flow_roundtrip]
)yaml";

std::string without_line(const std::string& text, const std::string& prefix) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) != 0) out += line + "\n";
  }
  return out;
}

std::string replace_line(const std::string& text, const std::string& prefix, const std::string& replacement) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) out += (line.rfind(prefix, 0) == 0 ? replacement : line) + "\n";
  return out;
}

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("stochlag_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(STOCHLAG_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Scenario, MinimalConfigParses) {
  const auto c = parse_scenario(kMinimal);
  EXPECT_EQ(c.name, "tiny");
  EXPECT_EQ(c.dimension, 1);
  EXPECT_DOUBLE_EQ(c.nu, 0.1);
  EXPECT_EQ(c.steps(), 10u);
  EXPECT_EQ(c.label_resolution[0], 61);
  EXPECT_TRUE(c.has_check(Check::Jensen));
  EXPECT_FALSE(c.has_check(Check::Conservation));
}

TEST(Scenario, MissingRequiredKeyNamesTheField) {
  try {
    parse_scenario(without_line(kMinimal, "nu:"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "nu");
    EXPECT_NE(std::string(e.what()).find("nu"), std::string::npos);
  }
}

TEST(Scenario, UnknownKeyCarriesItsLine) {
  try {
    parse_scenario(std::string(kMinimal) + "viscosity: 2\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "viscosity");
    EXPECT_EQ(e.line(), 21);
  }
}

TEST(Scenario, RejectsInconsistentTimes) {
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "dt:", "dt: 0.03")), ConfigError);
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "output_times:", "output_times: [0, 0.055]")), ConfigError);
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "output_times:", "output_times: [0.1, 0.05]")), ConfigError);
}

TEST(Scenario, RejectsBadExpressionsAndChecks) {
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "f0:", "f0: \"exp(-x2^2)\"")), ConfigError);
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "f0:", "f0: \"exp(-x1^2\"")), ConfigError);
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "checks:", "checks: [entropy_magic]")), ConfigError);
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "H:", "H: [r3]")), ConfigError);
}

TEST(Scenario, StatisticalChecksNeedEnoughRealizations) {
  auto text = replace_line(kMinimal, "realizations:", "realizations: 50");
  EXPECT_NO_THROW(parse_scenario(text));  // jensen and flow_roundtrip only
  text = replace_line(text, "checks:", "checks: [martingale_M]");
  EXPECT_THROW(parse_scenario(text), ConfigError);
}

TEST(Scenario, FieldVsExactNeedsExactField) {
  EXPECT_THROW(parse_scenario(replace_line(kMinimal, "checks:", "checks: [field_vs_exact]")), ConfigError);
}

TEST(Scenario, HashIgnoresLayoutButNotValues) {
  const auto a = parse_scenario(kMinimal);
  const auto b = parse_scenario("# comment\n" + replace_line(kMinimal, "nu:", "nu:    0.1   # viscosity"));
  const auto c = parse_scenario(replace_line(kMinimal, "nu:", "nu: 0.2"));
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_NE(a.hash, c.hash);
  EXPECT_EQ(hash_hex(a.hash).size(), 16u);
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Scenario, BundledScenariosLoad) {
  const auto entries = list_scenarios(scenario_directory());
  ASSERT_GE(entries.size(), 5u);
  for (const auto& e : entries) {
    const auto c = load_scenario(e.path);
    EXPECT_EQ(c.name, e.name);
    EXPECT_NO_THROW(Scenario::build(c)) << e.name;
  }
  EXPECT_EQ(resolve_scenario("heat_identity").filename(), "heat_identity.yaml");
  EXPECT_THROW(resolve_scenario("no_such_scenario"), ConfigError);
}

TEST(Runner, FittedOrderRecoversSlope) {
  const std::vector<double> dt = {4e-3, 2e-3, 1e-3};
  const std::vector<double> err = {3.0 * std::sqrt(4e-3), 3.0 * std::sqrt(2e-3), 3.0 * std::sqrt(1e-3)};
  EXPECT_NEAR(fitted_order(dt, err), 0.5, 1e-12);
}

TEST(Runner, NumberFormatRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0}) EXPECT_EQ(std::stod(format_number(x)), x);
  EXPECT_EQ(format_number(std::nan("")), "nan");
}

TEST(Runner, ConvergenceStudyNeedsTwoLevels) {
  const auto c = parse_scenario(kMinimal);
  EXPECT_THROW(convergence_study(c, 1, 10, 1), PreconditionError);
}

TEST(Runner, RunWritesReportAndThreadIndependentCsv) {
  const auto c = parse_scenario(kMinimal);
  const auto a = temp_dir("run1"), b = temp_dir("run2");
  RunOptions options;
  options.out_dir = a;
  options.threads = 1;
  const auto r1 = run_scenario(c, options);
  options.out_dir = b;
  options.threads = 3;
  const auto r2 = run_scenario(c, options);
  EXPECT_TRUE(r1.all_passed());
  EXPECT_EQ(r1.exit_code(), 0);
  ASSERT_TRUE(fs::exists(a / "report.json"));
  for (const auto* name : {"flow_roundtrip.csv"}) {
    ASSERT_TRUE(fs::exists(a / name));
    EXPECT_EQ(slurp(a / name), slurp(b / name));
  }
  const auto json = nlohmann::json::parse(slurp(a / "report.json"));
  EXPECT_EQ(json["scenario"], "tiny");
  EXPECT_EQ(json["checks"].size(), 2u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, ExitCodes) {
  const auto dir = temp_dir("cli");
  {
    std::ofstream(dir / "bad.yaml") << without_line(kMinimal, "nu:");
    std::ofstream(dir / "good.yaml") << kMinimal;
  }
  EXPECT_EQ(cli("run " + (dir / "bad.yaml").string() + " --out " + (dir / "o1").string()), 2);
  EXPECT_EQ(cli("run " + (dir / "good.yaml").string() + " --out " + (dir / "o2").string() + " --threads 2"), 0);
  EXPECT_TRUE(fs::exists(dir / "o2" / "report.json"));
  EXPECT_EQ(cli("converge " + (dir / "good.yaml").string() + " --levels 1"), 2);
  EXPECT_EQ(cli("converge " + (dir / "good.yaml").string() + " --levels 2 --realizations 4"), 0);
  EXPECT_EQ(cli("list-scenarios"), 0);
  EXPECT_EQ(cli("frobnicate"), 2);
  fs::remove_all(dir);
}

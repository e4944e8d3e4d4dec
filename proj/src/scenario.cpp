#include "stochlag/scenario.hpp"

#include "stochlag/field_expr.hpp"
#include "stochlag/pde_oracle.hpp"

#include "json.hpp"
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#ifndef STOCHLAG_SCENARIO_DIR
#define STOCHLAG_SCENARIO_DIR "scenarios"
#endif

namespace stochlag {

namespace {

std::string format_config_error(const std::string& field, const std::string& message, int line, int column) {
  std::ostringstream os;
  if (line > 0) os << "line " << line << ", column " << column << ": ";
  if (!field.empty()) os << "field '" << field << "': ";
  os << message;
  return os.str();
}

struct CheckName {
  Check check;
  const char* name;
  bool statistical;
};

constexpr CheckName kChecks[] = {
    {Check::DeterminantConsistency, "determinant_consistency", false},
    {Check::MartingaleM, "martingale_M", true},
    {Check::Conservation, "conservation", true},
    {Check::EntropyMc, "entropy_mc", true},
    {Check::EntropyOracle, "entropy_oracle", false},
    {Check::Jensen, "jensen", false},
    {Check::FeynmanKacVsOracle, "feynman_kac_vs_oracle", true},
    {Check::FieldVsExact, "field_vs_exact", true},
    {Check::FlowRoundtrip, "flow_roundtrip", false},
};

const std::set<std::string> kKnownKeys = {
    "name",          "description", "dimension", "nu",       "sigma",           "U",
    "V",             "f0",          "rho0",      "h0",       "phi_terminal",    "f_exact",
    "H",             "box",         "label_resolution",      "T",               "dt",
    "output_times",  "realizations", "seed",     "oracle_dx", "oracle_dt",      "query_box",
    "query_resolution", "martingale_labels",     "entropy_slack", "checks",
};

nlohmann::json to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      nlohmann::json obj = nlohmann::json::object();
      for (const auto& kv : node) obj[kv.first.Scalar()] = to_json(kv.second);
      return obj;
    }
    case YAML::NodeType::Sequence: {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& item : node) arr.push_back(to_json(item));
      return arr;
    }
    case YAML::NodeType::Scalar:
      return node.Scalar();
    default:
      return nullptr;
  }
}

class Reader {
 public:
  explicit Reader(const YAML::Node& root) : root_(root) {}

  [[noreturn]] void fail(const std::string& field, const std::string& message, const YAML::Node& at) const {
    const auto mark = at.Mark();
    if (mark.is_null()) throw ConfigError(field, message);
    throw ConfigError(field, message, mark.line + 1, mark.column + 1);
  }
  [[noreturn]] void fail(const std::string& field, const std::string& message) const { fail(field, message, root_); }

  bool has(const std::string& key) const {
    const YAML::Node& root = root_;
    return static_cast<bool>(root[key]);
  }

  YAML::Node require(const std::string& key) const {
    const YAML::Node& root = root_;
    const YAML::Node node = root[key];
    if (!node) fail(key, "missing required key");
    return node;
  }

  template <typename T>
  T scalar(const YAML::Node& node, const std::string& field) const {
    if (!node.IsScalar()) fail(field, "expected a scalar", node);
    try {
      return node.as<T>();
    } catch (const YAML::Exception&) {
      fail(field, "cannot convert '" + node.Scalar() + "'", node);
    }
  }

  template <typename T>
  std::vector<T> list(const YAML::Node& node, const std::string& field) const {
    if (node.IsScalar()) return {scalar<T>(node, field)};
    if (!node.IsSequence()) fail(field, "expected a list", node);
    std::vector<T> out;
    for (std::size_t i = 0; i < node.size(); ++i) out.push_back(scalar<T>(node[i], field + "[" + std::to_string(i) + "]"));
    return out;
  }

  std::string expression(const YAML::Node& node, const std::string& field, int n) const {
    const auto src = scalar<std::string>(node, field);
    try {
      FieldExpr::parse(src, n);
    } catch (const SyntaxError& e) {
      fail(field, std::string("syntax error: ") + e.what(), node);
    } catch (const UnknownVariable& e) {
      fail(field, std::string("unknown variable: ") + e.what(), node);
    }
    return src;
  }

  std::vector<std::string> expressions(const YAML::Node& node, const std::string& field, int n) const {
    std::vector<std::string> out;
    if (node.IsScalar()) {
      out.push_back(expression(node, field, n));
      return out;
    }
    if (!node.IsSequence()) fail(field, "expected an expression or a list of expressions", node);
    for (std::size_t i = 0; i < node.size(); ++i) {
      out.push_back(expression(node[i], field + "[" + std::to_string(i) + "]", n));
    }
    return out;
  }

  Vec point(const YAML::Node& node, const std::string& field, int n) const {
    const auto values = list<double>(node, field);
    if (static_cast<int>(values.size()) != n) {
      fail(field, "expected " + std::to_string(n) + " coordinates, got " + std::to_string(values.size()), node);
    }
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = values[static_cast<std::size_t>(i)];
    return v;
  }

  Box box(const YAML::Node& node, const std::string& field, int n) const {
    if (!node.IsMap()) fail(field, "expected a mapping with 'lower' and 'upper'", node);
    for (const auto& kv : node) {
      const auto key = kv.first.Scalar();
      if (key != "lower" && key != "upper") fail(field + "." + key, "unknown key", kv.first);
    }
    if (!node["lower"]) fail(field + ".lower", "missing required key", node);
    if (!node["upper"]) fail(field + ".upper", "missing required key", node);
    Box b{point(node["lower"], field + ".lower", n), point(node["upper"], field + ".upper", n)};
    if (!(b.lower.array() < b.upper.array()).all()) fail(field, "lower must be below upper on every axis", node);
    return b;
  }

  std::array<int, kMaxDim> resolution(const YAML::Node& node, const std::string& field, int n) const {
    auto values = list<int>(node, field);
    if (values.size() == 1) values.assign(static_cast<std::size_t>(n), values.front());
    if (static_cast<int>(values.size()) != n) fail(field, "expected 1 or " + std::to_string(n) + " entries", node);
    std::array<int, kMaxDim> out{1, 1, 1};
    for (int i = 0; i < n; ++i) {
      const int v = values[static_cast<std::size_t>(i)];
      if (v < 2) fail(field, "each axis needs at least 2 nodes", node);
      out[static_cast<std::size_t>(i)] = v;
    }
    return out;
  }

 private:
  YAML::Node root_;
};

bool on_grid(double t, double dt) {
  const double k = t / dt;
  return std::abs(k - std::round(k)) <= 1e-9 * std::max(1.0, k);
}

ScenarioConfig parse_document(const YAML::Node& root) {
  Reader in(root);
  if (!root.IsMap()) in.fail("", "top level must be a mapping");
  for (const auto& kv : root) {
    const auto key = kv.first.Scalar();
    if (!kKnownKeys.count(key)) in.fail(key, "unknown key", kv.first);
  }

  ScenarioConfig c;
  if (in.has("name")) c.name = in.scalar<std::string>(root["name"], "name");
  if (in.has("description")) c.description = in.scalar<std::string>(root["description"], "description");

  c.dimension = in.scalar<int>(in.require("dimension"), "dimension");
  if (c.dimension < 1 || c.dimension > kMaxDim) in.fail("dimension", "must be 1, 2 or 3", root["dimension"]);
  const int n = c.dimension;

  c.nu = in.scalar<double>(in.require("nu"), "nu");
  if (!(c.nu > 0.0)) in.fail("nu", "must be positive", root["nu"]);

  const YAML::Node sigma = in.require("sigma");
  if (!sigma.IsSequence() || static_cast<int>(sigma.size()) != n) {
    in.fail("sigma", "expected " + std::to_string(n) + " rows", sigma);
  }
  for (int j = 0; j < n; ++j) {
    const auto row = sigma[static_cast<std::size_t>(j)];
    const std::string field = "sigma[" + std::to_string(j) + "]";
    if (!row.IsSequence() || static_cast<int>(row.size()) != n) {
      in.fail(field, "expected " + std::to_string(n) + " entries (sigma must be square)", row);
    }
    c.sigma.push_back(in.expressions(row, field, n));
  }
  c.U = in.expressions(in.require("U"), "U", n);
  if (static_cast<int>(c.U.size()) != n) in.fail("U", "expected " + std::to_string(n) + " components", root["U"]);
  c.V = in.expression(in.require("V"), "V", n);
  c.f0 = in.expression(in.require("f0"), "f0", n);
  c.rho0 = in.expression(in.require("rho0"), "rho0", n);
  c.h0 = in.expressions(in.require("h0"), "h0", n);
  c.phi_terminal = in.expression(in.require("phi_terminal"), "phi_terminal", n);
  if (in.has("f_exact")) c.f_exact = in.expression(root["f_exact"], "f_exact", n);

  c.H = in.list<std::string>(in.require("H"), "H");
  for (const auto& h : c.H) {
    try {
      ConvexH::by_name(h);
    } catch (const Error& e) {
      in.fail("H", e.what(), root["H"]);
    }
  }

  c.box = in.box(in.require("box"), "box", n);
  c.label_resolution = in.resolution(in.require("label_resolution"), "label_resolution", n);

  c.T = in.scalar<double>(in.require("T"), "T");
  if (!(c.T > 0.0)) in.fail("T", "must be positive", root["T"]);
  c.dt = in.scalar<double>(in.require("dt"), "dt");
  if (!(c.dt > 0.0)) in.fail("dt", "must be positive", root["dt"]);
  if (!on_grid(c.T, c.dt)) in.fail("dt", "T must be an integer multiple of dt", root["dt"]);

  c.output_times = in.list<double>(in.require("output_times"), "output_times");
  if (c.output_times.empty()) in.fail("output_times", "at least one output time is required", root["output_times"]);
  for (std::size_t i = 0; i < c.output_times.size(); ++i) {
    const double t = c.output_times[i];
    if (t < 0.0 || t > c.T * (1 + 1e-12)) in.fail("output_times", "times must lie in [0, T]", root["output_times"]);
    if (!on_grid(t, c.dt)) in.fail("output_times", "times must lie on the dt grid", root["output_times"]);
    if (i > 0 && !(t > c.output_times[i - 1])) in.fail("output_times", "times must increase", root["output_times"]);
  }

  const auto R = in.scalar<long long>(in.require("realizations"), "realizations");
  if (R < 1) in.fail("realizations", "must be positive", root["realizations"]);
  c.realizations = static_cast<std::size_t>(R);
  c.seed = in.scalar<std::uint64_t>(in.require("seed"), "seed");

  c.oracle_dx = in.scalar<double>(in.require("oracle_dx"), "oracle_dx");
  if (!(c.oracle_dx > 0.0)) in.fail("oracle_dx", "must be positive", root["oracle_dx"]);
  if (in.has("oracle_dt")) {
    c.oracle_dt = in.scalar<double>(root["oracle_dt"], "oracle_dt");
    if (!(*c.oracle_dt > 0.0) || !on_grid(c.T, *c.oracle_dt)) {
      in.fail("oracle_dt", "must be positive and divide T", root["oracle_dt"]);
    }
  }
  if (in.has("query_box")) c.query_box = in.box(root["query_box"], "query_box", n);
  if (in.has("query_resolution")) c.query_resolution = in.resolution(root["query_resolution"], "query_resolution", n);
  if (in.has("martingale_labels")) {
    const auto node = root["martingale_labels"];
    if (!node.IsSequence()) in.fail("martingale_labels", "expected a list of points", node);
    for (std::size_t i = 0; i < node.size(); ++i) {
      c.martingale_labels.push_back(in.point(node[i], "martingale_labels[" + std::to_string(i) + "]", n));
    }
  }
  if (in.has("entropy_slack")) {
    c.entropy_slack = in.scalar<double>(root["entropy_slack"], "entropy_slack");
    if (!(c.entropy_slack >= 0.0)) in.fail("entropy_slack", "must be non-negative", root["entropy_slack"]);
  }

  const YAML::Node checks = in.require("checks");
  for (const auto& name : in.list<std::string>(checks, "checks")) {
    const auto check = check_from_string(name);
    if (!check) in.fail("checks", "unknown check '" + name + "'", checks);
    if (!c.has_check(*check)) c.checks.push_back(*check);
  }
  const bool statistical = std::any_of(c.checks.begin(), c.checks.end(), is_statistical);
  if (statistical && c.realizations < 100) {
    in.fail("realizations", "statistical checks need at least 100 realizations", root["realizations"]);
  }
  if (c.has_check(Check::FieldVsExact) && !c.f_exact) in.fail("f_exact", "required by check field_vs_exact");
  const bool oracle = c.has_check(Check::EntropyOracle) || c.has_check(Check::FeynmanKacVsOracle);
  if (oracle && n > 2) in.fail("checks", "finite-difference oracle checks support dimensions 1 and 2", checks);

  c.canonical = to_json(root).dump();
  c.hash = fnv1a64(c.canonical);
  return c;
}

}  // namespace

ConfigError::ConfigError(std::string field, const std::string& message, int line, int column)
    : Error(format_config_error(field, message, line, column)), field_(std::move(field)), line_(line), column_(column) {}

std::string to_string(Check check) {
  for (const auto& c : kChecks) {
    if (c.check == check) return c.name;
  }
  return "unknown";
}

std::optional<Check> check_from_string(std::string_view name) {
  for (const auto& c : kChecks) {
    if (name == c.name) return c.check;
  }
  return std::nullopt;
}

std::vector<std::string> check_names() {
  std::vector<std::string> out;
  for (const auto& c : kChecks) out.emplace_back(c.name);
  return out;
}

bool is_statistical(Check check) {
  for (const auto& c : kChecks) {
    if (c.check == check) return c.statistical;
  }
  return false;
}

bool ScenarioConfig::has_check(Check c) const { return std::find(checks.begin(), checks.end(), c) != checks.end(); }

std::size_t ScenarioConfig::steps() const { return static_cast<std::size_t>(std::llround(T / dt)); }

ScenarioConfig parse_scenario(std::string_view text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", origin + ": " + e.msg, e.mark.line + 1, e.mark.column + 1);
  }
  auto config = parse_document(root);
  if (config.name.empty()) config.name = origin;
  return config;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw ConfigError("", "cannot open config file " + path.string());
  std::ostringstream text;
  text << file.rdbuf();
  auto config = parse_scenario(text.str(), path.string());
  if (config.name == path.string()) config.name = path.stem().string();
  return config;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << hash;
  return os.str();
}

std::filesystem::path scenario_directory() {
  if (const char* env = std::getenv("STOCHLAG_SCENARIOS"); env && *env) return env;
  return STOCHLAG_SCENARIO_DIR;
}

std::filesystem::path resolve_scenario(const std::string& name_or_path) {
  const std::filesystem::path direct(name_or_path);
  if (std::filesystem::exists(direct)) return direct;
  const auto bundled = scenario_directory() / (name_or_path + ".yaml");
  if (std::filesystem::exists(bundled)) return bundled;
  throw ConfigError("", "no config file or bundled scenario named '" + name_or_path + "'");
}

std::vector<ScenarioEntry> list_scenarios(const std::filesystem::path& directory) {
  std::vector<ScenarioEntry> out;
  if (!std::filesystem::is_directory(directory)) {
    throw ConfigError("", "scenario directory " + directory.string() + " does not exist");
  }
  for (const auto& entry : std::filesystem::directory_iterator(directory)) {
    if (entry.path().extension() != ".yaml") continue;
    const auto config = load_scenario(entry.path());
    out.push_back({config.name, entry.path(), config.description});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

}  // namespace stochlag

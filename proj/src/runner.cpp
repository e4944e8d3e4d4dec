#include "stochlag/runner.hpp"

#include "stochlag/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace stochlag {

namespace {

using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kMaxOracleSnapshots = 2000;
constexpr std::size_t kMaxAdjointSnapshots = 400;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Json number(double x) {
  if (std::isfinite(x)) return x;
  return format_number(x);
}

Json numbers(std::span<const double> xs) {
  Json out = Json::array();
  for (double x : xs) out.push_back(number(x));
  return out;
}

// Differences at floating-point rounding level are not evidence against the
// target, whatever the standard error (deterministic quantities have se ~ 0).
double z_score(double mean, double se, double target) {
  const double diff = mean - target;
  if (std::abs(diff) <= 1e-12 * std::max(1.0, std::abs(target))) return 0.0;
  if (se > 0.0) return diff / se;
  return std::copysign(kInf, diff);
}

std::string time_tag(double t) { return "t" + format_number(t); }

class Output {
 public:
  explicit Output(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (dir_.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir_ / "fields", ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  void table(const std::string& file, const std::vector<std::string>& header,
             const std::vector<std::vector<double>>& rows) const {
    if (dir_.empty()) return;
    std::ostringstream os;
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << '\n';
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << format_number(row[i]);
      os << '\n';
    }
    text(file, os.str());
  }

  void grid_field(const std::string& file, const GridField& f) const {
    if (dir_.empty()) return;
    std::ostringstream os;
    write_csv(f, os);
    text("fields/" + file, os.str());
  }

  void mc_field(const std::string& file, const McField& f) const {
    if (dir_.empty()) return;
    const int n = f.grid.dimension();
    std::vector<std::string> header;
    for (int d = 0; d < n; ++d) header.push_back("x" + std::to_string(d + 1));
    header.insert(header.end(), {"value", "se"});
    std::vector<std::vector<double>> rows;
    for (std::size_t q = 0; q < f.grid.size(); ++q) {
      const Vec x = f.grid.node(q);
      std::vector<double> row(x.data(), x.data() + n);
      row.push_back(f.mean[q]);
      row.push_back(f.masked[q] ? kNaN : f.se(q));
      rows.push_back(std::move(row));
    }
    table("fields/" + file, header, rows);
  }

  void text(const std::string& file, const std::string& content) const {
    if (dir_.empty()) return;
    const auto path = dir_ / file;
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw IoError("cannot write " + path.string());
  }

 private:
  std::filesystem::path dir_;
};

constexpr double kSupportTolerance = 1e-8;
// Pointwise field comparisons use nodes where the reference exceeds this
// fraction of its peak.
constexpr double kResolvableFraction = 1e-6;

Box shrink(const Box& box, double margin) {
  Box out = box;
  for (int d = 0; d < box.dimension(); ++d) {
    const double m = std::min(margin, 0.25 * (box.upper(d) - box.lower(d)));
    out.lower(d) += m;
    out.upper(d) -= m;
  }
  return out;
}

/// Excursion over [0, T] of a path started at x: `sds` diffusive standard
/// deviations plus the drift displacement.
double excursion_from(const CoefficientSet& cs, const Vec& x, double T, double sds = 4.0) {
  const auto s = cs.sample(x, 0.0);
  const double amax = Eigen::SelfAdjointEigenSolver<Mat>(s.a).eigenvalues().maxCoeff();
  return sds * std::sqrt(2.0 * cs.nu() * T * amax) + s.v.norm() * T;
}

/// Largest excursion over the label nodes.
double excursion(const CoefficientSet& cs, const UniformGrid& labels, double T, double sds = 4.0) {
  double e = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) e = std::max(e, excursion_from(cs, labels.node(i), T, sds));
  return e;
}

std::vector<double> snapshot_times(double T, double dt, std::size_t max_count, std::span<const double> required) {
  const auto steps = static_cast<std::size_t>(std::llround(T / dt));
  const std::size_t stride = std::max<std::size_t>(1, (steps + max_count - 1) / max_count);
  std::vector<std::size_t> ks;
  for (std::size_t k = 0; k <= steps; k += stride) ks.push_back(k);
  ks.push_back(steps);
  for (double t : required) ks.push_back(static_cast<std::size_t>(std::llround(t / dt)));
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::vector<double> out;
  for (auto k : ks) out.push_back(static_cast<double>(k) * dt);
  return out;
}

struct Phi {
  SpaceTimeField field;
  std::string source;
  std::vector<std::string> warnings;
};

/// phi solving the adjoint equation with phi(., T) = phi_terminal: closed form
/// c exp(V (T - t)) when V and phi_terminal are constants, otherwise the
/// interpolated Crank-Nicolson adjoint solution on the oracle grid.
Phi build_phi(const Scenario& s) {
  const auto& c = s.config;
  const auto V = FieldExpr::parse(c.V, c.dimension).constant_value();
  const auto phiT = FieldExpr::parse(c.phi_terminal, c.dimension).constant_value();
  Phi out;
  if (V && phiT) {
    const double v = *V, k = *phiT, T = c.T;
    out.field = SpaceTimeField([v, k, T](const Vec&, double t) { return k * std::exp(v * (T - t)); });
    out.source = "closed_form";
    return out;
  }
  OracleOptions options;
  options.dt = s.oracle_dt();
  options.stepper = Stepper::CrankNicolson;
  options.output_times = snapshot_times(c.T, options.dt, kMaxAdjointSnapshots, c.output_times);
  auto series = solve_adjoint(s.cs, GridField::sample(s.oracle_grid, s.phi_terminal, c.T), c.T, options);
  out.warnings = series.warnings;
  out.field = interpolate_series(series);
  out.source = "adjoint";
  return out;
}

Stepper forward_stepper(const Scenario& s) {
  return s.oracle_dt() <= explicit_dt_limit(s.cs, s.oracle_grid) ? Stepper::Explicit : Stepper::CrankNicolson;
}

RealizationTable slice(const RealizationTable& table, std::size_t offset, std::size_t width) {
  RealizationTable out;
  out.requested = table.requested;
  out.retained = table.retained;
  out.failures = table.failures;
  out.values.reserve(table.values.size());
  for (const auto& row : table.values) {
    out.values.emplace_back(row.begin() + static_cast<std::ptrdiff_t>(offset),
                            row.begin() + static_cast<std::ptrdiff_t>(offset + width));
  }
  return out;
}

Json discard_summary(const RealizationTable& table) {
  Json j;
  j["requested"] = table.requested;
  j["retained"] = table.retained.size();
  j["discarded"] = table.discarded();
  j["fraction"] = table.requested ? static_cast<double>(table.discarded()) / static_cast<double>(table.requested) : 0.0;
  j["first_failures"] = table.failures;
  return j;
}

bool too_many_discards(const RealizationTable& table, CheckResult& result) {
  const double fraction =
      table.requested ? static_cast<double>(table.discarded()) / static_cast<double>(table.requested) : 0.0;
  result.metrics["discard_fraction"] = fraction;
  if (fraction < kMaxDiscardFraction) return false;
  result.verdict = Verdict::Fail;
  std::ostringstream os;
  os << table.discarded() << " of " << table.requested << " realizations discarded (limit "
     << kMaxDiscardFraction * 100 << "%)";
  if (!table.failures.empty()) os << "; first: " << table.failures.front();
  result.message = os.str();
  return true;
}

/// Column layout of the shared label-grid pass.
struct GridLayout {
  std::size_t O = 0, Q = 0;
  std::size_t psi = 0, psi_width = 0;
  std::size_t conservation = 0, conservation_width = 0;
  std::size_t entropy = 0, entropy_width = 0;
  std::size_t roundtrip = 0, roundtrip_width = 0;
  std::size_t width = 0;
};

class Runner {
 public:
  Runner(const ScenarioConfig& config, const RunOptions& options)
      : scenario_(Scenario::build(config)), options_(options), out_(options.out_dir) {
    for (const auto& name : config.H) H_.push_back(ConvexH::by_name(name));
    report_.scenario = config.name;
    report_.config_hash = config.hash;
    report_.seed = config.seed;
    report_.realizations = config.realizations;
    report_.threads = options.threads;
  }

  RunReport run() {
    const auto start = Clock::now();
    const auto& c = scenario_.config;
    std::vector<Check> order = c.checks;
    std::sort(order.begin(), order.end());

    const bool grid_pass = std::any_of(order.begin(), order.end(), [](Check k) {
      return k == Check::Conservation || k == Check::EntropyMc || k == Check::Jensen ||
             k == Check::FeynmanKacVsOracle || k == Check::FieldVsExact || k == Check::FlowRoundtrip;
    });
    if (grid_pass) run_grid_pass();

    for (Check check : order) {
      CheckResult result;
      result.name = to_string(check);
      const auto t0 = Clock::now();
      try {
        dispatch(check, result);
      } catch (const ConfigError&) {
        throw;
      } catch (const IoError&) {
        throw;
      } catch (const Error& e) {
        result.verdict = Verdict::Fail;
        result.message = e.what();
      }
      result.seconds = seconds_since(t0);
      report_.checks.push_back(std::move(result));
      report_.seconds = seconds_since(start);
      flush();
    }
    report_.seconds = seconds_since(start);
    flush();
    return report_;
  }

 private:
  void flush() { out_.text("report.json", report_.to_json().dump(2) + "\n"); }

  const Phi& phi() {
    if (!phi_) {
      phi_ = build_phi(scenario_);
      for (const auto& w : phi_->warnings) report_.warnings.push_back(w);
    }
    return *phi_;
  }

  void dispatch(Check check, CheckResult& result) {
    switch (check) {
      case Check::DeterminantConsistency:
        return determinant_consistency(result);
      case Check::MartingaleM:
        return martingale_M(result);
      case Check::Conservation:
        return conservation(result);
      case Check::EntropyMc:
        return entropy_mc(result);
      case Check::EntropyOracle:
        return entropy_oracle(result);
      case Check::Jensen:
        return jensen(result);
      case Check::FeynmanKacVsOracle:
        return feynman_kac_vs_oracle(result);
      case Check::FieldVsExact:
        return field_vs_exact(result);
      case Check::FlowRoundtrip:
        return flow_roundtrip(result);
    }
  }

  std::vector<std::vector<double>> rho0h0_nodal() const {
    std::vector<std::vector<double>> out;
    const auto nodes = scenario_.labels.nodes();
    for (const auto& h : scenario_.h0) {
      std::vector<double> v(nodes.size());
      for (std::size_t i = 0; i < nodes.size(); ++i) v[i] = scenario_.rho0(nodes[i], 0.0) * h(nodes[i], 0.0);
      out.push_back(std::move(v));
    }
    return out;
  }

  void run_grid_pass() {
    const auto& c = scenario_.config;
    const auto t0 = Clock::now();
    const bool psi = c.has_check(Check::EntropyMc) || c.has_check(Check::Jensen) ||
                     c.has_check(Check::FeynmanKacVsOracle) || c.has_check(Check::FieldVsExact);
    GridLayout& L = layout_;
    L.O = c.output_times.size();
    L.Q = scenario_.query.size();
    std::size_t at = 0;
    auto block = [&](bool on, std::size_t width, std::size_t& offset, std::size_t& w) {
      offset = at;
      w = on ? width : 0;
      at += w;
    };
    block(psi, 2 * L.O * L.Q, L.psi, L.psi_width);
    block(c.has_check(Check::Conservation), scenario_.h0.size() * L.O, L.conservation, L.conservation_width);
    block(c.has_check(Check::EntropyMc), H_.size() * L.O, L.entropy, L.entropy_width);
    block(c.has_check(Check::FlowRoundtrip), 3 * L.O, L.roundtrip, L.roundtrip_width);
    L.width = at;

    const auto plan = scenario_.plan();
    const auto query_nodes = scenario_.query.nodes();
    const auto label_nodes = scenario_.labels.nodes();
    const auto rho0h0 = rho0h0_nodal();
    const bool needs_phi = L.conservation_width + L.entropy_width > 0;
    const SpaceTimeField phi_field = needs_phi ? phi().field : SpaceTimeField();
    const auto& s = scenario_;

    grid_ = collect_realizations(plan, c.realizations, options_.threads, [&](const Ensemble& ens, std::uint64_t r) {
      std::vector<double> row(L.width, kNaN);
      const bool roundtrip = L.roundtrip_width > 0 && r < kRoundtripRealizations;
      for (std::size_t o = 0; o < L.O; ++o) {
        for (std::size_t i = 0; i < s.h0.size() && L.conservation_width; ++i) {
          row[L.conservation + i * L.O + o] = conserved_quantity(ens, s.labels, phi_field, rho0h0[i], o);
        }
        if (!L.psi_width && !L.entropy_width && !roundtrip) continue;
        const auto chart = FlowChart::from_ensemble(s.labels, ens, o);
        if (L.psi_width) {
          psi_at(chart, s.f0, s.rho0, query_nodes, std::span(row).subspan(L.psi + o * L.Q, L.Q),
                 std::span(row).subspan(L.psi + (L.O + o) * L.Q, L.Q));
        }
        for (std::size_t h = 0; h < H_.size() && L.entropy_width; ++h) {
          try {
            row[L.entropy + h * L.O + o] = entropy_martingale(chart, phi_field, s.rho0, s.f0, H_[h], s.query);
          } catch (const OutOfChart&) {
          } catch (const NoConvergence&) {
          }
        }
        if (roundtrip) {
          double label_err = 0.0, image_err = 0.0;
          for (std::size_t a = 0; a < label_nodes.size(); ++a) {
            if (!s.labels.is_interior(a)) continue;
            try {
              label_err = std::max(label_err, (chart.invert(ens.at(o, a).X) - label_nodes[a]).norm());
            } catch (const Error&) {
              label_err = kInf;
            }
          }
          for (const auto& x : query_nodes) {
            try {
              image_err = std::max(image_err, (chart.map(chart.invert(x)) - x).norm() / (1.0 + x.norm()));
            } catch (const OutOfChart&) {
            } catch (const NoConvergence&) {
              image_err = kInf;
            }
          }
          row[L.roundtrip + 3 * o] = label_err;
          row[L.roundtrip + 3 * o + 1] = image_err;
          row[L.roundtrip + 3 * o + 2] = chart.max_deformation();
        }
      }
      return row;
    });
    report_.discards = discard_summary(grid_);
    report_.discards["simulation_seconds"] = seconds_since(t0);

    if (L.psi_width) {
      psi_.query = scenario_.query;
      psi_.times = c.output_times;
      psi_.table = slice(grid_, L.psi, L.psi_width);
    }
  }

  void determinant_consistency(CheckResult& result) {
    const auto& c = scenario_.config;
    const std::size_t R = std::min(c.realizations, kRefinementRealizations);
    const auto table = convergence_study(c, 3, R, options_.threads);
    std::vector<std::vector<double>> rows;
    Json dts = Json::array(), sde = Json::array(), lam = Json::array();
    for (const auto& row : table.rows) {
      rows.push_back({row.dt, row.rms_sde, row.rms_lambda});
      dts.push_back(row.dt);
      sde.push_back(number(row.rms_sde));
      lam.push_back(number(row.rms_lambda));
    }
    out_.table("determinant_consistency.csv", {"dt", "rms_sde", "rms_lambda"}, rows);

    auto ratios_ok = [&](auto member, Json& ratios) {
      bool ok = true;
      for (std::size_t l = 0; l + 1 < table.rows.size(); ++l) {
        const double ratio = table.rows[l].*member / table.rows[l + 1].*member;
        ratios.push_back(number(ratio));
        ok = ok && ratio >= 1.2 && ratio <= 2.8;
      }
      return ok;
    };
    Json sde_ratios = Json::array(), lambda_ratios = Json::array();
    const bool sde_ratio_ok = ratios_ok(&ConvergenceRow::rms_sde, sde_ratios);
    const bool lambda_ratio_ok = ratios_ok(&ConvergenceRow::rms_lambda, lambda_ratios) && table.order_lambda >= 0.4;
    const bool lambda_ok = table.lambda_rounding_level || lambda_ratio_ok;
    const bool sde_ok = table.sde_rounding_level || sde_ratio_ok;

    auto& m = result.metrics;
    m["realizations"] = table.realizations;
    m["discarded"] = table.discarded;
    m["labels"] = table.labels;
    m["dt"] = dts;
    m["rms_sde"] = sde;
    m["rms_lambda"] = lam;
    m["ratios_sde"] = sde_ratios;
    m["ratios_lambda"] = lambda_ratios;
    m["order_sde"] = number(table.order_sde);
    m["order_lambda"] = number(table.order_lambda);
    m["sde_rounding_level"] = table.sde_rounding_level;
    m["lambda_rounding_level"] = table.lambda_rounding_level;
    result.verdict = sde_ok && lambda_ok ? Verdict::Pass : Verdict::Fail;
    if (!lambda_ok) result.message = "D_direct vs exp(log_lambda) does not converge at the expected rate";
    if (!sde_ok) result.message = "D_direct vs D_sde does not converge at the expected rate";
  }

  void martingale_M(CheckResult& result) {
    const auto& c = scenario_.config;
    auto plan = scenario_.plan();
    plan.label_points = scenario_.martingale_labels;
    const auto& phi_field = phi().field;
    const std::size_t O = c.output_times.size();
    const std::size_t Lm = plan.label_points.size();
    const auto table = collect_realizations(plan, c.realizations, options_.threads, [&](const Ensemble& ens, std::uint64_t) {
      std::vector<double> row(Lm * O);
      for (std::size_t l = 0; l < Lm; ++l) {
        for (std::size_t o = 0; o < O; ++o) row[l * O + o] = stochlag::martingale_M(ens, phi_field, l, o);
      }
      return row;
    });
    result.metrics["phi_source"] = phi().source;
    if (too_many_discards(table, result)) return;
    const auto stats = column_statistics(table);
    double max_z = 0.0;
    std::size_t variance_drops = 0;
    Json labels = Json::array();
    for (std::size_t l = 0; l < Lm; ++l) {
      const Vec& a = plan.label_points[l];
      const double target = phi_field(a, 0.0);
      std::vector<std::vector<double>> rows;
      Json zs = Json::array();
      for (std::size_t o = 0; o < O; ++o) {
        const auto& st = stats[l * O + o];
        const double z = z_score(st.mean, st.se, target);
        rows.push_back({c.output_times[o], st.mean, st.se});
        zs.push_back(number(z));
        if (c.output_times[o] > 0.0) max_z = std::max(max_z, std::abs(z));
        if (o > 0) {
          // Var(M) = se^2 n; its standard error is about Var sqrt(2 / (n - 1)).
          auto var = [](const MeanSe& s) { return s.se * s.se * static_cast<double>(s.count); };
          auto var_se = [&](const MeanSe& s) { return var(s) * std::sqrt(2.0 / static_cast<double>(s.count - 1)); };
          const auto& prev = stats[l * O + o - 1];
          if (var(st) < var(prev) - 4.0 * std::hypot(var_se(st), var_se(prev))) ++variance_drops;
        }
      }
      out_.table("martingale_M_label" + std::to_string(l) + ".csv", {"t", "value", "se"}, rows);
      Json entry;
      entry["label"] = numbers(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
      entry["phi_a0"] = target;
      entry["z"] = zs;
      labels.push_back(entry);
    }
    result.metrics["labels"] = labels;
    result.metrics["max_abs_z"] = number(max_z);
    result.metrics["variance_drops"] = variance_drops;
    const bool ok = max_z <= 4.0 && variance_drops == 0;
    result.verdict = ok ? Verdict::Pass : Verdict::Fail;
    if (max_z > 4.0) result.message = "mean of M departs from phi(a, 0) by more than 4 SE";
    else if (variance_drops) result.message = "Var(M) decreases beyond 4 SE";
  }

  void conservation(CheckResult& result) {
    const auto& c = scenario_.config;
    if (too_many_discards(grid_, result)) return;
    const auto rho0h0 = rho0h0_nodal();
    const auto& phi_field = phi().field;
    const auto stats = column_statistics(slice(grid_, layout_.conservation, layout_.conservation_width));
    const std::size_t O = layout_.O;
    double max_z = 0.0;
    std::size_t above_two = 0, tested = 0;
    Json entries = Json::array();
    for (std::size_t i = 0; i < rho0h0.size(); ++i) {
      validate_support(scenario_.labels, rho0h0[i], 4, "rho0*h0[" + std::to_string(i) + "]");
      double E0 = 0.0;
      for (std::size_t a = 0; a < scenario_.labels.size(); ++a) {
        E0 += scenario_.labels.trapezoid_weight(a) * phi_field(scenario_.labels.node(a), 0.0) * rho0h0[i][a];
      }
      std::vector<std::vector<double>> rows;
      Json zs = Json::array();
      for (std::size_t o = 0; o < O; ++o) {
        const auto& st = stats[i * O + o];
        const double z = z_score(st.mean, st.se, E0);
        rows.push_back({c.output_times[o], st.mean, st.se});
        zs.push_back(number(z));
        if (c.output_times[o] > 0.0) {
          max_z = std::max(max_z, std::abs(z));
          ++tested;
          if (std::abs(z) > 2.0) ++above_two;
        }
      }
      out_.table("conservation_h" + std::to_string(i) + ".csv", {"t", "value", "se"}, rows);
      Json entry;
      entry["h0"] = c.h0[i];
      entry["E0"] = E0;
      entry["z"] = zs;
      entries.push_back(entry);
    }
    result.metrics["phi_source"] = phi().source;
    result.metrics["h0"] = entries;
    result.metrics["max_abs_z"] = number(max_z);
    result.metrics["fraction_above_2"] = tested ? static_cast<double>(above_two) / static_cast<double>(tested) : 0.0;
    result.verdict = max_z <= 4.0 ? Verdict::Pass : Verdict::Fail;
    if (max_z > 4.0) result.message = "mean of E(t) departs from E(0) by more than 4 SE";
  }

  // The quadrature of the entropy martingale covers only the query box, so it
  // is conserved only if rho0 H(f0/rho0) vanishes on every label whose path
  // can reach the box boundary. Returns max |integrand| over such labels
  // relative to its peak.
  double martingale_support_escape(const ConvexH& H) const {
    const Box q = scenario_.query.box();
    double peak = 0.0, outside = 0.0;
    for (std::size_t a = 0; a < scenario_.labels.size(); ++a) {
      const Vec x = scenario_.labels.node(a);
      const double r0 = scenario_.rho0(x, 0.0);
      const double g = std::abs(r0 * H(scenario_.f0(x, 0.0) / r0));
      peak = std::max(peak, g);
      const double clearance = std::min((x - q.lower).minCoeff(), (q.upper - x).minCoeff());
      if (clearance < excursion_from(scenario_.cs, x, scenario_.config.T)) outside = std::max(outside, g);
    }
    return peak > 0.0 ? outside / peak : 0.0;
  }

  void entropy_mc(CheckResult& result) {
    const auto& c = scenario_.config;
    if (too_many_discards(grid_, result)) return;
    const auto& phi_field = phi().field;
    const auto stats = column_statistics(slice(grid_, layout_.entropy, layout_.entropy_width));
    const auto nodes = scenario_.query.nodes();
    const std::size_t O = layout_.O;
    bool ok = true;
    Json entries = Json::array();
    for (std::size_t h = 0; h < H_.size(); ++h) {
      const auto& H = H_[h];
      BootstrapOptions boot;
      boot.seed = c.seed;
      const auto decay = entropy_decay_check(psi_, phi_field, H, boot);

      const double escape = martingale_support_escape(H);
      if (escape > kSupportTolerance) {
        ok = false;
        result.message = "rho0*H(f0/rho0) does not vanish where paths can leave the query box for H = " + H.name;
      }

      double G0 = 0.0;
      for (std::size_t q = 0; q < nodes.size(); ++q) {
        const double r0 = scenario_.rho0(nodes[q], 0.0);
        G0 += scenario_.query.trapezoid_weight(q) * r0 * H(scenario_.f0(nodes[q], 0.0) / r0) * phi_field(nodes[q], 0.0);
      }
      std::vector<std::vector<double>> series, bands, martingale;
      double max_z = 0.0;
      for (std::size_t o = 0; o < O; ++o) {
        const double t = c.output_times[o];
        series.push_back({t, decay.values[o], (decay.upper[o] - decay.lower[o]) / (2 * 1.959963984540054)});
        bands.push_back({t, decay.lower[o], decay.upper[o]});
        const auto& st = stats[h * O + o];
        martingale.push_back({t, st.mean, st.se});
        if (t > 0.0) max_z = std::max(max_z, std::abs(z_score(st.mean, st.se, G0)));
      }
      out_.table("entropy_mc_" + H.name + ".csv", {"t", "value", "se"}, series);
      out_.table("entropy_mc_" + H.name + "_bands.csv", {"t", "lower", "upper"}, bands);
      out_.table("entropy_martingale_" + H.name + ".csv", {"t", "value", "se"}, martingale);

      Json entry;
      entry["H"] = H.name;
      entry["values"] = numbers(decay.values);
      entry["lower"] = numbers(decay.lower);
      entry["upper"] = numbers(decay.upper);
      entry["increment_upper"] = numbers(decay.increment_upper);
      entry["positive_increments"] = decay.positive_increments;
      entry["excluded_nodes"] = decay.excluded_nodes;
      entry["nonincreasing"] = decay.nonincreasing;
      entry["martingale_support_escape"] = number(escape);
      entry["martingale_G0"] = G0;
      entry["martingale_max_abs_z"] = number(max_z);
      entries.push_back(entry);
      if (escape > kSupportTolerance) continue;
      ok = ok && decay.nonincreasing && max_z <= 4.0;
      if (!decay.nonincreasing) result.message = "MC entropy increases beyond its bootstrap band for H = " + H.name;
      else if (max_z > 4.0) result.message = "entropy martingale mean departs from its initial value for H = " + H.name;
    }
    result.metrics["H"] = entries;
    result.verdict = ok ? Verdict::Pass : Verdict::Fail;
  }

  struct OracleRun {
    OracleSeries f, rho, phi;
    Stepper stepper;
  };

  const OracleRun& oracle() {
    if (oracle_) return *oracle_;
    const auto& c = scenario_.config;
    const auto& s = scenario_;
    OracleOptions options;
    options.dt = s.oracle_dt();
    options.stepper = forward_stepper(s);
    options.output_times = snapshot_times(c.T, options.dt, kMaxOracleSnapshots, c.output_times);
    OracleRun run;
    run.stepper = options.stepper;
    run.f = solve_forward(s.cs, GridField::sample(s.oracle_grid, s.f0, 0.0), c.T, options);
    run.rho = solve_forward(s.cs, GridField::sample(s.oracle_grid, s.rho0, 0.0), c.T, options);
    const auto& phi_field = phi().field;
    for (double t : options.output_times) run.phi.snapshots.push_back(GridField::sample(s.oracle_grid, phi_field, t));
    for (const auto& w : run.f.warnings) report_.warnings.push_back("forward oracle: " + w);
    oracle_ = std::move(run);
    return *oracle_;
  }

  void entropy_oracle(CheckResult& result) {
    const auto& c = scenario_.config;
    const auto& run = oracle();
    bool ok = true;
    Json entries = Json::array();
    for (const auto& H : H_) {
      const auto rep = entropy_series(run.f.snapshots, run.rho.snapshots, run.phi.snapshots, H, c.entropy_slack);
      const auto control = entropy_series(run.f.snapshots, run.rho.snapshots, run.phi.snapshots,
                                          ConvexH::negative_square(), c.entropy_slack);
      std::vector<std::vector<double>> rows;
      for (std::size_t k = 0; k < rep.times.size(); ++k) rows.push_back({rep.times[k], rep.values[k], 0.0});
      out_.table("entropy_oracle_" + H.name + ".csv", {"t", "value", "se"}, rows);
      Json entry;
      entry["H"] = H.name;
      entry["steps"] = rep.times.size() > 0 ? rep.times.size() - 1 : 0;
      entry["G_initial"] = rep.values.front();
      entry["G_final"] = rep.values.back();
      entry["max_increment"] = number(rep.max_increment);
      entry["positive_increments"] = rep.positive_increments;
      entry["nonincreasing"] = rep.nonincreasing;
      entry["negative_control_fails"] = !control.nonincreasing;
      entries.push_back(entry);
      ok = ok && rep.nonincreasing;
      if (!rep.nonincreasing) result.message = "oracle entropy increases beyond slack for H = " + H.name;
    }
    result.metrics["stepper"] = run.stepper == Stepper::Explicit ? "explicit" : "crank_nicolson";
    result.metrics["oracle_dt"] = scenario_.oracle_dt();
    result.metrics["slack"] = c.entropy_slack;
    result.metrics["phi_source"] = phi().source;
    result.metrics["H"] = entries;
    result.verdict = ok ? Verdict::Pass : Verdict::Fail;
  }

  void jensen(CheckResult& result) {
    const auto& c = scenario_.config;
    if (too_many_discards(grid_, result)) return;
    const std::size_t K = psi_.table.retained.size();
    std::size_t checked = 0, violations = 0, skipped = 0;
    double worst = -kInf;
    std::vector<double> f(K), r(K);
    for (const auto& H : H_) {
      for (std::size_t o = 0; o < layout_.O; ++o) {
        if (c.output_times[o] == 0.0) continue;
        for (std::size_t q = 0; q < layout_.Q; ++q) {
          std::size_t m = 0;
          for (std::size_t k = 0; k < K; ++k) {
            const double xf = psi_.psi_f(k, o, q), xr = psi_.psi_rho(k, o, q);
            if (!std::isfinite(xf) || !std::isfinite(xr)) continue;
            f[m] = xf;
            r[m] = xr;
            ++m;
          }
          if (m < 2) {
            ++skipped;
            continue;
          }
          try {
            const auto v = jensen_check(std::span(r).first(m), std::span(f).first(m), H);
            ++checked;
            if (!v.holds) ++violations;
            worst = std::max(worst, v.lhs - v.rhs);
          } catch (const NonPositiveDensity&) {
            ++skipped;
          }
        }
      }
    }
    result.metrics["checked"] = checked;
    result.metrics["skipped"] = skipped;
    result.metrics["violations"] = violations;
    result.metrics["max_lhs_minus_rhs"] = number(worst);
    result.verdict = violations == 0 && checked > 0 ? Verdict::Pass : Verdict::Fail;
    if (violations) result.message = std::to_string(violations) + " Jensen violations";
    else if (!checked) result.message = "no usable sample sets";
  }

  void feynman_kac_vs_oracle(CheckResult& result) {
    const auto& c = scenario_.config;
    if (too_many_discards(grid_, result)) return;
    const auto& run = oracle();
    double dx = 0.0;
    for (int d = 0; d < c.dimension; ++d) {
      dx = std::max({dx, scenario_.oracle_grid.spacing(d), scenario_.labels.spacing(d)});
    }
    const double allowance = kFeynmanKacConstant * (c.dt + dx * dx);
    const auto nodes = scenario_.query.nodes();
    std::vector<std::vector<double>> rows;
    Json dist = Json::array(), ses = Json::array();
    bool ok = true;
    std::size_t masked = 0;
    for (std::size_t o = 0; o < layout_.O; ++o) {
      const double t = c.output_times[o];
      const auto est = estimate_fields(psi_, o);
      const auto& fd = run.f.at_time(t);
      out_.mc_field("f_hat_" + time_tag(t) + ".csv", est.f);
      out_.mc_field("rho_hat_" + time_tag(t) + ".csv", est.rho);
      out_.grid_field("oracle_f_" + time_tag(t) + ".csv", fd);
      double d2 = 0.0, se2 = 0.0;
      for (std::size_t q = 0; q < nodes.size(); ++q) {
        if (est.f.masked[q]) continue;
        const double w = scenario_.query.trapezoid_weight(q);
        d2 += w * std::pow(est.f.mean[q] - fd.at(nodes[q]), 2);
        se2 += w * est.f.variance[q] / static_cast<double>(est.f.count);
      }
      masked = std::max(masked, est.f.masked_count());
      const double d = std::sqrt(d2), se = std::sqrt(se2);
      rows.push_back({t, d, se});
      dist.push_back(d);
      ses.push_back(se);
      if (t > 0.0 && d > std::max(4.0 * se, allowance)) ok = false;
    }
    out_.table("feynman_kac_vs_oracle.csv", {"t", "value", "se"}, rows);
    result.metrics["distance"] = dist;
    result.metrics["se"] = ses;
    result.metrics["allowance"] = allowance;
    result.metrics["C"] = kFeynmanKacConstant;
    result.metrics["masked_points"] = masked;
    result.verdict = ok ? Verdict::Pass : Verdict::Fail;
    if (!ok) result.message = "masked L2 distance to the oracle exceeds max(4 SE, C (dt + dx^2))";
  }

  void field_vs_exact(CheckResult& result) {
    const auto& c = scenario_.config;
    if (too_many_discards(grid_, result)) return;
    const auto nodes = scenario_.query.nodes();
    std::vector<std::vector<double>> rows;
    Json fractions = Json::array();
    bool ok = true;
    std::size_t tails = 0;
    for (std::size_t o = 0; o < layout_.O; ++o) {
      const double t = c.output_times[o];
      const auto est = estimate_fields(psi_, o);
      out_.mc_field("f_hat_" + time_tag(t) + ".csv", est.f);
      std::vector<double> exact(nodes.size());
      for (std::size_t q = 0; q < nodes.size(); ++q) exact[q] = (*scenario_.f_exact)(nodes[q], t);
      const double peak = *std::max_element(exact.begin(), exact.end(), [](double a, double b) {
        return std::abs(a) < std::abs(b);
      });
      std::size_t within = 0, used = 0;
      double max_z = 0.0;
      for (std::size_t q = 0; q < nodes.size(); ++q) {
        if (est.f.masked[q]) continue;
        // Deep tails are rare-event estimates whose sample SE is unreliable.
        if (std::abs(exact[q]) < kResolvableFraction * std::abs(peak)) {
          ++tails;
          continue;
        }
        ++used;
        const double z = z_score(est.f.mean[q], est.f.se(q), exact[q]);
        max_z = std::max(max_z, std::abs(z));
        if (std::abs(z) <= 4.0) ++within;
      }
      const double fraction = used ? static_cast<double>(within) / static_cast<double>(used) : 0.0;
      rows.push_back({t, fraction, max_z});
      fractions.push_back(fraction);
      if (t > 0.0 && fraction < 0.95) ok = false;
    }
    out_.table("field_vs_exact.csv", {"t", "fraction_within_4se", "max_abs_z"}, rows);
    result.metrics["fraction_within_4se"] = fractions;
    result.metrics["tail_nodes_skipped"] = tails;
    result.verdict = ok ? Verdict::Pass : Verdict::Fail;
    if (!ok) result.message = "fewer than 95% of query points within 4 SE of the exact field";
  }

  void flow_roundtrip(CheckResult& result) {
    const auto& c = scenario_.config;
    std::vector<std::vector<double>> rows;
    double max_label = 0.0, max_image = 0.0, max_def = 0.0;
    std::size_t used = 0;
    for (std::size_t o = 0; o < layout_.O; ++o) {
      double label = 0.0, image = 0.0, def = 0.0;
      for (std::size_t k = 0; k < grid_.retained.size(); ++k) {
        if (grid_.retained[k] >= kRoundtripRealizations) break;
        const auto* v = &grid_.values[k][layout_.roundtrip + 3 * o];
        label = std::max(label, v[0]);
        image = std::max(image, v[1]);
        def = std::max(def, v[2]);
        if (o == 0) ++used;
      }
      rows.push_back({c.output_times[o], label, image, def});
      max_label = std::max(max_label, label);
      max_image = std::max(max_image, image);
      max_def = std::max(max_def, def);
    }
    out_.table("flow_roundtrip.csv", {"t", "max_label_error", "max_image_error", "max_deformation"}, rows);
    result.metrics["realizations"] = used;
    result.metrics["max_label_error"] = number(max_label);
    result.metrics["max_image_error"] = number(max_image);
    result.metrics["max_deformation"] = number(max_def);
    result.metrics["under_resolved"] = max_def > FlowChart::kMaxDeformation;
    const bool ok = used > 0 && max_label <= 1e-6 && max_image <= 1e-8;
    result.verdict = ok ? Verdict::Pass : Verdict::Fail;
    if (!used) result.message = "no retained realization among the round-trip sample";
    else if (!ok) result.message = "back-to-labels map fails its defining relations";
    if (max_def > FlowChart::kMaxDeformation) {
      report_.warnings.push_back("label grid under-resolved: max cell deformation " + format_number(max_def));
    }
  }

  Scenario scenario_;
  RunOptions options_;
  Output out_;
  std::vector<ConvexH> H_;
  RunReport report_;
  GridLayout layout_;
  RealizationTable grid_;
  PsiSamples psi_;
  std::optional<Phi> phi_;
  std::optional<OracleRun> oracle_;
};

}  // namespace

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Pass:
      return "pass";
    case Verdict::Fail:
      return "fail";
    case Verdict::Skip:
      return "skip";
  }
  return "unknown";
}

bool RunReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.verdict != Verdict::Fail; });
}

int RunReport::exit_code() const { return all_passed() ? 0 : 1; }

const CheckResult* RunReport::find(const std::string& name) const {
  for (const auto& c : checks) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

nlohmann::ordered_json RunReport::to_json() const {
  Json j;
  j["scenario"] = scenario;
  j["version"] = kVersion;
  j["config_hash"] = hash_hex(config_hash);
  j["seed"] = seed;
  j["realizations"] = realizations;
  j["threads"] = threads;
  j["passed"] = all_passed();
  j["seconds"] = seconds;
  j["discards"] = discards;
  j["warnings"] = warnings;
  Json list = Json::array();
  for (const auto& c : checks) {
    Json e;
    e["name"] = c.name;
    e["verdict"] = to_string(c.verdict);
    e["message"] = c.message;
    e["seconds"] = c.seconds;
    e["metrics"] = c.metrics;
    list.push_back(e);
  }
  j["checks"] = list;
  return j;
}

Scenario Scenario::build(const ScenarioConfig& config) {
  Scenario s;
  s.config = config;
  const auto& c = s.config;
  const int n = c.dimension;
  s.cs = CoefficientSet::assemble(c.sigma, c.U, c.V, c.nu, n);
  s.labels = UniformGrid(c.box, c.label_resolution);
  s.padded = c.box.padded(excursion(s.cs, s.labels, c.T, 6.0));
  s.cs_paths = s.cs;
  s.cs_paths.set_domain(s.padded);
  s.time_grid = TimeGrid{c.dt, c.steps()};

  auto field = [n](const std::string& src) { return SpaceTimeField(FieldExpr::parse(src, n)); };
  s.f0 = field(c.f0);
  s.rho0 = field(c.rho0);
  s.phi_terminal = field(c.phi_terminal);
  for (const auto& h : c.h0) s.h0.push_back(field(h));
  if (c.f_exact) s.f_exact = field(*c.f_exact);

  std::array<int, kMaxDim> oracle_counts{1, 1, 1};
  for (int d = 0; d < n; ++d) {
    const double len = s.padded.upper(d) - s.padded.lower(d);
    oracle_counts[static_cast<std::size_t>(d)] = std::max(3, static_cast<int>(std::llround(len / c.oracle_dx)) + 1);
  }
  s.oracle_grid = UniformGrid(s.padded, oracle_counts);
  const double odt = s.oracle_dt();
  for (double t : c.output_times) {
    const double k = t / odt;
    if (std::abs(k - std::round(k)) > 1e-9 * std::max(1.0, k)) {
      throw ConfigError("oracle_dt", "output times must be multiples of the oracle time step");
    }
  }

  const Box query_box = c.query_box ? *c.query_box : shrink(c.box, excursion(s.cs, s.labels, c.T));
  std::array<int, kMaxDim> query_counts{1, 1, 1};
  if (c.query_resolution) {
    query_counts = *c.query_resolution;
  } else {
    const int per_axis = n == 1 ? 41 : n == 2 ? 21 : 11;
    for (int d = 0; d < n; ++d) query_counts[static_cast<std::size_t>(d)] = per_axis;
  }
  s.query = UniformGrid(query_box, query_counts);

  s.martingale_labels = c.martingale_labels;
  if (s.martingale_labels.empty()) {
    const Vec centre = 0.5 * (c.box.lower + c.box.upper);
    const double quarter = 0.25 * (c.box.upper(0) - c.box.lower(0));
    for (double shift : {-quarter, 0.0, quarter}) s.martingale_labels.push_back(centre + shift * Vec::Unit(n, 0));
  }
  return s;
}

SimulationPlan Scenario::plan() const {
  SimulationPlan p;
  p.cs = cs_paths;
  p.labels = labels;
  p.time_grid = time_grid;
  p.output_times = config.output_times;
  p.seed = config.seed;
  return p;
}

double Scenario::oracle_dt() const { return config.oracle_dt.value_or(config.dt); }

RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options) {
  ScenarioConfig c = config;
  if (options.seed) c.seed = *options.seed;
  if (options.realizations) c.realizations = *options.realizations;
  const bool statistical = std::any_of(c.checks.begin(), c.checks.end(), is_statistical);
  if (statistical && c.realizations < kMinRealizations) {
    throw ConfigError("realizations", "statistical checks need at least " + std::to_string(kMinRealizations) +
                                          " realizations");
  }
  Runner runner(c, options);
  return runner.run();
}

ConvergenceTable convergence_study(const ScenarioConfig& config, int levels, std::size_t realizations, int threads) {
  if (levels < 2) throw PreconditionError("a convergence study needs at least 2 refinement levels");
  if (realizations == 0) throw PreconditionError("a convergence study needs at least one realization");
  const auto s = Scenario::build(config);
  const auto& c = s.config;
  const int n = c.dimension;

  // Up to 9 evenly spaced interior labels per axis.
  std::vector<Vec> labels;
  std::array<std::vector<int>, kMaxDim> picks;
  for (int d = 0; d < n; ++d) {
    const int m = s.labels.count(d);
    auto& p = picks[static_cast<std::size_t>(d)];
    if (m <= 2) {
      p.push_back(0);
      continue;
    }
    const int k = std::min(9, m - 2);
    for (int i = 0; i < k; ++i) {
      p.push_back(k == 1 ? (m - 1) / 2 : 1 + static_cast<int>(std::llround(double(m - 3) * i / (k - 1))));
    }
    p.erase(std::unique(p.begin(), p.end()), p.end());
  }
  std::array<int, kMaxDim> idx{0, 0, 0};
  std::array<std::size_t, kMaxDim> pos{0, 0, 0};
  while (true) {
    for (int d = 0; d < n; ++d) idx[static_cast<std::size_t>(d)] = picks[static_cast<std::size_t>(d)][pos[static_cast<std::size_t>(d)]];
    labels.push_back(s.labels.node(s.labels.flat_index(idx)));
    int d = 0;
    while (d < n && ++pos[static_cast<std::size_t>(d)] == picks[static_cast<std::size_t>(d)].size()) {
      pos[static_cast<std::size_t>(d)] = 0;
      ++d;
    }
    if (d == n) break;
  }

  const auto L = static_cast<std::size_t>(levels);
  std::vector<std::vector<double>> sums(realizations);  // per realization: [sde_l, lambda_l]
  std::vector<char> ok(realizations, 0);
  const std::vector<double> outputs{c.T};
  parallel_for(realizations, threads, [&](std::size_t r) {
    std::vector<double> row(2 * L, 0.0);
    try {
      for (std::size_t l = 0; l < L; ++l) {
        const double dt = c.dt / static_cast<double>(1ULL << l);
        const int substeps = 1 << (levels - 1 - static_cast<int>(l));
        const TimeGrid grid{dt, c.steps() << l};
        const BrownianDriver driver(c.seed, r, dt, n, substeps);
        const auto ens = simulate_ensemble(s.cs_paths, labels, grid, outputs, driver);
        for (const auto& p : ens.states[0]) {
          row[l] += std::pow(p.D_direct - p.D_sde, 2);
          row[L + l] += std::pow(p.D_direct - std::exp(p.log_lambda), 2);
        }
      }
    } catch (const PathFailure&) {
      return;
    }
    sums[r] = std::move(row);
    ok[r] = 1;
  });

  ConvergenceTable table;
  table.labels = labels.size();
  std::vector<double> total(2 * L, 0.0);
  for (std::size_t r = 0; r < realizations; ++r) {
    if (!ok[r]) {
      ++table.discarded;
      continue;
    }
    ++table.realizations;
    for (std::size_t i = 0; i < 2 * L; ++i) total[i] += sums[r][i];
  }
  if (table.realizations == 0) throw PreconditionError("every realization of the convergence study was discarded");
  const double count = static_cast<double>(table.realizations * labels.size());
  std::vector<double> dts, sde, lam;
  for (std::size_t l = 0; l < L; ++l) {
    ConvergenceRow row;
    row.dt = c.dt / static_cast<double>(1ULL << l);
    row.rms_sde = std::sqrt(total[l] / count);
    row.rms_lambda = std::sqrt(total[L + l] / count);
    table.rows.push_back(row);
    dts.push_back(row.dt);
    sde.push_back(row.rms_sde);
    lam.push_back(row.rms_lambda);
  }
  table.sde_rounding_level = *std::max_element(sde.begin(), sde.end()) <= 1e-12;
  table.order_sde = table.sde_rounding_level ? kNaN : fitted_order(dts, sde);
  table.lambda_rounding_level = *std::max_element(lam.begin(), lam.end()) <= 1e-12;
  table.order_lambda = table.lambda_rounding_level ? kNaN : fitted_order(dts, lam);
  return table;
}

double fitted_order(std::span<const double> dt, std::span<const double> error) {
  if (dt.size() != error.size() || dt.size() < 2) throw PreconditionError("order fit needs at least two points");
  double mx = 0.0, my = 0.0;
  const double N = static_cast<double>(dt.size());
  for (std::size_t i = 0; i < dt.size(); ++i) {
    if (!(dt[i] > 0.0) || !(error[i] > 0.0)) return kNaN;
    mx += std::log(dt[i]) / N;
    my += std::log(error[i]) / N;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < dt.size(); ++i) {
    const double x = std::log(dt[i]) - mx;
    sxy += x * (std::log(error[i]) - my);
    sxx += x * x;
  }
  return sxy / sxx;
}

void write_convergence_csv(const ConvergenceTable& table, std::ostream& out) {
  out << "dt,rms_sde,rms_lambda\n";
  for (const auto& row : table.rows) {
    out << format_number(row.dt) << ',' << format_number(row.rms_sde) << ',' << format_number(row.rms_lambda) << '\n';
  }
}

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

}  // namespace stochlag

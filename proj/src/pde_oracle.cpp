#include "stochlag/pde_oracle.hpp"

#include "stochlag/sde_engine.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseLU>

#include <algorithm>
#include <limits>
#include <charconv>
#include <cmath>
#include <memory>
#include <ostream>
#include <sstream>

namespace stochlag {

namespace {

void append_number(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

std::vector<std::size_t> snapshot_steps(const OracleOptions& options, double T, std::size_t& steps) {
  if (!(options.dt > 0.0)) throw PreconditionError("oracle dt must be positive");
  if (!(T > 0.0)) throw PreconditionError("oracle horizon must be positive");
  const double k = T / options.dt;
  steps = static_cast<std::size_t>(std::llround(k));
  if (std::abs(k - static_cast<double>(steps)) > 1e-9 * k) throw PreconditionError("T must be a multiple of the oracle dt");
  const TimeGrid grid{options.dt, steps};
  std::vector<std::size_t> out;
  for (double t : options.output_times) {
    out.push_back(grid.step_of(t));
    if (out.size() > 1 && out.back() <= out[out.size() - 2]) throw PreconditionError("oracle output times must increase");
  }
  return out;
}

class Stepping {
 public:
  Stepping(const CoefficientSet& cs, const UniformGrid& grid, const OracleOptions& options, bool adjoint)
      : cs_(cs), grid_(grid), options_(options), adjoint_(adjoint) {}

  // Advances v over [t0, t0 + dt] (forward) or back from t0 + dt to t0 (adjoint).
  void step(Eigen::VectorXd& v, double t0) {
    const double dt = options_.dt;
    const double t_eval = options_.stepper == Stepper::Explicit ? t0 : t0 + 0.5 * dt;
    if (!cached_ || cs_.is_time_dependent()) {
      auto disc = discretize(cs_, grid_, t_eval);
      W_ = disc.W;
      K_ = adjoint_ ? Eigen::SparseMatrix<double>(disc.K.transpose()) : disc.K;
      if (options_.stepper == Stepper::Explicit) {
        const double limit = explicit_dt_limit(cs_, grid_, t_eval);
        if (dt > limit * (1 + 1e-12)) {
          std::ostringstream os;
          os << "explicit oracle step dt=" << dt << " exceeds the stability limit " << limit;
          throw StabilityViolation(os.str());
        }
      } else {
        Eigen::SparseMatrix<double> lhs = -0.5 * dt * K_;
        for (Eigen::Index i = 0; i < W_.size(); ++i) lhs.coeffRef(i, i) += W_(i);
        lhs.makeCompressed();
        if (!analyzed_) {
          lu_.analyzePattern(lhs);
          analyzed_ = true;
        }
        lu_.factorize(lhs);
        if (lu_.info() != Eigen::Success) throw BlowUp("Crank-Nicolson factorization failed");
      }
      cached_ = true;
    }
    if (options_.stepper == Stepper::Explicit) {
      v += dt * (K_ * v).cwiseQuotient(W_);
    } else {
      const Eigen::VectorXd rhs = W_.cwiseProduct(v) + 0.5 * dt * (K_ * v);
      v = lu_.solve(rhs);
    }
    if (!v.allFinite()) throw BlowUp("oracle solution became non-finite");
  }

 private:
  const CoefficientSet& cs_;
  const UniformGrid& grid_;
  const OracleOptions& options_;
  bool adjoint_;
  bool cached_ = false;
  bool analyzed_ = false;
  Eigen::VectorXd W_;
  Eigen::SparseMatrix<double> K_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
};

void check_oracle_grid(const CoefficientSet& cs, const UniformGrid& grid) {
  if (grid.dimension() != cs.dimension()) throw DimensionMismatch("oracle grid dimension differs from coefficients");
  if (grid.dimension() > 2) throw PreconditionError("the finite-difference oracle supports 1D and 2D only");
}

}  // namespace

GridField GridField::sample(const UniformGrid& grid, const SpaceTimeField& f, double t) {
  GridField out{grid, Eigen::VectorXd(static_cast<Eigen::Index>(grid.size())), t};
  for (std::size_t i = 0; i < grid.size(); ++i) out.values(static_cast<Eigen::Index>(i)) = f(grid.node(i), t);
  return out;
}

double GridField::integral() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) acc += grid.trapezoid_weight(i) * values(static_cast<Eigen::Index>(i));
  return acc;
}

void write_csv(const GridField& field, std::ostream& out) {
  const int n = field.grid.dimension();
  std::string text;
  for (int d = 0; d < n; ++d) text += "x" + std::to_string(d + 1) + ",";
  text += "value\n";
  for (std::size_t i = 0; i < field.grid.size(); ++i) {
    const Vec x = field.grid.node(i);
    for (int d = 0; d < n; ++d) {
      append_number(text, x(d));
      text += ',';
    }
    append_number(text, field.values(static_cast<Eigen::Index>(i)));
    text += '\n';
  }
  out << text;
}

const GridField& OracleSeries::at_time(double t) const {
  for (const auto& s : snapshots) {
    if (std::abs(s.t - t) <= 1e-12 * std::max(1.0, std::abs(t))) return s;
  }
  throw PreconditionError("no oracle snapshot at t=" + std::to_string(t));
}

Discretization discretize(const CoefficientSet& cs, const UniformGrid& grid, double t) {
  check_oracle_grid(cs, grid);
  const int n = grid.dimension();
  const double nu = cs.nu();
  const auto N = static_cast<Eigen::Index>(grid.size());
  Discretization out;
  out.W.resize(N);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(grid.size() * 16);
  CoefficientSample s;

  // Stencil of the axis derivative used for cross terms at node idx.
  auto derivative_stencil = [&](std::array<int, kMaxDim> idx, int axis, double scale, auto&& emit) {
    const auto sa = static_cast<std::size_t>(axis);
    const int i = idx[sa];
    const int last = grid.count(axis) - 1;
    const double h = grid.spacing(axis);
    auto at = [&](int k) {
      idx[sa] = k;
      return static_cast<Eigen::Index>(grid.flat_index(idx));
    };
    if (i == 0) {
      emit(at(1), scale / h);
      emit(at(0), -scale / h);
    } else if (i == last) {
      emit(at(last), scale / h);
      emit(at(last - 1), -scale / h);
    } else {
      emit(at(i + 1), scale / (2 * h));
      emit(at(i - 1), -scale / (2 * h));
    }
  };

  for (std::size_t flat = 0; flat < grid.size(); ++flat) {
    const auto p = static_cast<Eigen::Index>(flat);
    const auto idx = grid.multi_index(flat);
    out.W(p) = grid.trapezoid_weight(flat);
    const Vec xp = grid.node(flat);
    cs.sample_into(xp, t, s);
    trip.emplace_back(p, p, out.W(p) * s.V);

    for (int d = 0; d < n; ++d) {
      const auto sd = static_cast<std::size_t>(d);
      if (idx[sd] == grid.count(d) - 1) continue;
      auto qidx = idx;
      ++qidx[sd];
      const auto q = static_cast<Eigen::Index>(grid.flat_index(qidx));
      double area = 1.0;
      for (int e = 0; e < n; ++e) {
        if (e == d) continue;
        const auto se = static_cast<std::size_t>(e);
        area *= grid.spacing(e);
        if (idx[se] == 0 || idx[se] == grid.count(e) - 1) area *= 0.5;
      }
      const Vec xf = 0.5 * (xp + grid.node(static_cast<std::size_t>(q)));
      cs.sample_into(xf, t, s);
      // Face flux F = -nu a_de d_e f + U_d (f_p + f_q) / 2; node p loses area*F, q gains it.
      auto emit = [&](Eigen::Index col, double c) {
        trip.emplace_back(p, col, -area * c);
        trip.emplace_back(q, col, area * c);
      };
      const double h = grid.spacing(d);
      emit(q, -nu * s.a(d, d) / h);
      emit(p, nu * s.a(d, d) / h);
      emit(p, 0.5 * s.U(d));
      emit(q, 0.5 * s.U(d));
      for (int e = 0; e < n; ++e) {
        if (e == d || s.a(d, e) == 0.0) continue;
        derivative_stencil(idx, e, -nu * s.a(d, e) * 0.5, emit);
        derivative_stencil(qidx, e, -nu * s.a(d, e) * 0.5, emit);
      }
    }
  }
  out.K.resize(N, N);
  out.K.setFromTriplets(trip.begin(), trip.end());
  out.K.makeCompressed();
  return out;
}

double explicit_dt_limit(const CoefficientSet& cs, const UniformGrid& grid, double t) {
  check_oracle_grid(cs, grid);
  double amax = 0.0;
  CoefficientSample s;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    cs.sample_into(grid.node(i), t, s);
    const Eigen::SelfAdjointEigenSolver<Mat> es(s.a, Eigen::EigenvaluesOnly);
    amax = std::max(amax, es.eigenvalues().maxCoeff());
  }
  const double h = grid.spacing().minCoeff();
  if (amax <= 0.0) return std::numeric_limits<double>::infinity();
  return h * h / (2.0 * cs.nu() * grid.dimension() * amax);
}

OracleSeries solve_forward(const CoefficientSet& cs, const GridField& f0, double T, const OracleOptions& options) {
  check_oracle_grid(cs, f0.grid);
  std::size_t steps = 0;
  const auto outputs = snapshot_steps(options, T, steps);
  OracleSeries series;
  Eigen::VectorXd v = f0.values;
  Stepping stepper(cs, f0.grid, options, false);
  std::size_t next = 0;
  for (std::size_t k = 0; k <= steps; ++k) {
    while (next < outputs.size() && outputs[next] == k) {
      series.snapshots.push_back(GridField{f0.grid, v, options.output_times[next]});
      ++next;
    }
    if (k == steps || next == outputs.size()) break;
    stepper.step(v, static_cast<double>(k) * options.dt);
  }
  return series;
}

OracleSeries solve_adjoint(const CoefficientSet& cs, const GridField& phi_T, double T, const OracleOptions& options) {
  check_oracle_grid(cs, phi_T.grid);
  if ((phi_T.values.array() < 0.0).any()) throw PreconditionError("adjoint terminal data must be non-negative");
  std::size_t steps = 0;
  const auto outputs = snapshot_steps(options, T, steps);
  OracleSeries series;
  series.snapshots.resize(outputs.size());
  Eigen::VectorXd v = phi_T.values;
  Stepping stepper(cs, phi_T.grid, options, true);
  std::size_t clipped = 0;
  double most_negative = 0.0;
  long next = static_cast<long>(outputs.size()) - 1;
  for (std::size_t k = steps + 1; k-- > 0;) {
    while (next >= 0 && outputs[static_cast<std::size_t>(next)] == k) {
      const auto o = static_cast<std::size_t>(next);
      series.snapshots[o] = GridField{phi_T.grid, v, options.output_times[o]};
      --next;
    }
    if (k == 0 || next < 0) break;
    stepper.step(v, static_cast<double>(k - 1) * options.dt);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (v(i) < 0.0) {
        most_negative = std::min(most_negative, v(i));
        v(i) = 0.0;
        ++clipped;
      }
    }
  }
  if (clipped > 0) {
    std::ostringstream os;
    os << "adjoint: clipped " << clipped << " negative values (most negative " << most_negative << ")";
    series.warnings.push_back(os.str());
  }
  return series;
}

SpaceTimeField interpolate_series(const OracleSeries& series) {
  if (series.snapshots.empty()) throw PreconditionError("cannot interpolate an empty oracle series");
  auto snaps = std::make_shared<std::vector<GridField>>(series.snapshots);
  return SpaceTimeField([snaps](const Vec& x, double t) {
    const auto& s = *snaps;
    if (t <= s.front().t) return s.front().at(x);
    if (t >= s.back().t) return s.back().at(x);
    const auto it = std::upper_bound(s.begin(), s.end(), t, [](double v, const GridField& g) { return v < g.t; });
    const GridField& hi = *it;
    const GridField& lo = *(it - 1);
    const double w = (t - lo.t) / (hi.t - lo.t);
    return (1.0 - w) * lo.at(x) + w * hi.at(x);
  });
}

double ConvexH::operator()(double r) const {
  if (positive_domain && !(r > 0.0)) throw DomainError(name + " requires a positive argument");
  return H(r);
}

ConvexH ConvexH::square() { return {"r2", [](double r) { return r * r; }, false, true}; }

ConvexH ConvexH::smoothed_abs() {
  return {"abs_smooth", [](double r) { return std::sqrt((r - 1) * (r - 1) + kDelta * kDelta); }, false, true};
}

ConvexH ConvexH::entropy() { return {"rlogr", [](double r) { return r * std::log(r); }, true, true}; }

ConvexH ConvexH::smoothed_pos_part_sq() {
  return {"pos_part_sq",
          [](double r) {
            const double y = r - 1;
            const double s = 0.5 * (y + std::sqrt(y * y + kDelta * kDelta));
            return s * s;
          },
          false, true};
}

ConvexH ConvexH::linear() { return {"linear", [](double r) { return r; }, false, true}; }

ConvexH ConvexH::negative_square() { return {"neg_r2", [](double r) { return -r * r; }, false, false}; }

std::vector<std::string> ConvexH::names() { return {"r2", "abs_smooth", "rlogr", "pos_part_sq", "linear", "neg_r2"}; }

ConvexH ConvexH::by_name(const std::string& name) {
  if (name == "r2") return square();
  if (name == "abs_smooth") return smoothed_abs();
  if (name == "rlogr") return entropy();
  if (name == "pos_part_sq") return smoothed_pos_part_sq();
  if (name == "linear") return linear();
  if (name == "neg_r2") return negative_square();
  throw PreconditionError("unknown H '" + name + "'");
}

double min_second_difference(const ConvexH& h, double lo, double hi, int samples) {
  if (h.positive_domain) lo = std::max(lo, 1e-3);
  const double step = (hi - lo) / (samples - 1);
  const double e = std::min(1e-3, 0.5 * step);
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    const double r = lo + i * step;
    if (h.positive_domain && r - e <= 0.0) continue;
    worst = std::min(worst, h(r + e) - 2 * h(r) + h(r - e));
  }
  return worst;
}

EntropyReport entropy_series(const std::vector<GridField>& f, const std::vector<GridField>& rho,
                             const std::vector<GridField>& phi, const ConvexH& H, double slack) {
  if (f.size() != rho.size() || f.size() != phi.size()) throw DimensionMismatch("entropy series lengths differ");
  EntropyReport report;
  report.H = H.name;
  report.slack = slack;
  for (std::size_t k = 0; k < f.size(); ++k) {
    const auto& grid = f[k].grid;
    if (rho[k].values.size() != f[k].values.size() || phi[k].values.size() != f[k].values.size()) {
      throw DimensionMismatch("entropy series grids differ");
    }
    if (std::abs(rho[k].t - f[k].t) > 1e-12 || std::abs(phi[k].t - f[k].t) > 1e-12) {
      throw PreconditionError("entropy series times differ");
    }
    double G = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double r = rho[k].values(ii);
      if (!(r > 0.0)) {
        std::ostringstream os;
        os << "rho <= 0 (" << r << ") at node " << i << ", t=" << f[k].t;
        throw PositivityViolation(os.str());
      }
      G += grid.trapezoid_weight(i) * H(f[k].values(ii) / r) * phi[k].values(ii) * r;
    }
    report.times.push_back(f[k].t);
    report.values.push_back(G);
  }
  report.lower = report.values;
  report.upper = report.values;
  report.max_increment = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < report.values.size(); ++k) {
    const double inc = report.values[k] - report.values[k - 1];
    report.max_increment = std::max(report.max_increment, inc);
    if (inc > slack) ++report.positive_increments;
  }
  if (report.values.size() < 2) report.max_increment = 0.0;
  report.nonincreasing = report.positive_increments == 0;
  return report;
}

}  // namespace stochlag

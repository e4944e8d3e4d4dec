#pragma once

// Finite-volume reference solver for
//   forward:  d_t f = nu d_i(a_ij d_j f) - d_i(U_i f) + V f,
//   adjoint:  d_t phi + nu d_i(a_ij d_j phi) + U . grad phi + V phi = 0  (backward in t),
// on a box with zero-flux boundaries, plus the generalized entropy functional.
//
// With nodal control volumes W and face fluxes assembled into K, the forward
// semi-discretization is W df/dt = K f and the adjoint uses K^T, so paired
// steppers of the same kind conserve sum_i W_i phi_i f_i exactly.

#include "stochlag/coefficients.hpp"
#include "stochlag/grid.hpp"
#include "stochlag/types.hpp"

#include <Eigen/SparseCore>

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace stochlag {

class StabilityViolation : public Error {
 public:
  using Error::Error;
};

class BlowUp : public Error {
 public:
  using Error::Error;
};

class PositivityViolation : public Error {
 public:
  using Error::Error;
};

struct GridField {
  UniformGrid grid;
  Eigen::VectorXd values;
  double t = 0.0;

  static GridField sample(const UniformGrid& grid, const SpaceTimeField& f, double t);
  double at(const Vec& x) const { return grid.interpolate({values.data(), static_cast<std::size_t>(values.size())}, x); }
  /// Trapezoidal integral of the nodal values.
  double integral() const;
};

/// Writes one row per node: x1[,x2],value with shortest round-trip formatting.
void write_csv(const GridField& field, std::ostream& out);

enum class Stepper { Explicit, CrankNicolson };

struct OracleOptions {
  double dt = 0.0;
  Stepper stepper = Stepper::Explicit;
  /// Snapshot times in [0, T], increasing; must lie on the dt grid.
  std::vector<double> output_times;
};

struct OracleSeries {
  std::vector<GridField> snapshots;  // ordered by increasing time
  std::vector<std::string> warnings;

  const GridField& at_time(double t) const;
};

/// Nodal control volumes and flux matrix at time t.
struct Discretization {
  Eigen::VectorXd W;
  Eigen::SparseMatrix<double> K;
};
Discretization discretize(const CoefficientSet& cs, const UniformGrid& grid, double t);

/// Largest dt allowed for the explicit stepper: min dx^2 / (2 nu n max|a|).
double explicit_dt_limit(const CoefficientSet& cs, const UniformGrid& grid, double t = 0.0);

OracleSeries solve_forward(const CoefficientSet& cs, const GridField& f0, double T, const OracleOptions& options);

/// Solves backward from phi(., T) = phi_T; snapshots are returned in increasing time.
OracleSeries solve_adjoint(const CoefficientSet& cs, const GridField& phi_T, double T, const OracleOptions& options);

/// Space-time field from snapshots: multilinear in space, linear in time.
SpaceTimeField interpolate_series(const OracleSeries& series);

/// Smooth convex function of one variable for the entropy functional.
struct ConvexH {
  std::string name;
  std::function<double(double)> H;
  bool positive_domain = false;  // true when H is defined for r > 0 only
  bool convex = true;            // false only for negative controls

  double operator()(double r) const;

  static ConvexH square();
  static ConvexH smoothed_abs();      // sqrt((r - 1)^2 + delta^2)
  static ConvexH entropy();           // r log r
  static ConvexH smoothed_pos_part_sq();  // smoothed (r - 1)_+^2
  static ConvexH linear();
  static ConvexH negative_square();   // -r^2, non-convex control
  static ConvexH by_name(const std::string& name);
  static std::vector<std::string> names();

  static constexpr double kDelta = 1e-6;
};

/// Smallest raw second central difference H(r+h) - 2H(r) + H(r-h) on the
/// sampled range (r > 0 part only for positive-domain H).
double min_second_difference(const ConvexH& h, double lo, double hi, int samples = 2001);

struct EntropyReport {
  std::string H;
  std::vector<double> times;
  std::vector<double> values;
  std::vector<double> lower;  // confidence band, equal to values when deterministic
  std::vector<double> upper;
  std::vector<double> increment_lower;  // bootstrap interval per increment (MC only)
  std::vector<double> increment_upper;
  double slack = 0.0;
  double max_increment = 0.0;
  std::size_t positive_increments = 0;  // increments exceeding slack
  std::size_t excluded_nodes = 0;       // MC only: nodes where rho^ <= 4 SE at some time
  bool nonincreasing = true;
};

/// G(t_k) = sum_nodes H(f / rho) phi rho w over the trapezoidal weights w.
/// Verdict: every increment G(t_{k+1}) - G(t_k) <= slack.
EntropyReport entropy_series(const std::vector<GridField>& f, const std::vector<GridField>& rho,
                             const std::vector<GridField>& phi, const ConvexH& H, double slack);

}  // namespace stochlag

#pragma once

// Euler-Maruyama integration of the Lagrangian flow
//   dX = v(X, t) dt + sqrt(2 nu) sigma(X, t) dW,   X(a, 0) = a,
// together with its tangent matrix d_a X, two determinant trackers and the
// Feynman-Kac log-weight, all driven by one Brownian path per realization.

#include "stochlag/brownian.hpp"
#include "stochlag/coefficients.hpp"
#include "stochlag/grid.hpp"
#include "stochlag/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace stochlag {

/// A path could not be continued; the realization it belongs to is discarded.
class PathFailure : public Error {
 public:
  enum class Kind { EscapedDomain, NonFinite, DegenerateTangent };

  PathFailure(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }
  long label_index() const { return label_index_; }
  void set_label_index(long i) { label_index_ = i; }

 private:
  Kind kind_;
  long label_index_ = -1;
};

struct PathState {
  Vec label;
  double t = 0.0;
  Vec X;
  Mat J;  // J(j, k) = d X_j / d a_k
  double D_sde = 1.0;
  double log_lambda = 0.0;
  double D_direct = 1.0;
  double log_I = 0.0;  // integral of P(X(a, s), s) ds

  static PathState initial(const Vec& label, double t0 = 0.0);
};

/// One Euler-Maruyama step. `scratch` avoids reallocating the coefficient
/// sample. The evaluation box of `cs` (if set) acts as the escape boundary.
void step_path(const CoefficientSet& cs, PathState& state, const Vec& dW, double dt, CoefficientSample& scratch);

/// Value-returning convenience form.
PathState step_path(const CoefficientSet& cs, const PathState& state, const Vec& dW, double dt);

/// Uniform time grid 0 = t_0 < ... < t_K = T.
struct TimeGrid {
  double dt = 0.0;
  std::size_t steps = 0;

  double horizon() const { return dt * static_cast<double>(steps); }
  double time(std::size_t k) const { return dt * static_cast<double>(k); }

  /// Step index of output time `t`; throws unless t is a grid time.
  std::size_t step_of(double t) const;
};

struct Ensemble {
  std::vector<Vec> labels;
  std::vector<double> output_times;
  std::vector<std::size_t> output_steps;
  /// states[o][l]: label l at output time o.
  std::vector<std::vector<PathState>> states;
  std::uint64_t seed = 0;
  std::uint64_t realization = 0;
  double dt = 0.0;

  const PathState& at(std::size_t output, std::size_t label) const { return states[output][label]; }
  std::size_t output_index(double t) const;
};

/// Advances every label through the grid with the same increment per step.
/// Throws PathFailure (with the failing label index) if any path fails.
Ensemble simulate_ensemble(const CoefficientSet& cs, std::span<const Vec> labels, const TimeGrid& grid,
                           std::span<const double> output_times, const BrownianDriver& driver);

/// M(a, t) = phi(X(a, t), t) det(d_a X) exp(int_0^t P ds).
double martingale_M(const Ensemble& ens, const SpaceTimeField& phi, std::size_t label, std::size_t output);

}  // namespace stochlag

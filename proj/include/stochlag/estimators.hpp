#pragma once

// Monte Carlo estimators over independent realizations: expectation fields
// of Feynman-Kac processes, the integral of motion E(t) in label space, the
// entropy martingale, the empirical Jensen inequality and the bootstrap
// entropy-decay verdict. Realizations run in parallel; every reduction runs
// in realization order, so results do not depend on the thread count.

#include "stochlag/flow_inverse.hpp"
#include "stochlag/pde_oracle.hpp"
#include "stochlag/sde_engine.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stochlag {

class InsufficientRealizations : public Error {
 public:
  using Error::Error;
};

class SupportEscape : public Error {
 public:
  using Error::Error;
};

class NonPositiveDensity : public Error {
 public:
  using Error::Error;
};

class SignalTooNoisy : public Error {
 public:
  using Error::Error;
};

inline constexpr std::size_t kMinRealizations = 100;

/// Everything needed to reproduce one realization.
struct SimulationPlan {
  CoefficientSet cs;
  UniformGrid labels;
  TimeGrid time_grid;
  std::vector<double> output_times;
  std::uint64_t seed = 0;
  int substeps = 1;  // Brownian base resolution is dt / substeps
  /// When non-empty, these labels are simulated instead of the grid nodes.
  std::vector<Vec> label_points;
};

/// Runs realization r; returns nullopt (with the reason) if any path failed.
std::optional<Ensemble> simulate_realization(const SimulationPlan& plan, std::uint64_t r, std::string* failure = nullptr);

/// Per-realization vectors of equal length for the retained realizations.
struct RealizationTable {
  std::size_t requested = 0;
  std::vector<std::uint64_t> retained;
  std::vector<std::vector<double>> values;  // values[k] for retained[k]
  std::vector<std::string> failures;        // first few failure messages
  std::size_t discarded() const { return requested - retained.size(); }
};

using RealizationFn = std::function<std::vector<double>(const Ensemble&, std::uint64_t)>;

/// Simulates realizations 0..R-1 and applies fn to each retained ensemble.
/// A realization whose fn throws OutOfChart/NoConvergence counts as discarded.
RealizationTable collect_realizations(const SimulationPlan& plan, std::size_t R, int threads, const RealizationFn& fn);

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t count = 0;
};

/// Column statistics over the retained realizations (fixed order).
std::vector<MeanSe> column_statistics(const RealizationTable& table);

struct McField {
  UniformGrid grid;
  double t = 0.0;
  std::vector<double> mean;
  std::vector<double> variance;
  std::size_t count = 0;
  std::vector<char> masked;

  double se(std::size_t i) const { return std::sqrt(variance[i] / static_cast<double>(count)); }
  std::size_t masked_count() const;
};

/// psi_f0 and psi_rho0 at the query nodes for every output time.
/// Layout of each row: [o][q] for psi_f followed by [o][q] for psi_rho;
/// masked points (failed inversion) hold NaN.
struct PsiSamples {
  UniformGrid query;
  std::vector<double> times;
  RealizationTable table;

  std::size_t points() const { return query.size(); }
  double psi_f(std::size_t k, std::size_t o, std::size_t q) const { return table.values[k][o * points() + q]; }
  double psi_rho(std::size_t k, std::size_t o, std::size_t q) const {
    return table.values[k][(times.size() + o) * points() + q];
  }
};

/// psi_f0 and psi_rho0 of one chart at `points`; NaN where inversion fails.
void psi_at(const FlowChart& chart, const SpaceTimeField& f0, const SpaceTimeField& rho0, std::span<const Vec> points,
            std::span<double> psi_f, std::span<double> psi_rho);

PsiSamples sample_psi(const SimulationPlan& plan, const SpaceTimeField& f0, const SpaceTimeField& rho0,
                      const UniformGrid& query, std::size_t R, int threads);

struct FieldEstimate {
  McField f;
  McField rho;
};

/// Means and variances of psi at output `o`; points masked in any realization
/// are masked. Throws InsufficientRealizations when fewer than 100 remain.
FieldEstimate estimate_fields(const PsiSamples& samples, std::size_t o);

/// Throws SupportEscape unless |values| <= 1e-8 max|values| within `margin`
/// nodes of the grid faces.
void validate_support(const UniformGrid& grid, std::span<const double> values, int margin, const std::string& what);

/// E(t) = sum_a w_a M(a, t) rho0(a) h0(a) with trapezoidal weights w_a;
/// rho0h0 holds the nodal products.
double conserved_quantity(const Ensemble& ens, const UniformGrid& labels, const SpaceTimeField& phi,
                          std::span<const double> rho0h0, std::size_t output);

/// sum_x w_x psi_rho0(x) H(f0(A) / rho0(A)) phi(x, t) over the query grid.
double entropy_martingale(const FlowChart& chart, const SpaceTimeField& phi, const SpaceTimeField& rho0,
                          const SpaceTimeField& f0, const ConvexH& H, const UniformGrid& query);

struct JensenVerdict {
  double lhs = 0.0;  // H(mean v)
  double rhs = 0.0;  // mean g H(v / g)
  double slack = 0.0;
  bool holds = true;
};

/// With g = psi_rho / mean(psi_rho) and v = psi_f / mean(psi_rho), checks
/// H(mean v) <= mean(g H(v / g)) up to 1e-12 max(1, |lhs|, |rhs|).
JensenVerdict jensen_check(std::span<const double> psi_rho, std::span<const double> psi_f, const ConvexH& H);

struct BootstrapOptions {
  std::size_t resamples = 200;
  double level = 0.95;
  std::uint64_t seed = 0;
};

/// MC entropy series G(t) = sum_x w_x rho^ H(f^ / rho^) phi(x, t) with
/// percentile bootstrap bands over realizations. An increment counts as a
/// violation when its whole bootstrap interval lies above zero. Nodes where
/// rho^ <= 4 SE at any time are left out of every G(t); SignalTooNoisy is
/// thrown when that excludes more than half of the usable nodes.
EntropyReport entropy_decay_check(const PsiSamples& samples, const SpaceTimeField& phi, const ConvexH& H,
                                  const BootstrapOptions& options);

}  // namespace stochlag

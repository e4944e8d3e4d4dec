#include "stochlag/sde_engine.hpp"

#include <cmath>
#include <sstream>

namespace stochlag {

PathState PathState::initial(const Vec& label, double t0) {
  PathState s;
  s.label = label;
  s.t = t0;
  s.X = label;
  s.J = Mat::Identity(label.size(), label.size());
  return s;
}

namespace {

template <int N>
void update_state(const CoefficientSample& s, PathState& state, const Vec& dW, double dt, double nu) {
  using MatN = Eigen::Matrix<double, N, N>;
  using VecN = Eigen::Matrix<double, N, 1>;
  const double sq = std::sqrt(2.0 * nu);
  const VecN w = dW.head<N>();
  MatN B;  // B(j, k) = sum_p d_k sigma_jp dW_p
  for (int k = 0; k < N; ++k) B.col(k) = s.dsigma[static_cast<std::size_t>(k)].topLeftCorner<N, N>() * w;
  const double divsig_dW = s.div_sigma.head<N>().dot(w);
  const double drift = s.div_v + 2.0 * nu * s.E;

  const MatN J = state.J.topLeftCorner<N, N>();
  const MatN G = s.grad_v.topLeftCorner<N, N>() * dt + sq * B;
  state.X.head<N>() += s.v.head<N>() * dt + sq * (s.sigma.topLeftCorner<N, N>() * w);
  state.J.topLeftCorner<N, N>() = J + G * J;
  state.D_sde *= 1.0 + drift * dt + sq * divsig_dW;
  state.log_lambda += (drift - nu * s.div_sigma.head<N>().squaredNorm()) * dt + sq * divsig_dW;
  state.log_I += s.P * dt;
  state.t += dt;
  state.D_direct = state.J.topLeftCorner<N, N>().determinant();
}

}  // namespace

void step_path(const CoefficientSet& cs, PathState& state, const Vec& dW, double dt, CoefficientSample& scratch) {
  const CoefficientSample& s = cs.sample_ref(state.X, state.t, scratch);
  switch (cs.dimension()) {
    case 1:
      update_state<1>(s, state, dW, dt, cs.nu());
      break;
    case 2:
      update_state<2>(s, state, dW, dt, cs.nu());
      break;
    default:
      update_state<3>(s, state, dW, dt, cs.nu());
      break;
  }

  if (!state.X.allFinite() || !state.J.allFinite() || !std::isfinite(state.D_sde) ||
      !std::isfinite(state.log_lambda) || !std::isfinite(state.log_I)) {
    throw PathFailure(PathFailure::Kind::NonFinite, "non-finite path state");
  }
  if (!(state.D_direct > 0.0)) {
    std::ostringstream os;
    os << "tangent determinant " << state.D_direct << " <= 0 at t=" << state.t << "; step size too coarse";
    throw PathFailure(PathFailure::Kind::DegenerateTangent, os.str());
  }
  if (const Box* box = cs.domain(); box && !box->contains(state.X)) {
    std::ostringstream os;
    os << "path left the padded box at t=" << state.t << " (X=" << state.X.transpose() << ")";
    throw PathFailure(PathFailure::Kind::EscapedDomain, os.str());
  }
}

PathState step_path(const CoefficientSet& cs, const PathState& state, const Vec& dW, double dt) {
  if (!(dt > 0.0)) throw PreconditionError("dt must be positive");
  if (dW.size() != cs.dimension()) throw DimensionMismatch("Brownian increment dimension mismatch");
  PathState next = state;
  CoefficientSample scratch;
  step_path(cs, next, dW, dt, scratch);
  return next;
}

std::size_t TimeGrid::step_of(double t) const {
  const double k = t / dt;
  const double r = std::round(k);
  if (r < 0 || r > static_cast<double>(steps) || std::abs(k - r) > 1e-9 * std::max(1.0, r)) {
    std::ostringstream os;
    os << "time " << t << " is not on the grid (dt=" << dt << ", steps=" << steps << ")";
    throw PreconditionError(os.str());
  }
  return static_cast<std::size_t>(r);
}

std::size_t Ensemble::output_index(double t) const {
  for (std::size_t o = 0; o < output_times.size(); ++o) {
    if (std::abs(output_times[o] - t) <= 1e-12 * std::max(1.0, std::abs(t))) return o;
  }
  throw PreconditionError("time " + std::to_string(t) + " is not an output time of the ensemble");
}

Ensemble simulate_ensemble(const CoefficientSet& cs, std::span<const Vec> labels, const TimeGrid& grid,
                           std::span<const double> output_times, const BrownianDriver& driver) {
  if (!(grid.dt > 0.0)) throw PreconditionError("time step must be positive");
  if (std::abs(driver.dt() - grid.dt) > 1e-15 * grid.dt) throw PreconditionError("driver dt differs from grid dt");
  if (driver.dimension() != cs.dimension()) throw DimensionMismatch("driver dimension mismatch");

  Ensemble ens;
  ens.labels.assign(labels.begin(), labels.end());
  ens.output_times.assign(output_times.begin(), output_times.end());
  ens.seed = driver.seed();
  ens.realization = driver.realization();
  ens.dt = grid.dt;
  for (double t : output_times) ens.output_steps.push_back(grid.step_of(t));
  for (std::size_t o = 1; o < ens.output_steps.size(); ++o) {
    if (ens.output_steps[o] < ens.output_steps[o - 1]) throw PreconditionError("output times must be increasing");
  }
  ens.states.resize(output_times.size());

  std::vector<PathState> paths;
  paths.reserve(labels.size());
  for (std::size_t l = 0; l < labels.size(); ++l) {
    if (labels[l].size() != cs.dimension()) throw DimensionMismatch("label dimension mismatch");
    if (const Box* box = cs.domain(); box && !box->contains(labels[l])) {
      throw PreconditionError("label outside the evaluation box");
    }
    paths.push_back(PathState::initial(labels[l]));
  }

  const std::size_t last = ens.output_steps.empty() ? 0 : ens.output_steps.back();
  std::size_t next_out = 0;
  auto store = [&](std::size_t step) {
    while (next_out < ens.output_steps.size() && ens.output_steps[next_out] == step) {
      ens.states[next_out] = paths;
      ++next_out;
    }
  };
  store(0);
  CoefficientSample scratch;
  for (std::size_t k = 0; k < last; ++k) {
    const Vec dW = driver.increment(k);
    for (std::size_t l = 0; l < paths.size(); ++l) {
      try {
        step_path(cs, paths[l], dW, grid.dt, scratch);
        paths[l].t = grid.time(k + 1);
      } catch (PathFailure& failure) {
        failure.set_label_index(static_cast<long>(l));
        throw;
      } catch (const DomainError& e) {
        PathFailure failure(PathFailure::Kind::NonFinite, std::string("coefficient evaluation failed: ") + e.what());
        failure.set_label_index(static_cast<long>(l));
        throw failure;
      }
    }
    store(k + 1);
  }
  return ens;
}

double martingale_M(const Ensemble& ens, const SpaceTimeField& phi, std::size_t label, std::size_t output) {
  const PathState& s = ens.at(output, label);
  return phi(s.X, ens.output_times[output]) * s.D_direct * std::exp(s.log_I);
}

}  // namespace stochlag

#include "stochlag/sde_engine.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace stochlag {
namespace {

using Strings = std::vector<std::vector<std::string>>;

Vec vec1(double a) {
  Vec v(1);
  v << a;
  return v;
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

CoefficientSet sine_sigma_1d() {
  return CoefficientSet::assemble(Strings{{"1 + 0.5*sin(x1)"}}, {"0"}, "0", 0.1, 1);
}

TEST(PathState, InitialData) {
  const auto s = PathState::initial(vec2(0.3, -1.0));
  EXPECT_EQ(s.X, vec2(0.3, -1.0));
  EXPECT_EQ(s.J, Mat::Identity(2, 2));
  EXPECT_EQ(s.D_sde, 1.0);
  EXPECT_EQ(s.D_direct, 1.0);
  EXPECT_EQ(s.log_lambda, 0.0);
  EXPECT_EQ(s.log_I, 0.0);
}

TEST(StepPath, PureBrownian) {
  const auto cs = CoefficientSet::assemble(Strings{{"1", "0"}, {"0", "1"}}, {"0", "0"}, "0", 0.1, 2);
  const Vec dW = vec2(0.03, -0.01);
  const auto s = step_path(cs, PathState::initial(vec2(1, 2)), dW, 1e-3);
  EXPECT_EQ(s.X, vec2(1, 2) + std::sqrt(0.2) * dW);
  EXPECT_EQ(s.J, Mat::Identity(2, 2));
  EXPECT_EQ(s.D_sde, 1.0);
  EXPECT_EQ(s.D_direct, 1.0);
  EXPECT_EQ(s.log_lambda, 0.0);
  EXPECT_EQ(s.log_I, 0.0);
  EXPECT_DOUBLE_EQ(s.t, 1e-3);
}

TEST(StepPath, ConstantDrift) {
  const auto cs = CoefficientSet::assemble(Strings{{"1", "0"}, {"0", "1"}}, {"0.5", "-2"}, "0", 0.1, 2);
  const Vec dW = vec2(-0.02, 0.04);
  const double dt = 1e-2;
  const auto s = step_path(cs, PathState::initial(vec2(0, 0)), dW, dt);
  EXPECT_NEAR((s.X - (vec2(0.5, -2) * dt + std::sqrt(0.2) * dW)).norm(), 0.0, 1e-16);
  EXPECT_EQ(s.D_sde, 1.0);
  EXPECT_EQ(s.D_direct, 1.0);
}

TEST(StepPath, Preconditions) {
  const auto cs = sine_sigma_1d();
  EXPECT_THROW(step_path(cs, PathState::initial(vec1(0)), vec1(0.1), 0.0), PreconditionError);
  EXPECT_THROW(step_path(cs, PathState::initial(vec1(0)), vec2(0.1, 0), 0.1), DimensionMismatch);
}

TEST(StepPath, EscapeAndNonFiniteAreReported) {
  auto cs = CoefficientSet::assemble(Strings{{"1"}}, {"0"}, "0", 0.5, 1);
  cs.set_domain(Box{vec1(-1), vec1(1)});
  try {
    step_path(cs, PathState::initial(vec1(0.9)), vec1(1.0), 1e-2);
    FAIL() << "expected escape";
  } catch (const PathFailure& f) {
    EXPECT_EQ(f.kind(), PathFailure::Kind::EscapedDomain);
  }
  const auto blow = CoefficientSet::assemble(Strings{{"1"}}, {"0"}, "1e308", 0.5, 1);
  auto s = PathState::initial(vec1(1.0));
  s.log_I = 1e308;
  try {
    step_path(blow, s, vec1(0.0), 1.0);
    FAIL() << "expected non-finite";
  } catch (const PathFailure& f) {
    EXPECT_EQ(f.kind(), PathFailure::Kind::NonFinite);
  }
}

TEST(StepPath, CoarseStepDegeneratesTangent) {
  // v = -x1 with dt = 2 maps J to 1 - 2 = -1.
  const auto cs = CoefficientSet::assemble(Strings{{"1"}}, {"-x1"}, "0", 0.1, 1);
  try {
    step_path(cs, PathState::initial(vec1(0.0)), vec1(0.0), 2.0);
    FAIL() << "expected degenerate tangent";
  } catch (const PathFailure& f) {
    EXPECT_EQ(f.kind(), PathFailure::Kind::DegenerateTangent);
  }
}

TEST(StepPath, SineSigmaTrackersAgreeOverOneStep) {
  const auto cs = sine_sigma_1d();
  const double dt = 1e-3;
  const BrownianDriver driver(1, 0, dt, 1);
  const Vec dW = driver.increment(0);
  const auto s = step_path(cs, PathState::initial(vec1(0.4)), dW, dt);
  EXPECT_NEAR(s.D_direct, s.D_sde, 1e-14);
  // One Euler step of the linear SDE misses the Ito term b^2 (dW^2 - dt) / 2 of
  // the exponential, with b = sqrt(2 nu) sigma' and |sigma'| <= 0.5.
  const double b2 = 2 * 0.1 * 0.25;
  EXPECT_NEAR(s.D_direct, std::exp(s.log_lambda), b2 * (dW(0) * dW(0) + dt) + dt * dt);
}

struct TrackerError {
  double sde = 0.0;
  double lambda = 0.0;
};

TrackerError tracker_rms(const CoefficientSet& cs, const std::vector<Vec>& labels, double coarse_dt, int level,
                         double T, std::size_t realizations) {
  const int substeps = 1 << (2 - level);
  const double dt = coarse_dt / (1 << level);
  const TimeGrid grid{dt, static_cast<std::size_t>(std::llround(T / dt))};
  const std::vector<double> outputs{grid.horizon()};
  double s1 = 0.0, s2 = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < realizations; ++r) {
    // Finest level (dt / 4) is the base resolution shared by every level.
    const BrownianDriver driver(77, r, dt, cs.dimension(), substeps);
    const auto ens = simulate_ensemble(cs, labels, grid, outputs, driver);
    for (const auto& p : ens.states[0]) {
      s1 += std::pow(p.D_direct - p.D_sde, 2);
      s2 += std::pow(p.D_direct - std::exp(p.log_lambda), 2);
      ++count;
    }
  }
  return {std::sqrt(s1 / count), std::sqrt(s2 / count)};
}

TEST(SimulateEnsemble, SineSigmaTrackersPathwise) {
  const auto cs = sine_sigma_1d();
  const std::vector<Vec> labels{vec1(-1.0), vec1(0.2), vec1(1.3)};
  const TimeGrid grid{1e-3, 1000};
  const std::vector<double> outputs{0.5, 1.0};
  for (std::uint64_t r = 0; r < 20; ++r) {
    const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(5, r, grid.dt, 1));
    for (const auto& p : ens.states[1]) {
      EXPECT_LE(std::abs(p.D_direct - p.D_sde) / p.D_direct, 5e-2);
      EXPECT_LE(std::abs(p.D_direct - std::exp(p.log_lambda)) / p.D_direct, 5e-2);
      EXPECT_GT(p.D_direct, 0.0);
    }
  }
}

TEST(SimulateEnsemble, SineSigmaLambdaDiscrepancyShrinksUnderRefinement) {
  const auto cs = sine_sigma_1d();
  const std::vector<Vec> labels{vec1(-1.0), vec1(0.2), vec1(1.3)};
  const auto e0 = tracker_rms(cs, labels, 2e-3, 0, 1.0, 200);
  const auto e1 = tracker_rms(cs, labels, 2e-3, 1, 1.0, 200);
  const auto e2 = tracker_rms(cs, labels, 2e-3, 2, 1.0, 200);
  for (double ratio : {e0.lambda / e1.lambda, e1.lambda / e2.lambda}) {
    EXPECT_GE(ratio, 1.2);
    EXPECT_LE(ratio, 2.8);
  }
  // In one dimension the tangent and the multiplicative determinant update are
  // the same recursion, so their gap is rounding only.
  EXPECT_LE(std::max({e0.sde, e1.sde, e2.sde}), 1e-12);
}

TEST(SimulateEnsemble, TwoDimensionalTrackersConvergeAtHalfOrder) {
  const auto cs = CoefficientSet::assemble(Strings{{"1 + 0.3*sin(x2)", "0.2*cos(x1)"}, {"0.1*sin(x1)", "1"}},
                                           {"0", "0"}, "0", 0.1, 2);
  const std::vector<Vec> labels{vec2(0.1, -0.3), vec2(-0.8, 0.5)};
  const auto e0 = tracker_rms(cs, labels, 2e-3, 0, 0.5, 100);
  const auto e1 = tracker_rms(cs, labels, 2e-3, 1, 0.5, 100);
  const auto e2 = tracker_rms(cs, labels, 2e-3, 2, 0.5, 100);
  EXPECT_GT(e0.sde, 1e-8);
  for (double ratio : {e0.sde / e1.sde, e1.sde / e2.sde, e0.lambda / e1.lambda, e1.lambda / e2.lambda}) {
    EXPECT_GE(ratio, 1.2);
    EXPECT_LE(ratio, 2.8);
  }
}

TEST(SimulateEnsemble, GaussianLawOfTrivialCase) {
  const auto cs = CoefficientSet::assemble(Strings{{"1"}}, {"0"}, "0", 0.1, 1);
  const TimeGrid grid{0.05, 10};
  const std::vector<Vec> labels{vec1(0.0)};
  const std::vector<double> outputs{grid.horizon()};
  const std::size_t R = 10000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const double x = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(8, r, grid.dt, 1)).at(0, 0).X(0);
    sum += x;
    sum2 += x * x;
  }
  const double N = static_cast<double>(R);
  const double expected = 2 * 0.1 * grid.horizon();
  const double var = sum2 / N - (sum / N) * (sum / N);
  EXPECT_LE(std::abs(var - expected), 4 * expected * std::sqrt(2.0 / (N - 1)));
  EXPECT_LE(std::abs(sum / N), 4 * std::sqrt(expected / N));
}

TEST(SimulateEnsemble, SharedNoiseAdditiveCase) {
  const auto cs = CoefficientSet::assemble(Strings{{"1"}}, {"0"}, "0", 0.1, 1);
  const std::vector<Vec> labels{vec1(-1), vec1(0), vec1(1)};
  const TimeGrid grid{1e-2, 100};
  const std::vector<double> outputs{0.5, 1.0};
  const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(3, 4, grid.dt, 1));
  for (std::size_t o = 0; o < 2; ++o) {
    const double shift = ens.at(o, 1).X(0) - 0.0;
    EXPECT_NE(shift, 0.0);
    EXPECT_NEAR(ens.at(o, 0).X(0) + 1.0, shift, 1e-14);
    EXPECT_NEAR(ens.at(o, 2).X(0) - 1.0, shift, 1e-14);
  }
}

TEST(SimulateEnsemble, RotationPreservesVolume) {
  const auto cs = CoefficientSet::assemble(Strings{{"1", "0"}, {"0", "1"}}, {"-x2", "x1"}, "0", 0.1, 2);
  const std::vector<Vec> labels{vec2(0.5, 0.0), vec2(-1.0, 1.0)};
  for (double dt : {1e-3, 5e-4}) {
    const TimeGrid grid{dt, static_cast<std::size_t>(std::llround(1.0 / dt))};
    const std::vector<double> outputs{1.0};
    const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(1, 0, dt, 2));
    for (const auto& p : ens.states[0]) {
      // div v = 0 and E = 0: the determinant SDE and its exponential form are exactly 1.
      EXPECT_EQ(p.D_sde, 1.0);
      EXPECT_EQ(p.log_lambda, 0.0);
      // Each Euler step multiplies det J by det(I + dt R) = 1 + dt^2 for the rotation generator R.
      const double discrete = std::pow(1.0 + dt * dt, static_cast<double>(grid.steps));
      EXPECT_NEAR(p.D_direct, discrete, 1e-12);
      EXPECT_LE(std::abs(p.D_direct - 1.0), 1.001 * dt);
    }
  }
}

TEST(SimulateEnsemble, AdditiveNoiseLinearDriftExponentialTracker) {
  const auto cs = CoefficientSet::assemble(Strings{{"0.5", "0.1"}, {"0", "1"}}, {"0.3*x1 + x2", "-0.1*x2"}, "0", 0.1, 2);
  const std::vector<Vec> labels{vec2(0, 0), vec2(0.4, -0.2)};
  const TimeGrid grid{1e-3, 1000};
  const std::vector<double> outputs{0.25, 1.0};
  const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(2, 0, grid.dt, 2));
  for (std::size_t o = 0; o < 2; ++o) {
    for (const auto& p : ens.states[o]) {
      EXPECT_NEAR(std::exp(p.log_lambda), std::exp(0.2 * ens.output_times[o]), 1e-10);
      EXPECT_NEAR(p.D_sde, std::pow(1.0 + 0.2 * grid.dt, static_cast<double>(ens.output_steps[o])), 1e-10);
      // The Euler tangent is deterministic here: J_k = (I + dt A)^k.
      const Mat A = (Mat(2, 2) << 0.3, 1.0, 0.0, -0.1).finished();
      Mat Jk = Mat::Identity(2, 2);
      for (std::size_t k = 0; k < ens.output_steps[o]; ++k) Jk = Jk + grid.dt * A * Jk;
      EXPECT_NEAR((p.J - Jk).norm(), 0.0, 1e-12);
      // det(I + dt A)^k versus exp(t tr A): first order in dt.
      EXPECT_NEAR(p.D_direct, std::exp(0.2 * ens.output_times[o]), grid.dt);
    }
  }
}

TEST(SimulateEnsemble, BitIdenticalOnRerun) {
  const auto cs = sine_sigma_1d();
  const std::vector<Vec> labels{vec1(-0.5), vec1(0.5)};
  const TimeGrid grid{1e-3, 200};
  const std::vector<double> outputs{0.1, 0.2};
  const auto a = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(9, 1, grid.dt, 1));
  const auto b = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(9, 1, grid.dt, 1));
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t l = 0; l < 2; ++l) {
      EXPECT_EQ(a.at(o, l).X(0), b.at(o, l).X(0));
      EXPECT_EQ(a.at(o, l).D_sde, b.at(o, l).D_sde);
      EXPECT_EQ(a.at(o, l).log_I, b.at(o, l).log_I);
    }
  }
}

TEST(SimulateEnsemble, StoresInitialStateAndChecksOutputs) {
  const auto cs = sine_sigma_1d();
  const std::vector<Vec> labels{vec1(0.25)};
  const TimeGrid grid{1e-2, 10};
  const std::vector<double> outputs{0.0, 0.1};
  const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(1, 0, grid.dt, 1));
  EXPECT_EQ(ens.at(0, 0).X(0), 0.25);
  EXPECT_EQ(ens.output_index(0.1), 1u);
  EXPECT_THROW(ens.output_index(0.05), PreconditionError);
  const std::vector<double> off_grid{0.015};
  EXPECT_THROW(simulate_ensemble(cs, labels, grid, off_grid, BrownianDriver(1, 0, grid.dt, 1)), PreconditionError);
  const std::vector<double> decreasing{0.1, 0.0};
  EXPECT_THROW(simulate_ensemble(cs, labels, grid, decreasing, BrownianDriver(1, 0, grid.dt, 1)), PreconditionError);
  EXPECT_THROW(simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(1, 0, 2e-2, 1)), PreconditionError);
}

TEST(SimulateEnsemble, FailureCarriesLabelIndex) {
  auto cs = CoefficientSet::assemble(Strings{{"1"}}, {"1"}, "0", 0.1, 1);
  cs.set_domain(Box{vec1(-1), vec1(1)});
  const std::vector<Vec> labels{vec1(-0.9), vec1(0.95)};
  const TimeGrid grid{0.1, 10};
  const std::vector<double> outputs{1.0};
  try {
    simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(1, 0, grid.dt, 1));
    FAIL() << "expected escape";
  } catch (const PathFailure& f) {
    EXPECT_EQ(f.kind(), PathFailure::Kind::EscapedDomain);
    EXPECT_EQ(f.label_index(), 1);
  }
}

TEST(MartingaleM, InitialValueIsPhi) {
  const auto cs = sine_sigma_1d();
  const std::vector<Vec> labels{vec1(-0.5), vec1(0.7)};
  const TimeGrid grid{1e-2, 10};
  const std::vector<double> outputs{0.0, 0.1};
  const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(1, 0, grid.dt, 1));
  const SpaceTimeField phi(FieldExpr::parse("exp(x1) + t", 1));
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(martingale_M(ens, phi, l, 0), std::exp(labels[l](0)));
}

TEST(MartingaleM, TrivialFactorsGiveOne) {
  // Shear flow: divergence free with a nilpotent gradient, so every Euler
  // tangent step is unit triangular and det J stays exactly 1.
  const auto cs = CoefficientSet::assemble(Strings{{"1", "0"}, {"0", "1"}}, {"sin(x2)", "0"}, "0", 0.1, 2);
  const std::vector<Vec> labels{vec2(0, 0), vec2(1, -1), vec2(-0.5, 2)};
  const TimeGrid grid{1e-2, 100};
  const std::vector<double> outputs{0.3, 1.0};
  const SpaceTimeField phi(FieldExpr::constant(1.0, 2));
  for (std::uint64_t r = 0; r < 5; ++r) {
    const auto ens = simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(4, r, grid.dt, 2));
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t l = 0; l < labels.size(); ++l) EXPECT_EQ(martingale_M(ens, phi, l, o), 1.0);
  }
}

TEST(MartingaleM, SineSigmaMeanIsOne) {
  const auto cs = sine_sigma_1d();
  const std::vector<Vec> labels{vec1(0.3)};
  const TimeGrid grid{1e-2, 100};
  const std::vector<double> outputs{1.0};
  const SpaceTimeField phi(FieldExpr::constant(1.0, 1));
  const std::size_t R = 20000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const double m = martingale_M(simulate_ensemble(cs, labels, grid, outputs, BrownianDriver(12, r, grid.dt, 1)), phi, 0, 0);
    sum += m;
    sum2 += m * m;
  }
  const double N = static_cast<double>(R);
  const double mean = sum / N;
  const double se = std::sqrt((sum2 / N - mean * mean) / (N - 1));
  EXPECT_GT(se, 0.0);
  EXPECT_LE(std::abs(mean - 1.0), 4 * se);
}

}  // namespace
}  // namespace stochlag

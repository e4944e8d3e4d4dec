#include "stochlag/brownian.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace stochlag {
namespace {

// Known-answer vectors of the reference Philox4x32-10 implementation.
TEST(Philox, KnownAnswers) {
  using C = Philox4x32::Counter;
  EXPECT_EQ(Philox4x32(0)(C{0, 0, 0, 0}), (C{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(Philox4x32(0xffffffffffffffffull)(C{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}),
            (C{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(Philox4x32(0x299f31d0a4093822ull)(C{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}),
            (C{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, OpenUnitInterval) {
  EXPECT_GT(to_open_unit(0, 0), 0.0);
  EXPECT_LT(to_open_unit(0xffffffffu, 0xffffffffu), 1.0);
}

TEST(BrownianDriver, RejectsBadArguments) {
  EXPECT_THROW(BrownianDriver(1, 0, 0.0, 1), PreconditionError);
  EXPECT_THROW(BrownianDriver(1, 0, 0.1, 4), DimensionMismatch);
  EXPECT_THROW(BrownianDriver(1, 0, 0.1, 1, 0), PreconditionError);
}

TEST(BrownianDriver, IncrementsArePureFunctionsOfSeedRealizationStep) {
  const BrownianDriver a(42, 7, 1e-3, 3);
  const BrownianDriver b(42, 7, 1e-3, 3);
  for (std::uint64_t k : {0ull, 5ull, 1000000ull, 3ull, 5ull}) {
    const Vec x = a.increment(k);
    const Vec y = b.increment(k);
    for (int d = 0; d < 3; ++d) EXPECT_EQ(x(d), y(d));
  }
  EXPECT_NE(a.increment(0)(0), BrownianDriver(42, 8, 1e-3, 3).increment(0)(0));
  EXPECT_NE(a.increment(0)(0), BrownianDriver(43, 7, 1e-3, 3).increment(0)(0));
  EXPECT_NE(a.increment(0)(0), a.increment(1)(0));
}

TEST(BrownianDriver, LowerComponentsDoNotDependOnDimension) {
  const BrownianDriver d1(9, 2, 0.01, 1), d2(9, 2, 0.01, 2), d3(9, 2, 0.01, 3);
  for (std::uint64_t k = 0; k < 20; ++k) {
    EXPECT_EQ(d1.increment(k)(0), d3.increment(k)(0));
    EXPECT_EQ(d2.increment(k)(1), d3.increment(k)(1));
  }
}

TEST(BrownianDriver, CoarseIncrementIsSumOfFineIncrements) {
  const double dt = 4e-3;
  const BrownianDriver coarse(11, 3, dt, 2, 4);
  const BrownianDriver fine(11, 3, dt / 4, 2, 1);
  const BrownianDriver middle(11, 3, dt / 2, 2, 2);
  for (std::uint64_t k = 0; k < 50; ++k) {
    Vec sum = Vec::Zero(2);
    for (std::uint64_t s = 0; s < 4; ++s) sum += fine.increment(4 * k + s);
    const Vec c = coarse.increment(k);
    EXPECT_NEAR((c - sum).norm(), 0.0, 1e-15);
    const Vec m = middle.increment(2 * k) + middle.increment(2 * k + 1);
    EXPECT_NEAR((c - m).norm(), 0.0, 1e-15);
  }
}

TEST(BrownianDriver, MomentsMatchNormalZeroDt) {
  const double dt = 2.5e-3;
  const int n = 3;
  const std::size_t draws = 100000;
  for (int substeps : {1, 3}) {
    const BrownianDriver driver(2024, 1, dt, n, substeps);
    std::array<double, 3> sum{}, sum2{};
    double cross01 = 0.0;
    for (std::size_t k = 0; k < draws; ++k) {
      const Vec w = driver.increment(k);
      for (int d = 0; d < n; ++d) {
        sum[static_cast<std::size_t>(d)] += w(d);
        sum2[static_cast<std::size_t>(d)] += w(d) * w(d);
      }
      cross01 += w(0) * w(1);
    }
    const double N = static_cast<double>(draws);
    for (std::size_t d = 0; d < 3; ++d) {
      const double mean = sum[d] / N;
      const double var = sum2[d] / N - mean * mean;
      EXPECT_LE(std::abs(mean), 4 * std::sqrt(dt / N));
      EXPECT_LE(std::abs(var - dt), 4 * dt * std::sqrt(2.0 / N));
    }
    EXPECT_LE(std::abs(cross01 / N), 4 * dt / std::sqrt(N));
  }
}

TEST(BrownianDriver, IncrementsAcrossRealizationsAreUncorrelated) {
  const std::size_t R = 50000;
  double cross = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    cross += BrownianDriver(5, r, 1.0, 1).increment(0)(0) * BrownianDriver(5, r + R, 1.0, 1).increment(0)(0);
  }
  EXPECT_LE(std::abs(cross / static_cast<double>(R)), 4 / std::sqrt(static_cast<double>(R)));
}

TEST(UniformStream, DeterministicAndDisjointFromPathNoise) {
  UniformStream a(3, 0, StreamTag::Bootstrap), b(3, 0, StreamTag::Bootstrap), c(3, 0, StreamTag::Test);
  const double x = a.next();
  EXPECT_EQ(x, b.next());
  EXPECT_NE(x, c.next());
  UniformStream d(3, 1, StreamTag::Bootstrap);
  EXPECT_NE(x, d.next());
}

TEST(UniformStream, UniformMomentsAndIndexBounds) {
  UniformStream s(17, 0, StreamTag::Test);
  const int N = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < N; ++i) {
    const double u = s.next();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sum2 += u * u;
  }
  EXPECT_LE(std::abs(sum / N - 0.5), 4 * std::sqrt(1.0 / 12.0 / N));
  EXPECT_NEAR(sum2 / N - (sum / N) * (sum / N), 1.0 / 12.0, 4 * 0.0745 / std::sqrt(static_cast<double>(N)));
  std::array<int, 7> counts{};
  for (int i = 0; i < 70000; ++i) {
    const auto k = s.next_index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 4 * std::sqrt(10000 * 6.0 / 7.0));
}

TEST(UniformStream, NormalMoments) {
  UniformStream s(23, 4, StreamTag::Test);
  const int N = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < N; ++i) {
    const double z = s.next_normal();
    sum += z;
    sum2 += z * z;
  }
  EXPECT_LE(std::abs(sum / N), 4 / std::sqrt(static_cast<double>(N)));
  EXPECT_LE(std::abs(sum2 / N - 1.0), 4 * std::sqrt(2.0 / N));
}

}  // namespace
}  // namespace stochlag

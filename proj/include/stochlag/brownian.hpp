#pragma once

#include "stochlag/types.hpp"

#include <array>
#include <cstdint>

namespace stochlag {

/// Philox4x32-10 counter-based generator. Output is a pure function of
/// (key, counter), so any stream position can be reached in O(1).
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  explicit Philox4x32(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  Counter operator()(Counter ctr) const;

 private:
  Key key_;
};

/// Maps 64 random bits to a double uniform in the open interval (0, 1).
inline double to_open_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32 | lo) >> 12;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-52;
}

/// Standard normal pair for counter `ctr`, via Box-Muller.
std::array<double, 2> normal_pair(const Philox4x32& gen, const Philox4x32::Counter& ctr);

/// Brownian increments for one realization. Increment k over a step of
/// length dt is the sum of `substeps` base increments of length dt/substeps,
/// each a deterministic function of (seed, realization, base step index).
/// Drivers with the same seed and realization but different substep counts
/// therefore describe the same Brownian path at different resolutions.
class BrownianDriver {
 public:
  BrownianDriver(std::uint64_t seed, std::uint64_t realization, double dt, int dimension,
                 int substeps = 1);

  /// Delta W for step `step`, distributed Normal(0, dt I).
  Vec increment(std::uint64_t step) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t realization() const { return realization_; }
  double dt() const { return dt_; }
  int dimension() const { return dimension_; }
  int substeps() const { return substeps_; }

 private:
  std::uint64_t seed_;
  std::uint64_t realization_;
  double dt_;
  int dimension_;
  int substeps_;
  Philox4x32 gen_;
};

/// Stream tags keep bootstrap and test draws disjoint from path noise.
enum class StreamTag : std::uint32_t { Brownian = 0, Bootstrap = 1, Test = 2 };

/// Independent uniform stream for auxiliary sampling (bootstrap indices).
class UniformStream {
 public:
  UniformStream(std::uint64_t seed, std::uint64_t stream, StreamTag tag);
  double next();
  std::uint64_t next_index(std::uint64_t bound);
  double next_normal();

 private:
  Philox4x32 gen_;
  std::uint64_t stream_;
  StreamTag tag_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int used_ = 4;
};

}  // namespace stochlag

#include "stochlag/brownian.hpp"

#include <cmath>
#include <numbers>

namespace stochlag {

namespace {
constexpr std::uint32_t kMulA = 0xD2511F53u;
constexpr std::uint32_t kMulB = 0xCD9E8D57u;
constexpr std::uint32_t kWeylA = 0x9E3779B9u;
constexpr std::uint32_t kWeylB = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}
}  // namespace

Philox4x32::Counter Philox4x32::operator()(Counter ctr) const {
  Key key = key_;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMulA, ctr[0], hi0, lo0);
    mulhilo(kMulB, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeylA;
    key[1] += kWeylB;
  }
  return ctr;
}

std::array<double, 2> normal_pair(const Philox4x32& gen, const Philox4x32::Counter& ctr) {
  const auto r = gen(ctr);
  const double u1 = to_open_unit(r[0], r[1]);
  const double u2 = to_open_unit(r[2], r[3]);
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

BrownianDriver::BrownianDriver(std::uint64_t seed, std::uint64_t realization, double dt, int dimension,
                               int substeps)
    : seed_(seed), realization_(realization), dt_(dt), dimension_(dimension), substeps_(substeps), gen_(seed) {
  if (!(dt > 0.0)) throw PreconditionError("Brownian step dt must be positive");
  if (dimension < 1 || dimension > kMaxDim) throw DimensionMismatch("Brownian dimension must be in 1..3");
  if (substeps < 1) throw PreconditionError("substeps must be >= 1");
}

Vec BrownianDriver::increment(std::uint64_t step) const {
  Vec dw = Vec::Zero(dimension_);
  const double scale = std::sqrt(dt_ / substeps_);
  const auto real_lo = static_cast<std::uint32_t>(realization_);
  const auto real_hi = static_cast<std::uint32_t>(realization_ >> 32);
  for (int s = 0; s < substeps_; ++s) {
    const std::uint64_t base = step * static_cast<std::uint64_t>(substeps_) + static_cast<std::uint64_t>(s);
    // Counter layout: (base step lo, base step hi | block, realization lo, realization hi).
    // Block 0 covers components 0-1, block 1 covers component 2.
    for (int block = 0; 2 * block < dimension_; ++block) {
      const Philox4x32::Counter ctr{static_cast<std::uint32_t>(base),
                                    static_cast<std::uint32_t>(base >> 32) ^ (static_cast<std::uint32_t>(block) << 28),
                                    real_lo, real_hi};
      const auto z = normal_pair(gen_, ctr);
      dw(2 * block) += scale * z[0];
      if (2 * block + 1 < dimension_) dw(2 * block + 1) += scale * z[1];
    }
  }
  return dw;
}

UniformStream::UniformStream(std::uint64_t seed, std::uint64_t stream, StreamTag tag)
    : gen_(seed ^ (0x5851F42D4C957F2Dull * (static_cast<std::uint64_t>(tag) + 1))), stream_(stream), tag_(tag) {}

double UniformStream::next() {
  if (used_ >= 4) {
    buffer_ = gen_({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                    static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)});
    ++counter_;
    used_ = 0;
  }
  const double u = to_open_unit(buffer_[static_cast<std::size_t>(used_)], buffer_[static_cast<std::size_t>(used_ + 1)]);
  used_ += 2;
  return u;
}

std::uint64_t UniformStream::next_index(std::uint64_t bound) {
  const auto i = static_cast<std::uint64_t>(next() * static_cast<double>(bound));
  return i < bound ? i : bound - 1;
}

double UniformStream::next_normal() {
  const double u1 = next();
  const double u2 = next();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace stochlag

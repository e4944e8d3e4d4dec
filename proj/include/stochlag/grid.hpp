#pragma once

#include "stochlag/coefficients.hpp"
#include "stochlag/types.hpp"

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace stochlag {

/// Uniform rectangular lattice including both box faces. Nodes are ordered
/// with x1 varying fastest.
class UniformGrid {
 public:
  UniformGrid() = default;
  UniformGrid(Vec lower, Vec upper, std::array<int, kMaxDim> counts);
  UniformGrid(const Box& box, std::array<int, kMaxDim> counts) : UniformGrid(box.lower, box.upper, counts) {}

  int dimension() const { return static_cast<int>(lower_.size()); }
  int count(int axis) const { return counts_[static_cast<std::size_t>(axis)]; }
  const std::array<int, kMaxDim>& counts() const { return counts_; }
  double spacing(int axis) const { return spacing_(axis); }
  const Vec& spacing() const { return spacing_; }
  const Vec& lower() const { return lower_; }
  const Vec& upper() const { return upper_; }
  Box box() const { return Box{lower_, upper_}; }
  std::size_t size() const { return size_; }

  /// Volume element prod(spacing).
  double cell_volume() const;

  Vec node(std::size_t flat) const;
  std::array<int, kMaxDim> multi_index(std::size_t flat) const;
  std::size_t flat_index(const std::array<int, kMaxDim>& idx) const;
  std::vector<Vec> nodes() const;

  /// Trapezoidal weight of node `flat` (product of 1/2 at faces, times cell volume).
  double trapezoid_weight(std::size_t flat) const;

  /// True when node `flat` lies at least `margin` nodes away from every face.
  bool is_interior(std::size_t flat, int margin = 1) const;

  /// Cell count along each axis (count - 1) and in total.
  std::size_t cell_count() const;
  std::array<int, kMaxDim> cell_multi_index(std::size_t cell) const;

  /// Flat node index of corner `mask` (bit d set = upper side along axis d).
  std::size_t corner(const std::array<int, kMaxDim>& cell, unsigned mask) const;

  /// Cell containing x (clamped to the grid) and local coordinates in that
  /// cell; local coordinates fall outside [0, 1] only for x outside the box.
  struct Location {
    std::array<int, kMaxDim> cell{0, 0, 0};
    Vec xi;
  };
  Location locate(const Vec& x) const;

  /// Multilinear interpolation of nodal values; x is clamped to the box.
  double interpolate(std::span<const double> values, const Vec& x) const;

 private:
  Vec lower_;
  Vec upper_;
  Vec spacing_;
  std::array<int, kMaxDim> counts_{1, 1, 1};
  std::size_t size_ = 0;
};

/// Weight of corner `mask` for local coordinates xi in a multilinear cell.
inline double corner_weight(unsigned mask, const Vec& xi) {
  double w = 1.0;
  for (int d = 0; d < xi.size(); ++d) w *= (mask >> d & 1u) ? xi(d) : 1.0 - xi(d);
  return w;
}

/// Deterministic scalar field phi(x, t): either a compiled expression or an
/// arbitrary callable (e.g. interpolated finite-difference output).
class SpaceTimeField {
 public:
  using Function = std::function<double(const Vec&, double)>;

  SpaceTimeField() = default;
  explicit SpaceTimeField(const FieldExpr& expr);
  explicit SpaceTimeField(Function fn) : fn_(std::move(fn)) {}

  double operator()(const Vec& x, double t) const { return fn_(x, t); }
  explicit operator bool() const { return static_cast<bool>(fn_); }

 private:
  Function fn_;
};

}  // namespace stochlag

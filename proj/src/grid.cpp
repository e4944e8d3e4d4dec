#include "stochlag/grid.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace stochlag {

UniformGrid::UniformGrid(Vec lower, Vec upper, std::array<int, kMaxDim> counts)
    : lower_(std::move(lower)), upper_(std::move(upper)) {
  const int n = static_cast<int>(lower_.size());
  if (n < 1 || n > kMaxDim || upper_.size() != n) throw DimensionMismatch("grid bounds dimension mismatch");
  spacing_.resize(n);
  size_ = 1;
  for (int d = 0; d < kMaxDim; ++d) {
    const auto sd = static_cast<std::size_t>(d);
    if (d >= n) {
      counts_[sd] = 1;
      continue;
    }
    if (counts[sd] < 2) throw PreconditionError("grid needs at least 2 nodes per axis");
    if (!(upper_(d) > lower_(d))) throw PreconditionError("grid upper bound must exceed lower bound");
    counts_[sd] = counts[sd];
    spacing_(d) = (upper_(d) - lower_(d)) / (counts[sd] - 1);
    size_ *= static_cast<std::size_t>(counts[sd]);
  }
}

double UniformGrid::cell_volume() const { return spacing_.prod(); }

std::array<int, kMaxDim> UniformGrid::multi_index(std::size_t flat) const {
  std::array<int, kMaxDim> idx{0, 0, 0};
  for (int d = 0; d < dimension(); ++d) {
    const auto c = static_cast<std::size_t>(counts_[static_cast<std::size_t>(d)]);
    idx[static_cast<std::size_t>(d)] = static_cast<int>(flat % c);
    flat /= c;
  }
  return idx;
}

std::size_t UniformGrid::flat_index(const std::array<int, kMaxDim>& idx) const {
  std::size_t flat = 0;
  for (int d = dimension() - 1; d >= 0; --d) {
    flat = flat * static_cast<std::size_t>(counts_[static_cast<std::size_t>(d)]) +
           static_cast<std::size_t>(idx[static_cast<std::size_t>(d)]);
  }
  return flat;
}

Vec UniformGrid::node(std::size_t flat) const {
  const auto idx = multi_index(flat);
  Vec x(dimension());
  for (int d = 0; d < dimension(); ++d) {
    const int i = idx[static_cast<std::size_t>(d)];
    // Last node pinned to the upper bound exactly.
    x(d) = i == counts_[static_cast<std::size_t>(d)] - 1 ? upper_(d) : lower_(d) + i * spacing_(d);
  }
  return x;
}

std::vector<Vec> UniformGrid::nodes() const {
  std::vector<Vec> out;
  out.reserve(size_);
  for (std::size_t i = 0; i < size_; ++i) out.push_back(node(i));
  return out;
}

double UniformGrid::trapezoid_weight(std::size_t flat) const {
  const auto idx = multi_index(flat);
  double w = cell_volume();
  for (int d = 0; d < dimension(); ++d) {
    const int i = idx[static_cast<std::size_t>(d)];
    if (i == 0 || i == counts_[static_cast<std::size_t>(d)] - 1) w *= 0.5;
  }
  return w;
}

bool UniformGrid::is_interior(std::size_t flat, int margin) const {
  const auto idx = multi_index(flat);
  for (int d = 0; d < dimension(); ++d) {
    const int i = idx[static_cast<std::size_t>(d)];
    if (i < margin || i > counts_[static_cast<std::size_t>(d)] - 1 - margin) return false;
  }
  return true;
}

std::size_t UniformGrid::cell_count() const {
  std::size_t c = 1;
  for (int d = 0; d < dimension(); ++d) c *= static_cast<std::size_t>(counts_[static_cast<std::size_t>(d)] - 1);
  return c;
}

std::array<int, kMaxDim> UniformGrid::cell_multi_index(std::size_t cell) const {
  std::array<int, kMaxDim> idx{0, 0, 0};
  for (int d = 0; d < dimension(); ++d) {
    const auto c = static_cast<std::size_t>(counts_[static_cast<std::size_t>(d)] - 1);
    idx[static_cast<std::size_t>(d)] = static_cast<int>(cell % c);
    cell /= c;
  }
  return idx;
}

std::size_t UniformGrid::corner(const std::array<int, kMaxDim>& cell, unsigned mask) const {
  std::array<int, kMaxDim> idx = cell;
  for (int d = 0; d < dimension(); ++d) idx[static_cast<std::size_t>(d)] += static_cast<int>(mask >> d & 1u);
  return flat_index(idx);
}

UniformGrid::Location UniformGrid::locate(const Vec& x) const {
  Location loc;
  loc.xi.resize(dimension());
  for (int d = 0; d < dimension(); ++d) {
    const auto sd = static_cast<std::size_t>(d);
    const double s = (x(d) - lower_(d)) / spacing_(d);
    const int last = counts_[sd] - 2;
    int i = static_cast<int>(std::floor(s));
    i = i < 0 ? 0 : (i > last ? last : i);
    loc.cell[sd] = i;
    loc.xi(d) = s - i;
  }
  return loc;
}

double UniformGrid::interpolate(std::span<const double> values, const Vec& x) const {
  if (values.size() != size_) throw DimensionMismatch("interpolation values do not match the grid");
  auto loc = locate(x);
  for (int d = 0; d < dimension(); ++d) loc.xi(d) = std::clamp(loc.xi(d), 0.0, 1.0);
  double acc = 0.0;
  for (unsigned mask = 0; mask < (1u << dimension()); ++mask) {
    acc += corner_weight(mask, loc.xi) * values[corner(loc.cell, mask)];
  }
  return acc;
}

SpaceTimeField::SpaceTimeField(const FieldExpr& expr) {
  auto compiled = std::make_shared<CompiledField>(expr);
  fn_ = [compiled](const Vec& x, double t) { return (*compiled)(x, t); };
}

}  // namespace stochlag

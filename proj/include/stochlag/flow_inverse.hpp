#pragma once

// Back-to-labels map A(x, t): inversion of the simulated flow a -> X(a, t)
// through its multilinear interpolant over the label grid, plus the passive
// scalars f0(A) and Feynman-Kac processes f0(A) exp(I(A)) built on it.

#include "stochlag/grid.hpp"
#include "stochlag/sde_engine.hpp"
#include "stochlag/types.hpp"

#include <cstddef>
#include <vector>

namespace stochlag {

/// x is not covered by the image of any non-degenerate cell.
class OutOfChart : public Error {
 public:
  using Error::Error;
};

/// Newton failed in every candidate cell: the label grid is under-resolved.
class NoConvergence : public Error {
 public:
  using Error::Error;
};

class FlowChart {
 public:
  static constexpr int kMaxNewtonIterations = 50;
  static constexpr double kDegenerateDet = 1e-10;
  static constexpr double kMaxDeformation = 50.0;

  FlowChart(UniformGrid labels, double t, std::vector<Vec> X, std::vector<Mat> J, std::vector<double> log_I);

  /// Chart of output `output` of an ensemble whose labels are labels.nodes().
  static FlowChart from_ensemble(const UniformGrid& labels, const Ensemble& ens, std::size_t output);

  const UniformGrid& labels() const { return labels_; }
  double time() const { return t_; }
  int dimension() const { return labels_.dimension(); }

  const Vec& stored_X(std::size_t node) const { return X_[node]; }
  const Mat& stored_J(std::size_t node) const { return J_[node]; }
  double stored_log_I(std::size_t node) const { return log_I_[node]; }

  /// Interpolated flow X~(a) and its Jacobian d X~ / d a.
  Vec map(const Vec& a) const;
  Mat jacobian(const Vec& a) const;
  double log_I(const Vec& a) const;

  /// A(x, t): label with |X~(A) - x| <= 1e-8 (1 + |x|).
  Vec invert(const Vec& x) const;

  std::size_t degenerate_cells() const { return degenerate_count_; }
  bool is_degenerate(std::size_t cell) const { return degenerate_[cell] != 0; }

  /// Largest ratio of extreme singular values of the stored tangents.
  double max_deformation() const { return max_deformation_; }
  bool under_resolved() const { return max_deformation_ > kMaxDeformation; }

 private:
  enum class CellResult { Converged, Outside, Failed };

  Vec cell_map(const std::array<int, kMaxDim>& cell, const Vec& xi) const;
  Mat cell_jacobian(const std::array<int, kMaxDim>& cell, const Vec& xi) const;  // d X~ / d xi
  CellResult solve_in_cell(std::size_t cell, const Vec& x, Vec& label) const;
  std::size_t bucket_of(const Vec& x) const;

  UniformGrid labels_;
  double t_ = 0.0;
  std::vector<Vec> X_;
  std::vector<Mat> J_;
  std::vector<double> log_I_;
  std::vector<char> degenerate_;
  std::size_t degenerate_count_ = 0;
  double max_deformation_ = 1.0;

  // Uniform buckets over the image bounding box; each lists the cells whose
  // image bounding box overlaps it.
  Vec image_lower_;
  Vec image_upper_;
  std::array<int, kMaxDim> buckets_{1, 1, 1};
  Vec bucket_size_;
  std::vector<std::size_t> bucket_start_;
  std::vector<std::size_t> bucket_cells_;
};

/// theta(x, t) = f0(A(x, t)).
double passive_scalar(const FlowChart& chart, const SpaceTimeField& f0, const Vec& x);

/// psi(x, t) = f0(A(x, t)) exp(I(A(x, t), t)) with I interpolated in log form.
double feynman_kac_psi(const FlowChart& chart, const SpaceTimeField& f0, const Vec& x);

}  // namespace stochlag

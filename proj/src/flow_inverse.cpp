#include "stochlag/flow_inverse.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace stochlag {

namespace {

std::string point_text(const Vec& x) {
  std::ostringstream os;
  os << "(";
  for (int d = 0; d < x.size(); ++d) os << (d ? ", " : "") << x(d);
  os << ")";
  return os.str();
}

}  // namespace

FlowChart::FlowChart(UniformGrid labels, double t, std::vector<Vec> X, std::vector<Mat> J, std::vector<double> log_I)
    : labels_(std::move(labels)), t_(t), X_(std::move(X)), J_(std::move(J)), log_I_(std::move(log_I)) {
  const int n = labels_.dimension();
  const std::size_t N = labels_.size();
  if (X_.size() != N || J_.size() != N || log_I_.size() != N) {
    throw DimensionMismatch("flow chart data does not match the label grid");
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (X_[i].size() != n || J_[i].rows() != n || J_[i].cols() != n) {
      throw DimensionMismatch("flow chart entry dimension mismatch");
    }
  }

  for (const Mat& Jm : J_) {
    const Eigen::JacobiSVD<Mat> svd(Jm);
    const auto& s = svd.singularValues();
    const double ratio = s(n - 1) > 0 ? s(0) / s(n - 1) : std::numeric_limits<double>::infinity();
    max_deformation_ = std::max(max_deformation_, ratio);
  }

  const std::size_t cells = labels_.cell_count();
  const unsigned corners = 1u << n;
  degenerate_.assign(cells, 0);
  image_lower_ = Vec::Constant(n, std::numeric_limits<double>::infinity());
  image_upper_ = Vec::Constant(n, -std::numeric_limits<double>::infinity());
  std::vector<Vec> cell_lo(cells), cell_hi(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const auto cell = labels_.cell_multi_index(c);
    Vec lo = Vec::Constant(n, std::numeric_limits<double>::infinity());
    Vec hi = -lo;
    double min_det = std::numeric_limits<double>::infinity();
    for (unsigned m = 0; m < corners; ++m) {
      const Vec& xc = X_[labels_.corner(cell, m)];
      lo = lo.cwiseMin(xc);
      hi = hi.cwiseMax(xc);
      Vec xi(n);
      for (int d = 0; d < n; ++d) xi(d) = (m >> d & 1u) ? 1.0 : 0.0;
      // Determinant of d X~ / d a at the corner.
      Mat Jc = cell_jacobian(cell, xi);
      for (int d = 0; d < n; ++d) Jc.col(d) /= labels_.spacing(d);
      min_det = std::min(min_det, Jc.determinant());
    }
    if (!(min_det > kDegenerateDet)) {
      degenerate_[c] = 1;
      ++degenerate_count_;
      continue;
    }
    cell_lo[c] = lo;
    cell_hi[c] = hi;
    image_lower_ = image_lower_.cwiseMin(lo);
    image_upper_ = image_upper_.cwiseMax(hi);
  }
  if (degenerate_count_ == cells) throw OutOfChart("every cell of the flow chart is degenerate");

  // Roughly one bucket per cell.
  std::size_t total = 1;
  bucket_size_.resize(n);
  for (int d = 0; d < n; ++d) {
    const auto sd = static_cast<std::size_t>(d);
    buckets_[sd] = std::max(1, labels_.count(d) - 1);
    const double extent = std::max(image_upper_(d) - image_lower_(d), 1e-300);
    bucket_size_(d) = extent / buckets_[sd];
    total *= static_cast<std::size_t>(buckets_[sd]);
  }
  auto bucket_range = [&](const Vec& lo, const Vec& hi, std::array<int, kMaxDim>& b0, std::array<int, kMaxDim>& b1) {
    for (int d = 0; d < n; ++d) {
      const auto sd = static_cast<std::size_t>(d);
      auto clampb = [&](double v) {
        return std::clamp(static_cast<int>(std::floor((v - image_lower_(d)) / bucket_size_(d))), 0, buckets_[sd] - 1);
      };
      b0[sd] = clampb(lo(d));
      b1[sd] = clampb(hi(d));
    }
  };
  auto for_each_bucket = [&](const std::array<int, kMaxDim>& b0, const std::array<int, kMaxDim>& b1, auto&& fn) {
    for (int k = b0[2]; k <= b1[2]; ++k)
      for (int j = b0[1]; j <= b1[1]; ++j)
        for (int i = b0[0]; i <= b1[0]; ++i)
          fn((static_cast<std::size_t>(k) * static_cast<std::size_t>(buckets_[1]) + static_cast<std::size_t>(j)) *
                 static_cast<std::size_t>(buckets_[0]) +
             static_cast<std::size_t>(i));
  };
  std::vector<std::size_t> counts(total + 1, 0);
  std::array<int, kMaxDim> b0{0, 0, 0}, b1{0, 0, 0};
  for (std::size_t c = 0; c < cells; ++c) {
    if (degenerate_[c]) continue;
    bucket_range(cell_lo[c], cell_hi[c], b0, b1);
    for_each_bucket(b0, b1, [&](std::size_t b) { ++counts[b + 1]; });
  }
  for (std::size_t b = 0; b < total; ++b) counts[b + 1] += counts[b];
  bucket_start_ = counts;
  bucket_cells_.assign(counts[total], 0);
  std::vector<std::size_t> fill(counts.begin(), counts.end() - 1);
  for (std::size_t c = 0; c < cells; ++c) {
    if (degenerate_[c]) continue;
    bucket_range(cell_lo[c], cell_hi[c], b0, b1);
    for_each_bucket(b0, b1, [&](std::size_t b) { bucket_cells_[fill[b]++] = c; });
  }
}

FlowChart FlowChart::from_ensemble(const UniformGrid& labels, const Ensemble& ens, std::size_t output) {
  if (output >= ens.states.size()) throw PreconditionError("ensemble output index out of range");
  const auto& states = ens.states[output];
  if (states.size() != labels.size()) throw DimensionMismatch("ensemble labels do not match the label grid");
  std::vector<Vec> X;
  std::vector<Mat> J;
  std::vector<double> log_I;
  X.reserve(states.size());
  J.reserve(states.size());
  log_I.reserve(states.size());
  for (const auto& s : states) {
    X.push_back(s.X);
    J.push_back(s.J);
    log_I.push_back(s.log_I);
  }
  return FlowChart(labels, ens.output_times[output], std::move(X), std::move(J), std::move(log_I));
}

Vec FlowChart::cell_map(const std::array<int, kMaxDim>& cell, const Vec& xi) const {
  Vec x = Vec::Zero(dimension());
  for (unsigned m = 0; m < (1u << dimension()); ++m) x += corner_weight(m, xi) * X_[labels_.corner(cell, m)];
  return x;
}

Mat FlowChart::cell_jacobian(const std::array<int, kMaxDim>& cell, const Vec& xi) const {
  const int n = dimension();
  Mat Jx = Mat::Zero(n, n);
  for (unsigned m = 0; m < (1u << n); ++m) {
    const Vec& xc = X_[labels_.corner(cell, m)];
    for (int d = 0; d < n; ++d) {
      // d/d xi_d of the corner weight.
      double w = (m >> d & 1u) ? 1.0 : -1.0;
      for (int e = 0; e < n; ++e) {
        if (e != d) w *= (m >> e & 1u) ? xi(e) : 1.0 - xi(e);
      }
      Jx.col(d) += w * xc;
    }
  }
  return Jx;
}

Vec FlowChart::map(const Vec& a) const {
  const auto loc = labels_.locate(a);
  return cell_map(loc.cell, loc.xi);
}

Mat FlowChart::jacobian(const Vec& a) const {
  const auto loc = labels_.locate(a);
  Mat Jx = cell_jacobian(loc.cell, loc.xi);
  for (int d = 0; d < dimension(); ++d) Jx.col(d) /= labels_.spacing(d);
  return Jx;
}

double FlowChart::log_I(const Vec& a) const { return labels_.interpolate(log_I_, a); }

std::size_t FlowChart::bucket_of(const Vec& x) const {
  std::size_t b = 0;
  for (int d = dimension() - 1; d >= 0; --d) {
    const auto sd = static_cast<std::size_t>(d);
    const int i = std::clamp(static_cast<int>(std::floor((x(d) - image_lower_(d)) / bucket_size_(d))), 0, buckets_[sd] - 1);
    b = b * static_cast<std::size_t>(buckets_[sd]) + static_cast<std::size_t>(i);
  }
  return b;
}

FlowChart::CellResult FlowChart::solve_in_cell(std::size_t c, const Vec& x, Vec& label) const {
  const int n = dimension();
  const auto cell = labels_.cell_multi_index(c);
  const double tol = 1e-8 * (1.0 + x.norm());
  const double slack = 1e-9;

  // Seed at the corner whose image is nearest to x.
  Vec xi(n);
  double best = std::numeric_limits<double>::infinity();
  for (unsigned m = 0; m < (1u << n); ++m) {
    const double dist = (X_[labels_.corner(cell, m)] - x).squaredNorm();
    if (dist < best) {
      best = dist;
      for (int d = 0; d < n; ++d) xi(d) = (m >> d & 1u) ? 1.0 : 0.0;
    }
  }

  Vec r = cell_map(cell, xi) - x;
  double rn = r.norm();
  bool converged = false;
  for (int it = 0; it < kMaxNewtonIterations; ++it) {
    if (rn <= tol) {
      converged = true;
      // Polish: Newton converges quadratically, one more step is nearly free.
      if (rn <= 1e-3 * tol) break;
    }
    const Vec step = cell_jacobian(cell, xi).fullPivLu().solve(-r);
    if (!step.allFinite()) break;
    double lambda = 1.0;
    Vec trial = xi + step;
    Vec rt = cell_map(cell, trial) - x;
    while (rt.norm() > rn && lambda > 1e-4) {
      lambda *= 0.5;
      trial = xi + lambda * step;
      rt = cell_map(cell, trial) - x;
    }
    if (rt.norm() > rn) break;
    xi = trial;
    r = rt;
    rn = r.norm();
    // Far outside the cell: this is not the right cell.
    if ((xi.array() < -1.0).any() || (xi.array() > 2.0).any()) return CellResult::Outside;
  }
  if (rn <= tol) converged = true;
  if (!converged) return CellResult::Failed;
  if ((xi.array() < -slack).any() || (xi.array() > 1.0 + slack).any()) return CellResult::Outside;
  label.resize(n);
  for (int d = 0; d < n; ++d) {
    const auto sd = static_cast<std::size_t>(d);
    label(d) = labels_.lower()(d) + (cell[sd] + std::clamp(xi(d), 0.0, 1.0)) * labels_.spacing(d);
  }
  return CellResult::Converged;
}

Vec FlowChart::invert(const Vec& x) const {
  if (x.size() != dimension()) throw DimensionMismatch("point dimension does not match the flow chart");
  if ((x.array() < image_lower_.array()).any() || (x.array() > image_upper_.array()).any()) {
    throw OutOfChart("point " + point_text(x) + " lies outside the image of the label grid");
  }
  const std::size_t b = bucket_of(x);
  bool failed = false;
  Vec label;
  for (std::size_t k = bucket_start_[b]; k < bucket_start_[b + 1]; ++k) {
    switch (solve_in_cell(bucket_cells_[k], x, label)) {
      case CellResult::Converged:
        return label;
      case CellResult::Failed:
        failed = true;
        break;
      case CellResult::Outside:
        break;
    }
  }
  if (failed) {
    throw NoConvergence("Newton inversion did not converge at " + point_text(x) + "; label grid under-resolved");
  }
  throw OutOfChart("point " + point_text(x) + " is not covered by any non-degenerate cell");
}

double passive_scalar(const FlowChart& chart, const SpaceTimeField& f0, const Vec& x) {
  return f0(chart.invert(x), 0.0);
}

double feynman_kac_psi(const FlowChart& chart, const SpaceTimeField& f0, const Vec& x) {
  const Vec a = chart.invert(x);
  return f0(a, 0.0) * std::exp(chart.log_I(a));
}

}  // namespace stochlag

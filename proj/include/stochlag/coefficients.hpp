#pragma once

#include "stochlag/field_expr.hpp"
#include "stochlag/types.hpp"

#include <array>
#include <string>
#include <vector>

namespace stochlag {

/// Axis-aligned box in R^n.
struct Box {
  Vec lower;
  Vec upper;

  int dimension() const { return static_cast<int>(lower.size()); }
  bool contains(const Vec& x) const {
    return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
  }
  Box padded(double margin) const {
    return Box{(lower.array() - margin).matrix(), (upper.array() + margin).matrix()};
  }
};

/// Rank-3 array of n x n matrices indexed [k](j, p): the k-th partial of
/// sigma_{jp}.
using SigmaGradient = std::array<Mat, kMaxDim>;

/// All coefficient values at one space-time point.
struct CoefficientSample {
  Mat sigma;
  SigmaGradient dsigma;  // dsigma[k](j, p) = d_k sigma_{jp}
  Mat a;                 // sigma sigma^T
  Vec U;
  Vec u;  // U_j - nu d_i a_ij
  Vec v;  // Lagrangian drift
  Mat grad_v;  // grad_v(j, m) = d_m v_j
  double P = 0.0;
  double V = 0.0;
  double E = 0.0;  // minor sum
  Vec div_sigma;   // d_k sigma_{kp}, per column p
  double div_v = 0.0;
  double div_U = 0.0;
};

/// Coefficient bundle of the advection-diffusion operator
///   D rho = nu d_i(a_ij d_j rho) - div(U rho) + V rho,   a = sigma sigma^T,
/// with every symbolic derivative materialized.
class CoefficientSet {
 public:
  static CoefficientSet assemble(const std::vector<std::vector<std::string>>& sigma_src,
                                 const std::vector<std::string>& U_src, const std::string& V_src,
                                 double nu, int dimension);

  static CoefficientSet assemble(std::vector<std::vector<FieldExpr>> sigma, std::vector<FieldExpr> U,
                                 FieldExpr V, double nu);

  int dimension() const { return n_; }
  double nu() const { return nu_; }

  const FieldExpr& sigma(int j, int p) const { return sigma_[idx2(j, p)]; }
  const FieldExpr& dsigma(int k, int j, int p) const { return dsigma_[idx3(k, j, p)]; }
  const FieldExpr& U(int j) const { return U_[static_cast<std::size_t>(j)]; }
  const FieldExpr& dU(int k, int j) const { return dU_[idx2(k, j)]; }
  const FieldExpr& V() const { return V_; }

  // Symbolic derived fields.
  const FieldExpr& u_expr(int j) const { return u_expr_[static_cast<std::size_t>(j)]; }
  const FieldExpr& v_expr(int j) const { return v_expr_[static_cast<std::size_t>(j)]; }
  const FieldExpr& P_expr() const { return P_expr_; }
  const FieldExpr& E_expr() const { return E_expr_; }
  const FieldExpr& div_sigma_expr(int p) const { return div_sigma_expr_[static_cast<std::size_t>(p)]; }
  const FieldExpr& div_v_expr() const { return div_v_expr_; }
  const FieldExpr& a_expr(int i, int j) const { return a_expr_[idx2(i, j)]; }

  /// Restricts evaluation to `box` (the padded simulation domain). Points
  /// outside raise DomainError from sample().
  void set_domain(const Box& box);
  const Box* domain() const { return has_domain_ ? &domain_ : nullptr; }

  /// Evaluates every field at (x, t) from the compiled primitives.
  CoefficientSample sample(const Vec& x, double t) const;
  void sample_into(const Vec& x, double t, CoefficientSample& out) const;
  /// Like sample_into, but returns the shared sample of a constant set
  /// without copying it; otherwise fills and returns scratch.
  const CoefficientSample& sample_ref(const Vec& x, double t, CoefficientSample& scratch) const;

  /// True when sigma, U and V carry no space or time dependence.
  bool is_constant() const { return constant_; }
  bool is_time_dependent() const { return time_dependent_; }

 private:
  std::size_t idx2(int a, int b) const { return static_cast<std::size_t>(a * n_ + b); }
  std::size_t idx3(int a, int b, int c) const { return static_cast<std::size_t>((a * n_ + b) * n_ + c); }
  std::size_t idx4(int a, int b, int c, int d) const {
    return static_cast<std::size_t>(((a * n_ + b) * n_ + c) * n_ + d);
  }
  void evaluate_raw(const Vec& x, double t, CoefficientSample& out) const;
  template <int N>
  void evaluate_fixed(const double* x, double t, CoefficientSample& out) const;

  int n_ = 0;
  double nu_ = 0.0;
  std::vector<FieldExpr> sigma_, dsigma_, d2sigma_, U_, dU_;
  FieldExpr V_;
  std::vector<FieldExpr> u_expr_, v_expr_, div_sigma_expr_, a_expr_;
  FieldExpr P_expr_, E_expr_, div_v_expr_;

  // Every primitive (sigma, d sigma, d2 sigma, U, dU, V, in that order) in
  // one flat array: constants are stored once, only the rest is evaluated.
  std::vector<double> primitive_base_;
  std::vector<std::pair<std::size_t, CompiledField>> primitive_varying_;

  bool constant_ = false;
  bool time_dependent_ = false;
  CoefficientSample constant_sample_;
  Box domain_;
  bool has_domain_ = false;
};

/// E as the sum over i < j and p of the 2x2 minors of (d_r sigma_{kp}),
/// r, k in {i, j}.
template <typename Scalar>
Scalar E_minor_sum(const std::array<MatrixN<Scalar>, kMaxDim>& dsigma, int n) {
  Scalar e = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      for (int p = 0; p < n; ++p) {
        e += dsigma[i](i, p) * dsigma[j](j, p) - dsigma[i](j, p) * dsigma[j](i, p);
      }
    }
  }
  return e;
}

/// E = 1/2 [ d_i sigma_ip d_j sigma_jp - d_j sigma_ip d_i sigma_jp ] over all i, j, p.
template <typename Scalar>
Scalar E_half_form(const std::array<MatrixN<Scalar>, kMaxDim>& dsigma, int n) {
  Scalar e = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int p = 0; p < n; ++p) {
        e += dsigma[i](i, p) * dsigma[j](j, p) - dsigma[j](i, p) * dsigma[i](j, p);
      }
    }
  }
  return e / 2;
}

struct EFormReport {
  double max_discrepancy = 0.0;
  std::size_t points = 0;
  bool agree = true;  // max_discrepancy <= 1e-10
};

/// Compares the minor-sum and half-form expressions of E at `points`.
EFormReport verify_E_forms(const CoefficientSet& cs, const std::vector<Vec>& points, double t = 0.0);

/// Result of scanning a box for ellipticity and derivative consistency.
struct CoefficientValidation {
  double min_eigenvalue_a = 0.0;
  double max_dsigma_fd_error = 0.0;
  std::vector<std::string> warnings;
};

/// Samples `box` on a regular lattice: checks a = sigma sigma^T is PSD, warns
/// when its smallest eigenvalue drops below 1e-8, and cross-checks symbolic
/// d sigma against central differences.
CoefficientValidation validate_coefficients(const CoefficientSet& cs, const Box& box, int per_axis = 9,
                                            double t = 0.0);

}  // namespace stochlag

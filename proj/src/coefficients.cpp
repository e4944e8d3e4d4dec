#include "stochlag/coefficients.hpp"

#include <cmath>
#include <sstream>

namespace stochlag {

CoefficientSet CoefficientSet::assemble(const std::vector<std::vector<std::string>>& sigma_src,
                                        const std::vector<std::string>& U_src, const std::string& V_src,
                                        double nu, int dimension) {
  if (dimension < 1 || dimension > kMaxDim) {
    throw DimensionMismatch("dimension must be in 1..3, got " + std::to_string(dimension));
  }
  if (static_cast<int>(sigma_src.size()) != dimension) {
    throw DimensionMismatch("sigma must have " + std::to_string(dimension) + " rows, got " +
                            std::to_string(sigma_src.size()));
  }
  std::vector<std::vector<FieldExpr>> sigma;
  for (const auto& row : sigma_src) {
    if (static_cast<int>(row.size()) != dimension) {
      throw DimensionMismatch("sigma must be square " + std::to_string(dimension) + "x" +
                              std::to_string(dimension) + "; a row has " + std::to_string(row.size()) +
                              " entries");
    }
    std::vector<FieldExpr> parsed;
    for (const auto& s : row) parsed.push_back(FieldExpr::parse(s, dimension));
    sigma.push_back(std::move(parsed));
  }
  if (static_cast<int>(U_src.size()) != dimension) {
    throw DimensionMismatch("U must have " + std::to_string(dimension) + " components, got " +
                            std::to_string(U_src.size()));
  }
  std::vector<FieldExpr> U;
  for (const auto& s : U_src) U.push_back(FieldExpr::parse(s, dimension));
  return assemble(std::move(sigma), std::move(U), FieldExpr::parse(V_src, dimension), nu);
}

CoefficientSet CoefficientSet::assemble(std::vector<std::vector<FieldExpr>> sigma, std::vector<FieldExpr> U,
                                        FieldExpr V, double nu) {
  if (!(nu > 0.0) || !std::isfinite(nu)) throw PreconditionError("nu must be positive and finite");
  CoefficientSet cs;
  const int n = static_cast<int>(sigma.size());
  if (n < 1 || n > kMaxDim) throw DimensionMismatch("dimension must be in 1..3");
  cs.n_ = n;
  cs.nu_ = nu;
  const auto check_dim = [n](const FieldExpr& e) {
    if (e.dimension() != n) throw DimensionMismatch("field dimension does not match sigma");
  };
  for (const auto& row : sigma) {
    if (static_cast<int>(row.size()) != n) throw DimensionMismatch("sigma must be square");
    for (const auto& e : row) {
      check_dim(e);
      cs.sigma_.push_back(e);
    }
  }
  if (static_cast<int>(U.size()) != n) throw DimensionMismatch("U length does not match sigma");
  for (const auto& e : U) check_dim(e);
  check_dim(V);
  cs.U_ = std::move(U);
  cs.V_ = std::move(V);

  const auto nn = static_cast<std::size_t>(n);
  cs.dsigma_.resize(nn * nn * nn);
  cs.d2sigma_.resize(nn * nn * nn * nn);
  cs.dU_.resize(nn * nn);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int p = 0; p < n; ++p) {
        cs.dsigma_[cs.idx3(k, j, p)] = cs.sigma(j, p).differentiate(Variable::space(k));
      }
      cs.dU_[cs.idx2(k, j)] = cs.U(j).differentiate(Variable::space(k));
    }
  }
  for (int m = 0; m < n; ++m) {
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < n; ++j) {
        for (int p = 0; p < n; ++p) {
          cs.d2sigma_[cs.idx4(m, k, j, p)] = cs.dsigma(k, j, p).differentiate(Variable::space(m));
        }
      }
    }
  }

  // Symbolic derived fields.
  const FieldExpr zero = FieldExpr::constant(0.0, n);
  const FieldExpr nu_e = FieldExpr::constant(nu, n);
  cs.a_expr_.assign(nn * nn, zero);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      FieldExpr s = zero;
      for (int p = 0; p < n; ++p) s = s + cs.sigma(i, p) * cs.sigma(j, p);
      cs.a_expr_[cs.idx2(i, j)] = s;
    }
  }
  cs.div_sigma_expr_.assign(nn, zero);
  for (int p = 0; p < n; ++p) {
    FieldExpr s = zero;
    for (int k = 0; k < n; ++k) s = s + cs.dsigma(k, k, p);
    cs.div_sigma_expr_[static_cast<std::size_t>(p)] = s;
  }
  cs.u_expr_.assign(nn, zero);
  cs.v_expr_.assign(nn, zero);
  for (int j = 0; j < n; ++j) {
    FieldExpr da = zero;
    for (int i = 0; i < n; ++i) da = da + cs.a_expr(i, j).differentiate(Variable::space(i));
    cs.u_expr_[static_cast<std::size_t>(j)] = cs.U(j) - nu_e * da;

    FieldExpr first = zero;
    FieldExpr second = zero;
    for (int p = 0; p < n; ++p) {
      first = first + cs.div_sigma_expr(p) * cs.sigma(j, p);
      for (int k = 0; k < n; ++k) second = second + cs.dsigma(k, j, p) * cs.sigma(k, p);
    }
    cs.v_expr_[static_cast<std::size_t>(j)] = cs.U(j) - nu_e * first + nu_e * second;
  }
  FieldExpr div_U = zero;
  FieldExpr div_v = zero;
  for (int j = 0; j < n; ++j) {
    div_U = div_U + cs.dU(j, j);
    div_v = div_v + cs.v_expr(j).differentiate(Variable::space(j));
  }
  cs.P_expr_ = cs.V_ - div_U;
  cs.div_v_expr_ = div_v;
  FieldExpr E = zero;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      for (int p = 0; p < n; ++p) {
        E = E + (cs.dsigma(i, i, p) * cs.dsigma(j, j, p) - cs.dsigma(i, j, p) * cs.dsigma(j, i, p));
      }
    }
  }
  cs.E_expr_ = E;

  cs.primitive_base_.clear();
  cs.primitive_varying_.clear();
  const auto compile = [&cs](const FieldExpr& e) {
    const CompiledField c(e);
    cs.primitive_base_.push_back(c.constant_value().value_or(0.0));
    if (!c.is_constant()) cs.primitive_varying_.emplace_back(cs.primitive_base_.size() - 1, c);
  };
  for (const auto* group : {&cs.sigma_, &cs.dsigma_, &cs.d2sigma_, &cs.U_, &cs.dU_}) {
    for (const auto& e : *group) compile(e);
  }
  compile(cs.V_);

  bool constant = !cs.V_.depends_on_space() && !cs.V_.depends_on_time();
  bool time_dep = cs.V_.depends_on_time();
  for (const auto& e : cs.sigma_) {
    constant = constant && !e.depends_on_space() && !e.depends_on_time();
    time_dep = time_dep || e.depends_on_time();
  }
  for (const auto& e : cs.U_) {
    constant = constant && !e.depends_on_space() && !e.depends_on_time();
    time_dep = time_dep || e.depends_on_time();
  }
  cs.time_dependent_ = time_dep;
  if (constant) {
    cs.evaluate_raw(Vec::Zero(n), 0.0, cs.constant_sample_);
    cs.constant_ = true;
  }
  return cs;
}

void CoefficientSet::set_domain(const Box& box) {
  if (box.dimension() != n_) throw DimensionMismatch("domain box dimension mismatch");
  domain_ = box;
  has_domain_ = true;
}

CoefficientSample CoefficientSet::sample(const Vec& x, double t) const {
  CoefficientSample s;
  sample_into(x, t, s);
  return s;
}

void CoefficientSet::sample_into(const Vec& x, double t, CoefficientSample& out) const {
  if (x.size() != n_) throw DimensionMismatch("sample point dimension mismatch");
  if (has_domain_ && !domain_.contains(x)) {
    std::ostringstream os;
    os << "point (" << x.transpose() << ") outside the evaluation box";
    throw DomainError(os.str());
  }
  if (constant_) {
    out = constant_sample_;
    return;
  }
  evaluate_raw(x, t, out);
}

const CoefficientSample& CoefficientSet::sample_ref(const Vec& x, double t, CoefficientSample& scratch) const {
  if (constant_) {
    if (x.size() != n_) throw DimensionMismatch("sample point dimension mismatch");
    if (has_domain_ && !domain_.contains(x)) {
      std::ostringstream os;
      os << "point (" << x.transpose() << ") outside the evaluation box";
      throw DomainError(os.str());
    }
    return constant_sample_;
  }
  sample_into(x, t, scratch);
  return scratch;
}

void CoefficientSet::evaluate_raw(const Vec& x, double t, CoefficientSample& out) const {
  switch (n_) {
    case 1:
      evaluate_fixed<1>(x.data(), t, out);
      break;
    case 2:
      evaluate_fixed<2>(x.data(), t, out);
      break;
    default:
      evaluate_fixed<3>(x.data(), t, out);
      break;
  }
}

template <int N>
void CoefficientSet::evaluate_fixed(const double* xp, double t, CoefficientSample& out) const {
  using MatN = Eigen::Matrix<double, N, N>;
  using VecN = Eigen::Matrix<double, N, 1>;
  constexpr int kSigma = 0, kDsigma = N * N, kD2sigma = kDsigma + N * N * N, kU = kD2sigma + N * N * N * N,
                kDU = kU + N, kV = kDU + N * N;
  double prim[kV + 1];
  std::copy(primitive_base_.begin(), primitive_base_.end(), prim);
  for (const auto& [slot, field] : primitive_varying_) prim[slot] = field(xp, t);

  MatN sigma, dU;  // dU(j, k) = d_k U_j
  std::array<MatN, N> ds;  // ds[k](j, p) = d_k sigma_jp
  VecN U;
  const double* d2p = prim + kD2sigma;
  auto d2 = [d2p](int m, int k, int j, int p) { return d2p[((m * N + k) * N + j) * N + p]; };
  for (int j = 0; j < N; ++j) {
    for (int p = 0; p < N; ++p) {
      sigma(j, p) = prim[kSigma + j * N + p];
      for (int k = 0; k < N; ++k) ds[k](j, p) = prim[kDsigma + (k * N + j) * N + p];
    }
  }
  for (int j = 0; j < N; ++j) {
    U(j) = prim[kU + j];
    for (int k = 0; k < N; ++k) dU(j, k) = prim[kDU + k * N + j];
  }

  VecN div_sigma;
  for (int p = 0; p < N; ++p) {
    double s = 0.0;
    for (int k = 0; k < N; ++k) s += ds[k](k, p);
    div_sigma(p) = s;
  }

  // d_i a_ij = sum_p (d_i sigma_ip sigma_jp + sigma_ip d_i sigma_jp)
  VecN u, v;
  for (int j = 0; j < N; ++j) {
    double da = 0.0;
    double first = 0.0;
    double second = 0.0;
    for (int p = 0; p < N; ++p) {
      for (int i = 0; i < N; ++i) {
        da += ds[i](i, p) * sigma(j, p) + sigma(i, p) * ds[i](j, p);
        second += ds[i](j, p) * sigma(i, p);
      }
      first += div_sigma(p) * sigma(j, p);
    }
    u(j) = U(j) - nu_ * da;
    v(j) = U(j) - nu_ * first + nu_ * second;
  }

  // d_m v_j = d_m U_j - nu sum_p (d_m divsig_p sigma_jp + divsig_p d_m sigma_jp)
  //         + nu sum_{k,p} (d_m d_k sigma_jp sigma_kp + d_k sigma_jp d_m sigma_kp)
  MatN grad_v;
  for (int m = 0; m < N; ++m) {
    VecN d_divsig;
    for (int p = 0; p < N; ++p) {
      double s = 0.0;
      for (int k = 0; k < N; ++k) s += d2(m, k, k, p);
      d_divsig(p) = s;
    }
    for (int j = 0; j < N; ++j) {
      double first = 0.0;
      double second = 0.0;
      for (int p = 0; p < N; ++p) {
        first += d_divsig(p) * sigma(j, p) + div_sigma(p) * ds[m](j, p);
        for (int k = 0; k < N; ++k) second += d2(m, k, j, p) * sigma(k, p) + ds[k](j, p) * ds[m](k, p);
      }
      grad_v(j, m) = dU(j, m) - nu_ * first + nu_ * second;
    }
  }

  out.sigma = sigma;
  for (int k = 0; k < kMaxDim; ++k) {
    if (k < N) {
      out.dsigma[static_cast<std::size_t>(k)] = ds[static_cast<std::size_t>(k)];
    } else {
      out.dsigma[static_cast<std::size_t>(k)].resize(N, N);
    }
  }
  out.a = sigma * sigma.transpose();
  out.U = U;
  out.u = u;
  out.v = v;
  out.grad_v = grad_v;
  out.div_sigma = div_sigma;
  out.V = prim[kV];
  out.div_v = grad_v.trace();
  out.div_U = dU.trace();
  out.P = out.V - out.div_U;
  out.E = E_minor_sum<double>(out.dsigma, N);
}

EFormReport verify_E_forms(const CoefficientSet& cs, const std::vector<Vec>& points, double t) {
  EFormReport report;
  for (const auto& x : points) {
    const CoefficientSample s = cs.sample(x, t);
    const double minor = E_minor_sum<double>(s.dsigma, cs.dimension());
    const double half = E_half_form<double>(s.dsigma, cs.dimension());
    report.max_discrepancy = std::max(report.max_discrepancy, std::abs(minor - half));
    ++report.points;
  }
  report.agree = report.max_discrepancy <= 1e-10;
  return report;
}

CoefficientValidation validate_coefficients(const CoefficientSet& cs, const Box& box, int per_axis, double t) {
  CoefficientValidation out;
  out.min_eigenvalue_a = std::numeric_limits<double>::infinity();
  const int n = cs.dimension();
  int total = 1;
  for (int d = 0; d < n; ++d) total *= per_axis;
  for (int flat = 0; flat < total; ++flat) {
    Vec x(n);
    int rem = flat;
    for (int d = 0; d < n; ++d) {
      const int i = rem % per_axis;
      rem /= per_axis;
      const double frac = per_axis > 1 ? static_cast<double>(i) / (per_axis - 1) : 0.5;
      x(d) = box.lower(d) + frac * (box.upper(d) - box.lower(d));
    }
    Mat sigma(n, n);
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < n; ++p) sigma(j, p) = cs.sigma(j, p).evaluate(x, t);
    const Mat a = sigma * sigma.transpose();
    Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
    out.min_eigenvalue_a = std::min(out.min_eigenvalue_a, es.eigenvalues().minCoeff());

    for (int k = 0; k < n; ++k) {
      const double h = 1e-5 * (1.0 + std::abs(x(k)));
      Vec xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      for (int j = 0; j < n; ++j) {
        for (int p = 0; p < n; ++p) {
          const double fd = (cs.sigma(j, p).evaluate(xp, t) - cs.sigma(j, p).evaluate(xm, t)) / (2 * h);
          const double sym = cs.dsigma(k, j, p).evaluate(x, t);
          out.max_dsigma_fd_error =
              std::max(out.max_dsigma_fd_error, std::abs(fd - sym) / std::max(1.0, std::abs(sym)));
        }
      }
    }
  }
  if (out.min_eigenvalue_a < -1e-12) {
    out.warnings.push_back("diffusivity a = sigma sigma^T has a negative eigenvalue");
  } else if (out.min_eigenvalue_a < 1e-8) {
    std::ostringstream os;
    os << "diffusivity degenerates on the box (min eigenvalue " << out.min_eigenvalue_a
       << " < 1e-8); flow inversion may lose accuracy";
    out.warnings.push_back(os.str());
  }
  if (out.max_dsigma_fd_error > 1e-6) {
    out.warnings.push_back("symbolic d sigma disagrees with finite differences");
  }
  return out;
}

}  // namespace stochlag

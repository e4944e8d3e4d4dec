#include "stochlag/estimators.hpp"

#include "stochlag/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace stochlag {

namespace {

constexpr std::size_t kMaxRecordedFailures = 5;

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1 - w) * v[lo] + w * v[hi];
}

}  // namespace

std::optional<Ensemble> simulate_realization(const SimulationPlan& plan, std::uint64_t r, std::string* failure) {
  const BrownianDriver driver(plan.seed, r, plan.time_grid.dt, plan.cs.dimension(), plan.substeps);
  const auto labels = plan.label_points.empty() ? plan.labels.nodes() : plan.label_points;
  try {
    return simulate_ensemble(plan.cs, labels, plan.time_grid, plan.output_times, driver);
  } catch (const PathFailure& e) {
    if (failure) {
      std::ostringstream os;
      os << "realization " << r << ", label " << e.label_index() << ": " << e.what();
      *failure = os.str();
    }
    return std::nullopt;
  }
}

RealizationTable collect_realizations(const SimulationPlan& plan, std::size_t R, int threads, const RealizationFn& fn) {
  std::vector<std::optional<std::vector<double>>> slots(R);
  std::vector<std::string> reasons(R);
  parallel_for(R, threads, [&](std::size_t r) {
    auto ens = simulate_realization(plan, r, &reasons[r]);
    if (!ens) return;
    try {
      slots[r] = fn(*ens, r);
    } catch (const OutOfChart& e) {
      reasons[r] = "realization " + std::to_string(r) + ": " + e.what();
    } catch (const NoConvergence& e) {
      reasons[r] = "realization " + std::to_string(r) + ": " + e.what();
    }
  });
  RealizationTable table;
  table.requested = R;
  for (std::size_t r = 0; r < R; ++r) {
    if (slots[r]) {
      table.retained.push_back(r);
      table.values.push_back(std::move(*slots[r]));
    } else if (table.failures.size() < kMaxRecordedFailures) {
      table.failures.push_back(reasons[r]);
    }
  }
  return table;
}

std::vector<MeanSe> column_statistics(const RealizationTable& table) {
  if (table.values.empty()) return {};
  const std::size_t m = table.values.front().size();
  std::vector<MeanSe> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    // Welford in realization order.
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (const auto& row : table.values) {
      const double x = row[j];
      if (!std::isfinite(x)) continue;
      ++n;
      const double delta = x - mean;
      mean += delta / static_cast<double>(n);
      m2 += delta * (x - mean);
    }
    out[j].mean = mean;
    out[j].count = n;
    out[j].se = n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
  }
  return out;
}

std::size_t McField::masked_count() const {
  return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), char{1}));
}

void psi_at(const FlowChart& chart, const SpaceTimeField& f0, const SpaceTimeField& rho0, std::span<const Vec> points,
            std::span<double> psi_f, std::span<double> psi_rho) {
  for (std::size_t q = 0; q < points.size(); ++q) {
    try {
      const Vec a = chart.invert(points[q]);
      const double weight = std::exp(chart.log_I(a));
      psi_f[q] = f0(a, 0.0) * weight;
      psi_rho[q] = rho0(a, 0.0) * weight;
    } catch (const OutOfChart&) {
      psi_f[q] = psi_rho[q] = std::numeric_limits<double>::quiet_NaN();
    } catch (const NoConvergence&) {
      psi_f[q] = psi_rho[q] = std::numeric_limits<double>::quiet_NaN();
    }
  }
}

PsiSamples sample_psi(const SimulationPlan& plan, const SpaceTimeField& f0, const SpaceTimeField& rho0,
                      const UniformGrid& query, std::size_t R, int threads) {
  if (query.dimension() != plan.cs.dimension()) throw DimensionMismatch("query grid dimension mismatch");
  PsiSamples out;
  out.query = query;
  out.times = plan.output_times;
  const std::size_t Q = query.size();
  const std::size_t O = plan.output_times.size();
  const auto points = query.nodes();
  out.table = collect_realizations(plan, R, threads, [&](const Ensemble& ens, std::uint64_t) {
    std::vector<double> row(2 * O * Q, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t o = 0; o < O; ++o) {
      const auto chart = FlowChart::from_ensemble(plan.labels, ens, o);
      psi_at(chart, f0, rho0, points, std::span(row).subspan(o * Q, Q), std::span(row).subspan((O + o) * Q, Q));
    }
    return row;
  });
  return out;
}

FieldEstimate estimate_fields(const PsiSamples& samples, std::size_t o) {
  const std::size_t K = samples.table.retained.size();
  if (K < kMinRealizations) {
    throw InsufficientRealizations("field estimates need at least " + std::to_string(kMinRealizations) +
                                   " realizations, got " + std::to_string(K));
  }
  if (o >= samples.times.size()) throw PreconditionError("output index out of range");
  const std::size_t Q = samples.points();
  FieldEstimate est;
  for (McField* m : {&est.f, &est.rho}) {
    m->grid = samples.query;
    m->t = samples.times[o];
    m->mean.assign(Q, 0.0);
    m->variance.assign(Q, 0.0);
    m->masked.assign(Q, 0);
    m->count = K;
  }
  for (std::size_t q = 0; q < Q; ++q) {
    double mf = 0, m2f = 0, mr = 0, m2r = 0;
    bool masked = false;
    for (std::size_t k = 0; k < K; ++k) {
      const double xf = samples.psi_f(k, o, q);
      const double xr = samples.psi_rho(k, o, q);
      if (!std::isfinite(xf) || !std::isfinite(xr)) {
        masked = true;
        break;
      }
      const double n = static_cast<double>(k + 1);
      const double df = xf - mf;
      mf += df / n;
      m2f += df * (xf - mf);
      const double dr = xr - mr;
      mr += dr / n;
      m2r += dr * (xr - mr);
    }
    if (masked) {
      est.f.masked[q] = est.rho.masked[q] = 1;
      est.f.mean[q] = est.rho.mean[q] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    est.f.mean[q] = mf;
    est.rho.mean[q] = mr;
    est.f.variance[q] = m2f / static_cast<double>(K - 1);
    est.rho.variance[q] = m2r / static_cast<double>(K - 1);
  }
  return est;
}

void validate_support(const UniformGrid& grid, std::span<const double> values, int margin, const std::string& what) {
  if (values.size() != grid.size()) throw DimensionMismatch("support values do not match the grid");
  double peak = 0.0;
  for (double v : values) peak = std::max(peak, std::abs(v));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.is_interior(i, margin)) continue;
    if (std::abs(values[i]) > 1e-8 * peak) {
      std::ostringstream os;
      os << what << " does not vanish within " << margin << " cells of the label box (|value| = " << std::abs(values[i])
         << " at node " << i << ")";
      throw SupportEscape(os.str());
    }
  }
}

double conserved_quantity(const Ensemble& ens, const UniformGrid& labels, const SpaceTimeField& phi,
                          std::span<const double> rho0h0, std::size_t output) {
  if (rho0h0.size() != labels.size() || ens.labels.size() != labels.size()) {
    throw DimensionMismatch("conserved quantity inputs do not match the label grid");
  }
  double acc = 0.0;
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (rho0h0[a] == 0.0) continue;
    acc += labels.trapezoid_weight(a) * martingale_M(ens, phi, a, output) * rho0h0[a];
  }
  return acc;
}

double entropy_martingale(const FlowChart& chart, const SpaceTimeField& phi, const SpaceTimeField& rho0,
                          const SpaceTimeField& f0, const ConvexH& H, const UniformGrid& query) {
  double acc = 0.0;
  for (std::size_t i = 0; i < query.size(); ++i) {
    const Vec x = query.node(i);
    const Vec a = chart.invert(x);
    const double r0 = rho0(a, 0.0);
    if (!(r0 > 0.0)) throw NonPositiveDensity("rho0 must be strictly positive on the label box");
    const double psi_rho = r0 * std::exp(chart.log_I(a));
    acc += query.trapezoid_weight(i) * psi_rho * H(f0(a, 0.0) / r0) * phi(x, chart.time());
  }
  return acc;
}

JensenVerdict jensen_check(std::span<const double> psi_rho, std::span<const double> psi_f, const ConvexH& H) {
  if (psi_rho.size() != psi_f.size() || psi_rho.empty()) throw DimensionMismatch("Jensen samples must be non-empty and paired");
  double mean_rho = 0.0;
  for (double r : psi_rho) {
    if (!(r > 0.0)) throw NonPositiveDensity("Jensen check needs strictly positive psi_rho samples");
    mean_rho += r;
  }
  const double N = static_cast<double>(psi_rho.size());
  mean_rho /= N;
  double mean_v = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < psi_rho.size(); ++i) {
    const double g = psi_rho[i] / mean_rho;
    const double v = psi_f[i] / mean_rho;
    mean_v += v;
    rhs += g * H(v / g);
  }
  mean_v /= N;
  rhs /= N;
  JensenVerdict out;
  out.lhs = H(mean_v);
  out.rhs = rhs;
  out.slack = 1e-12 * std::max({1.0, std::abs(out.lhs), std::abs(out.rhs)});
  out.holds = out.lhs <= out.rhs + out.slack;
  return out;
}

EntropyReport entropy_decay_check(const PsiSamples& samples, const SpaceTimeField& phi, const ConvexH& H,
                                  const BootstrapOptions& options) {
  const std::size_t K = samples.table.retained.size();
  if (K < kMinRealizations) throw InsufficientRealizations("entropy check needs at least 100 realizations");
  const std::size_t O = samples.times.size();
  const std::size_t Q = samples.points();
  const auto nodes = samples.query.nodes();

  // Per time and node: weight * phi, usable mask.
  std::vector<double> wphi(O * Q);
  std::vector<char> use(Q, 1), was_masked(Q, 0);
  for (std::size_t o = 0; o < O; ++o) {
    const auto est = estimate_fields(samples, o);
    for (std::size_t q = 0; q < Q; ++q) {
      wphi[o * Q + q] = samples.query.trapezoid_weight(q) * phi(nodes[q], samples.times[o]);
      if (est.rho.masked[q]) {
        use[q] = 0;
        was_masked[q] = 1;
        continue;
      }
      if (!(est.rho.mean[q] > 4 * est.rho.se(q))) use[q] = 0;
    }
  }
  std::size_t masked = 0, excluded = 0;
  for (std::size_t q = 0; q < Q; ++q) {
    if (use[q]) continue;
    ++(was_masked[q] ? masked : excluded);
  }
  if (2 * excluded > Q - masked) {
    std::ostringstream os;
    os << "rho estimate does not exceed 4 SE on " << excluded << " of " << Q - masked << " nodes";
    throw SignalTooNoisy(os.str());
  }

  // Column sums over a multiset of realizations (counts[k] copies of k).
  auto series = [&](const std::vector<std::uint32_t>& counts, double total) {
    std::vector<double> G(O, 0.0);
    std::vector<double> sf(Q), sr(Q);
    for (std::size_t o = 0; o < O; ++o) {
      std::fill(sf.begin(), sf.end(), 0.0);
      std::fill(sr.begin(), sr.end(), 0.0);
      for (std::size_t k = 0; k < K; ++k) {
        if (counts[k] == 0) continue;
        const double c = counts[k];
        for (std::size_t q = 0; q < Q; ++q) {
          if (!use[q]) continue;
          sf[q] += c * samples.psi_f(k, o, q);
          sr[q] += c * samples.psi_rho(k, o, q);
        }
      }
      double g = 0.0;
      for (std::size_t q = 0; q < Q; ++q) {
        if (!use[q]) continue;
        const double rho = sr[q] / total;
        if (!(rho > 0.0)) throw NonPositiveDensity("bootstrap rho estimate is not positive");
        g += wphi[o * Q + q] * rho * H(sf[q] / sr[q]);
      }
      G[o] = g;
    }
    return G;
  };

  EntropyReport report;
  report.H = H.name;
  report.times = samples.times;
  report.excluded_nodes = excluded;
  report.values = series(std::vector<std::uint32_t>(K, 1), static_cast<double>(K));

  std::vector<std::vector<double>> boot_G(O), boot_inc(O > 0 ? O - 1 : 0);
  UniformStream stream(options.seed, 0, StreamTag::Bootstrap);
  std::vector<std::uint32_t> counts(K);
  for (std::size_t b = 0; b < options.resamples; ++b) {
    std::fill(counts.begin(), counts.end(), 0u);
    for (std::size_t k = 0; k < K; ++k) ++counts[stream.next_index(K)];
    const auto G = series(counts, static_cast<double>(K));
    for (std::size_t o = 0; o < O; ++o) boot_G[o].push_back(G[o]);
    for (std::size_t o = 0; o + 1 < O; ++o) boot_inc[o].push_back(G[o + 1] - G[o]);
  }
  const double alpha = 0.5 * (1.0 - options.level);
  for (std::size_t o = 0; o < O; ++o) {
    report.lower.push_back(percentile(boot_G[o], alpha));
    report.upper.push_back(percentile(boot_G[o], 1 - alpha));
  }
  report.max_increment = O > 1 ? -std::numeric_limits<double>::infinity() : 0.0;
  for (std::size_t o = 0; o + 1 < O; ++o) {
    const double lo = percentile(boot_inc[o], alpha);
    const double hi = percentile(boot_inc[o], 1 - alpha);
    report.increment_lower.push_back(lo);
    report.increment_upper.push_back(hi);
    report.max_increment = std::max(report.max_increment, report.values[o + 1] - report.values[o]);
    if (lo > 0.0) ++report.positive_increments;
  }
  report.nonincreasing = report.positive_increments == 0;
  return report;
}

}  // namespace stochlag

#include "fedtate/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"
#include "fedtate/rng.hpp"

namespace fedtate {

SourceIfSummary summarize_source_if(std::span<const double> xi_local) {
  return {kernels::sum(xi_local), kernels::sumsq(xi_local), xi_local.size()};
}

namespace {

constexpr double kZ95 = 1.959963984540054;

struct TargetScalars {
  double sum_u = 0.0;    // sum of xi_target_local
  double sumsq_u = 0.0;  // sum of squares
  double sum_c = 0.0;    // sum of (u - t)
  double sumsq_c = 0.0;
  double sum_uc = 0.0;   // sum of u*(u - t)
};

// An empty t means "no target-side component of the source IFs" (the
// transported representation), i.e. t = 0.
TargetScalars target_scalars(std::span<const double> u, std::span<const double> t) {
  TargetScalars s;
  s.sum_u = kernels::sum(u);
  s.sumsq_u = kernels::sumsq(u);
  if (t.empty()) {
    s.sum_c = s.sum_u;
    s.sumsq_c = s.sumsq_u;
    s.sum_uc = s.sumsq_u;
    return s;
  }
  std::vector<double> c(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) c[i] = u[i] - t[i];
  s.sum_c = kernels::sum(c);
  s.sumsq_c = kernels::sumsq(c);
  s.sum_uc = kernels::dot(u, c);
  return s;
}

}  // namespace

QSummaries build_summaries_compressed(std::span<const double> xi_target_local,
                                      std::span<const double> xi_shared_local,
                                      std::span<const SourceIfSummary> sources,
                                      std::span<const double> deltas) {
  const std::size_t ks = sources.size();
  if (deltas.size() != ks) throw Error("build_summaries: delta dimension mismatch");
  const std::size_t n_t = xi_target_local.size();
  if (!xi_shared_local.empty() && xi_shared_local.size() != n_t)
    throw Error("build_summaries: target IF vectors disagree in length");

  std::size_t n_total = n_t;
  for (const auto& s : sources) n_total += s.n;
  const double big_n = static_cast<double>(n_total);
  const double a = big_n / static_cast<double>(n_t);

  const TargetScalars ts = target_scalars(xi_target_local, xi_shared_local);

  QSummaries out;
  out.n_target = n_t;
  out.n_total = n_total;
  out.delta.assign(deltas.begin(), deltas.end());
  out.site_sizes.resize(ks);
  out.s_y = a * a * ts.sumsq_u;
  out.s_xy.resize(ks);
  out.s_x = linalg::Matrix(ks, ks);

  std::vector<double> b(ks);
  for (std::size_t k = 0; k < ks; ++k) {
    out.site_sizes[k] = sources[k].n;
    b[k] = big_n / static_cast<double>(sources[k].n);
  }

  const double sum_c_scaled = a * ts.sum_c;      // sum over T of c_i
  const double sumsq_c_scaled = a * a * ts.sumsq_c;
  for (std::size_t k = 0; k < ks; ++k) {
    out.s_xy[k] = a * a * ts.sum_uc - a * deltas[k] * ts.sum_u;
    for (std::size_t l = k; l < ks; ++l) {
      double v = sumsq_c_scaled - (deltas[k] + deltas[l]) * sum_c_scaled +
                 big_n * deltas[k] * deltas[l];
      if (l == k) {
        v += b[k] * b[k] * sources[k].sumsq + 2.0 * b[k] * deltas[k] * sources[k].sum;
      } else {
        v += deltas[l] * b[k] * sources[k].sum + deltas[k] * b[l] * sources[l].sum;
      }
      out.s_x(k, l) = v;
      out.s_x(l, k) = v;
    }
  }
  return out;
}

QSummaries build_summaries(std::span<const double> xi_target_local,
                           std::span<const double> xi_shared_local,
                           const std::vector<std::vector<double>>& xi_sources_local,
                           std::span<const double> deltas) {
  const std::size_t ks = xi_sources_local.size();
  if (deltas.size() != ks) throw Error("build_summaries: delta dimension mismatch");
  const std::size_t n_t = xi_target_local.size();
  if (!xi_shared_local.empty() && xi_shared_local.size() != n_t)
    throw Error("build_summaries: target IF vectors disagree in length");

  std::size_t n_total = n_t;
  for (const auto& v : xi_sources_local) n_total += v.size();
  const double big_n = static_cast<double>(n_total);
  const double a = big_n / static_cast<double>(n_t);

  QSummaries out;
  out.n_target = n_t;
  out.n_total = n_total;
  out.delta.assign(deltas.begin(), deltas.end());
  out.site_sizes.resize(ks);
  out.s_xy.assign(ks, 0.0);
  out.s_x = linalg::Matrix(ks, ks);
  out.s_y = 0.0;

  std::vector<double> row(ks);
  // Target patients: Y = a*u_i, Xtilde_{i,k} = a*(u_i - t_i) - delta_k.
  for (std::size_t i = 0; i < n_t; ++i) {
    const double y = a * xi_target_local[i];
    const double shared = xi_shared_local.empty() ? 0.0 : xi_shared_local[i];
    const double c = a * (xi_target_local[i] - shared);
    out.s_y += y * y;
    for (std::size_t k = 0; k < ks; ++k) row[k] = c - deltas[k];
    for (std::size_t k = 0; k < ks; ++k) {
      out.s_xy[k] += row[k] * y;
      for (std::size_t l = k; l < ks; ++l) out.s_x(k, l) += row[k] * row[l];
    }
  }
  // Source patients of site k: Y = 0, Xtilde_{i,k} = -b_k v_i - delta_k,
  // Xtilde_{i,l} = -delta_l for l != k.
  for (std::size_t k = 0; k < ks; ++k) {
    out.site_sizes[k] = xi_sources_local[k].size();
    const double bk = big_n / static_cast<double>(xi_sources_local[k].size());
    for (double v : xi_sources_local[k]) {
      for (std::size_t l = 0; l < ks; ++l)
        row[l] = l == k ? -bk * v - deltas[k] : -deltas[l];
      for (std::size_t l = 0; l < ks; ++l)
        for (std::size_t m = l; m < ks; ++m) out.s_x(l, m) += row[l] * row[m];
    }
  }
  for (std::size_t k = 0; k < ks; ++k)
    for (std::size_t l = k + 1; l < ks; ++l) out.s_x(l, k) = out.s_x(k, l);
  return out;
}

std::vector<double> project_simplex_slack(std::span<const double> v) {
  std::vector<double> w(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    w[i] = std::max(v[i], 0.0);
    total += w[i];
  }
  if (total <= 1.0) return w;

  // Project onto the full simplex {z >= 0, sum z = 1}.
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double css = 0.0, theta = 0.0;
  std::size_t rho = 0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    css += u[j];
    const double t = (css - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) {
      rho = j + 1;
      theta = t;
    }
  }
  (void)rho;
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = std::max(v[i] - theta, 0.0);
  return w;
}

namespace {

double q_objective(const QSummaries& s, std::span<const double> z, double lambda,
                   Penalty penalty) {
  const double inv_n2 = 1.0 / (static_cast<double>(s.n_total) *
                               static_cast<double>(s.n_total));
  double quad = s.s_y;
  for (std::size_t k = 0; k < z.size(); ++k) {
    quad -= 2.0 * z[k] * s.s_xy[k];
    for (std::size_t l = 0; l < z.size(); ++l) quad += z[k] * s.s_x(k, l) * z[l];
  }
  double pen = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double p = penalty == Penalty::l1 ? z[k] : z[k] * z[k];
    pen += p * s.delta[k] * s.delta[k];
  }
  return quad * inv_n2 + lambda * pen;
}

}  // namespace

WeightSolution solve_weights(const QSummaries& summ, double lambda,
                             Penalty penalty) {
  const std::size_t ks = summ.s_xy.size();
  WeightSolution sol;
  sol.lambda = lambda;
  sol.penalty = penalty;

  if (ks == 0) {
    sol.eta = {1.0};
    sol.objective_value = q_objective(summ, {}, lambda, penalty);
    return sol;
  }
  for (double d : summ.delta)
    if (!std::isfinite(d)) throw Error("solve_weights: non-finite delta");
  if (!std::isfinite(summ.s_y)) throw Error("solve_weights: non-finite summaries");

  const double inv_n2 = 1.0 / (static_cast<double>(summ.n_total) *
                               static_cast<double>(summ.n_total));
  double max_d2 = 0.0;
  for (double d : summ.delta) max_d2 = std::max(max_d2, d * d);
  double lip = 2.0 * linalg::spectral_bound(summ.s_x) * inv_n2;
  if (penalty == Penalty::l2) lip += 2.0 * lambda * max_d2;
  if (!(lip > 0.0)) lip = 1.0;
  const double step = 1.0 / lip;

  std::vector<double> z(ks, 0.0), grad(ks), trial(ks);
  double q = q_objective(summ, z, lambda, penalty);
  for (std::size_t it = 0; it < 10000; ++it) {
    for (std::size_t k = 0; k < ks; ++k) {
      double g = -2.0 * summ.s_xy[k];
      for (std::size_t l = 0; l < ks; ++l) g += 2.0 * summ.s_x(k, l) * z[l];
      g *= inv_n2;
      const double d2 = summ.delta[k] * summ.delta[k];
      g += penalty == Penalty::l1 ? lambda * d2 : 2.0 * lambda * d2 * z[k];
      grad[k] = g;
    }
    for (std::size_t k = 0; k < ks; ++k) trial[k] = z[k] - step * grad[k];
    std::vector<double> next = project_simplex_slack(trial);
    const double q_next = q_objective(summ, next, lambda, penalty);
    const bool done = std::fabs(q - q_next) <= 1e-12 * std::max(1.0, std::fabs(q));
    z = std::move(next);
    q = q_next;
    if (done) break;
  }

  sol.eta.resize(ks + 1);
  double zsum = 0.0;
  for (std::size_t k = 0; k < ks; ++k) {
    sol.eta[k + 1] = z[k] < 0.0 ? 0.0 : z[k];
    zsum += sol.eta[k + 1];
  }
  sol.eta[0] = std::max(1.0 - zsum, 0.0);
  sol.objective_value = q;
  return sol;
}

double combine(double target_value, std::span<const double> source_values,
               const WeightSolution& weights) {
  double out = target_value;
  for (std::size_t k = 0; k < source_values.size(); ++k)
    out += weights.eta[k + 1] * (source_values[k] - target_value);
  return out;
}

SeCi global_variance(const WeightSolution& weights,
                     std::span<const double> xi_target_local,
                     std::span<const SourceIfSummary> source_ifs,
                     std::size_t n_target, double value) {
  std::size_t n_total = n_target;
  for (const auto& s : source_ifs) n_total += s.n;
  const double big_n = static_cast<double>(n_total);

  const double a = big_n / static_cast<double>(n_target);
  double sigma = weights.eta[0] * weights.eta[0] * a * a *
                 kernels::sumsq(xi_target_local);
  for (std::size_t k = 0; k < source_ifs.size(); ++k) {
    const double bk = big_n / static_cast<double>(source_ifs[k].n);
    sigma += weights.eta[k + 1] * weights.eta[k + 1] * bk * bk * source_ifs[k].sumsq;
  }
  sigma /= big_n;

  SeCi out;
  out.se = std::sqrt(sigma / big_n);
  out.lo = value - kZ95 * out.se;
  out.hi = value + kZ95 * out.se;
  return out;
}

TateEstimate global_tate(const GlobalEstimate& mu1, const GlobalEstimate& mu0) {
  TateEstimate t;
  t.value = mu1.value - mu0.value;
  t.se = std::sqrt(mu1.se * mu1.se + mu0.se * mu0.se);
  t.lo = t.value - kZ95 * t.se;
  t.hi = t.value + kZ95 * t.se;
  return t;
}

namespace {

GlobalEstimate arm_estimate_from(const StudyArmData& data, TreatmentArm arm,
                                 WeightSolution weights) {
  GlobalEstimate est;
  est.arm = arm;
  est.value = combine(data.target_mu, data.source_mu, weights);
  const SeCi se = global_variance(weights, data.xi_target_local, data.source_ifs,
                                  data.xi_target_local.size(), est.value);
  est.se = se.se;
  est.lo = se.lo;
  est.hi = se.hi;
  est.weights = std::move(weights);
  return est;
}

}  // namespace

GlobalResult solve_global(const StudyInputs& inputs, double lambda,
                          Penalty penalty) {
  GlobalResult out;
  out.lambda = lambda;
  for (TreatmentArm arm : {TreatmentArm::control, TreatmentArm::treated}) {
    const std::size_t a = static_cast<std::size_t>(arm_value(arm));
    const StudyArmData& data = inputs.arm[a];
    std::vector<double> deltas(data.source_mu.size());
    for (std::size_t k = 0; k < deltas.size(); ++k)
      deltas[k] = data.source_mu[k] - data.target_mu;
    const QSummaries summ = build_summaries_compressed(
        data.xi_target_local, data.xi_shared_local, data.source_ifs, deltas);
    WeightSolution w = solve_weights(summ, lambda, penalty);
    out.arm[a] = arm_estimate_from(data, arm, std::move(w));
  }
  out.tate = global_tate(out.arm[1], out.arm[0]);
  return out;
}

GlobalResult fixed_weight_global(const StudyInputs& inputs,
                                 std::span<const double> eta_sources) {
  GlobalResult out;
  for (TreatmentArm arm : {TreatmentArm::control, TreatmentArm::treated}) {
    const std::size_t a = static_cast<std::size_t>(arm_value(arm));
    const StudyArmData& data = inputs.arm[a];
    WeightSolution w;
    w.penalty = Penalty::l1;
    w.eta.resize(eta_sources.size() + 1);
    double zsum = 0.0;
    for (std::size_t k = 0; k < eta_sources.size(); ++k) {
      w.eta[k + 1] = eta_sources[k];
      zsum += eta_sources[k];
    }
    w.eta[0] = 1.0 - zsum;
    out.arm[a] = arm_estimate_from(data, arm, std::move(w));
  }
  out.tate = global_tate(out.arm[1], out.arm[0]);
  return out;
}

// ---------------------------------------------------------------------------
// Sample splitting.

namespace {

SiteDataset subset_dataset(const SiteDataset& ds, std::span<const std::size_t> idx) {
  SiteDataset out;
  out.site_id = ds.site_id;
  out.outcome_kind = ds.outcome_kind;
  out.covariates = linalg::Matrix(idx.size(), ds.p());
  out.treatment.resize(idx.size());
  out.outcome.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t j = 0; j < ds.p(); ++j)
      out.covariates(r, j) = ds.covariates(idx[r], j);
    out.treatment[r] = ds.treatment[idx[r]];
    out.outcome[r] = ds.outcome[idx[r]];
  }
  return out;
}

bool both_arms(const SiteDataset& ds) {
  bool a0 = false, a1 = false;
  for (double a : ds.treatment) (a == 1.0 ? a1 : a0) = true;
  return a0 && a1;
}

struct SplitStudy {
  std::vector<SiteDataset> train;  // target first
  std::vector<SiteDataset> val;
};

SplitStudy draw_split(std::span<const SiteDataset> sites, rng::Rng& r) {
  SplitStudy out;
  for (const SiteDataset& ds : sites) {
    std::vector<std::size_t> idx(ds.n());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = idx.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(r.uniform() * i);
      std::swap(idx[i - 1], idx[j < i ? j : i - 1]);
    }
    const std::size_t half = (idx.size() + 1) / 2;
    out.train.push_back(subset_dataset(ds, std::span(idx).subspan(0, half)));
    out.val.push_back(subset_dataset(ds, std::span(idx).subspan(half)));
  }
  return out;
}

struct HalfStudy {
  StudyInputs inputs;
  TargetAnalysis target;                // keeps IF storage alive
  std::vector<SourceAnalysis> sources;  // active only
  std::array<QSummaries, 2> summaries;
};

bool analyze_half(std::span<const SiteDataset> half, const AnalysisOptions& opts,
                  HalfStudy& out) {
  try {
    out.target = analyze_target(half[0], opts);
  } catch (const Error&) {
    return false;
  }
  TargetMoments moments{out.target.cov_means, out.target.n};
  out.sources.clear();
  for (std::size_t k = 1; k < half.size(); ++k) {
    SourceAnalysis sa = analyze_source(half[k], moments, out.target.or_mean, opts);
    if (!sa.dropped) out.sources.push_back(std::move(sa));
  }
  out.inputs = StudyInputs{};
  out.inputs.n_target = out.target.n;
  for (const SourceAnalysis& sa : out.sources)
    out.inputs.source_ids.push_back(sa.site_id);
  for (std::size_t a = 0; a < 2; ++a) {
    StudyArmData& arm = out.inputs.arm[a];
    arm.target_mu = out.target.mu_hat[a];
    arm.xi_target_local = out.target.xi_target[a];
    for (const SourceAnalysis& sa : out.sources) {
      arm.source_mu.push_back(sa.mu_hat[a]);
      arm.source_ifs.push_back({sa.if_sum[a], sa.if_sumsq[a], sa.n});
    }
  }
  return true;
}

// Restricts a half study to the named sources (aggregation order preserved)
// and builds per-arm summaries over that set.
void restrict_and_summarize(HalfStudy& h, const std::vector<std::string>& keep) {
  StudyInputs inputs;
  inputs.n_target = h.inputs.n_target;
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < h.inputs.source_ids.size(); ++k)
    if (std::find(keep.begin(), keep.end(), h.inputs.source_ids[k]) != keep.end()) {
      idx.push_back(k);
      inputs.source_ids.push_back(h.inputs.source_ids[k]);
    }
  for (std::size_t a = 0; a < 2; ++a) {
    StudyArmData& arm = inputs.arm[a];
    const StudyArmData& src = h.inputs.arm[a];
    arm.target_mu = src.target_mu;
    arm.xi_target_local = src.xi_target_local;
    for (std::size_t k : idx) {
      arm.source_mu.push_back(src.source_mu[k]);
      arm.source_ifs.push_back(src.source_ifs[k]);
    }
  }
  h.inputs = std::move(inputs);
  for (std::size_t a = 0; a < 2; ++a) {
    const StudyArmData& arm = h.inputs.arm[a];
    std::vector<double> deltas(arm.source_mu.size());
    for (std::size_t k = 0; k < deltas.size(); ++k)
      deltas[k] = arm.source_mu[k] - arm.target_mu;
    h.summaries[a] = build_summaries_compressed(arm.xi_target_local, {},
                                                arm.source_ifs, deltas);
  }
}

struct SplitEval {
  HalfStudy train;
  HalfStudy val;
};

// Builds the training-half and validation-half studies for one split over a
// common set of active sources. Returns false when infeasible.
bool eval_split(std::span<const SiteDataset> sites, rng::Rng& r,
                const AnalysisOptions& opts, SplitEval& out) {
  SplitStudy split = draw_split(sites, r);
  for (const SiteDataset& ds : split.train)
    if (!both_arms(ds)) return false;
  for (const SiteDataset& ds : split.val)
    if (!both_arms(ds)) return false;

  if (!analyze_half(split.train, opts, out.train)) return false;
  if (!analyze_half(split.val, opts, out.val)) return false;

  std::vector<std::string> common;
  for (const std::string& id : out.train.inputs.source_ids)
    if (std::find(out.val.inputs.source_ids.begin(), out.val.inputs.source_ids.end(),
                  id) != out.val.inputs.source_ids.end())
      common.push_back(id);
  restrict_and_summarize(out.train, common);
  restrict_and_summarize(out.val, common);
  return true;
}

}  // namespace

namespace {

// Squared error of one half's combined per-arm estimates against the other
// half's target-only estimates, summed over arms. Arm-level so that an
// equal-arms discrepancy (which cancels in the TATE) still registers.
double split_mse(const HalfStudy& fit_half, const HalfStudy& score_half,
                 double lambda, Penalty pen) {
  double crit = 0.0;
  for (std::size_t a = 0; a < 2; ++a) {
    const WeightSolution w = solve_weights(fit_half.summaries[a], lambda, pen);
    const double comb =
        combine(fit_half.inputs.arm[a].target_mu,
                fit_half.inputs.arm[a].source_mu, w);
    const double d = comb - score_half.inputs.arm[a].target_mu;
    crit += d * d;
  }
  return crit;
}

}  // namespace

LambdaPair select_lambda_both(std::span<const SiteDataset> sites,
                              std::span<const double> grid,
                              std::size_t n_splits, std::uint64_t seed,
                              const AnalysisOptions& opts) {
  if (grid.empty()) throw Error("select_lambda: empty grid");
  if (grid.size() == 1) return {grid[0], grid[0]};

  // Per-split criterion: out-of-sample squared error of the combined
  // estimate against the held-out target-only estimate, averaged over both
  // half-directions. Selection uses the one-standard-error rule (smallest
  // lambda whose mean criterion is within one SE of the minimum), which
  // keeps the choice stable when the criterion is flat in lambda.
  std::vector<std::vector<double>> crit_l1(grid.size()), crit_l2(grid.size());
  for (std::size_t s = 0; s < n_splits; ++s) {
    rng::Rng r(rng::mix_seed(seed, s, "split"));
    SplitEval ev;
    bool ok = false;
    for (int attempt = 0; attempt < 20 && !ok; ++attempt)
      ok = eval_split(sites, r, opts, ev);
    if (!ok) throw Error("split infeasibility after 20 redraws");

    for (std::size_t g = 0; g < grid.size(); ++g) {
      for (Penalty pen : {Penalty::l1, Penalty::l2}) {
        const double c = 0.5 * (split_mse(ev.train, ev.val, grid[g], pen) +
                                split_mse(ev.val, ev.train, grid[g], pen));
        (pen == Penalty::l1 ? crit_l1 : crit_l2)[g].push_back(c);
      }
    }
  }

  const auto pick = [&](const std::vector<std::vector<double>>& crit) {
    std::vector<double> mean(grid.size(), 0.0), se(grid.size(), 0.0);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const auto& v = crit[g];
      for (double c : v) mean[g] += c;
      mean[g] /= static_cast<double>(v.size());
      if (v.size() > 1) {
        double ss = 0.0;
        for (double c : v) ss += (c - mean[g]) * (c - mean[g]);
        se[g] = std::sqrt(ss / static_cast<double>(v.size() - 1) /
                          static_cast<double>(v.size()));
      }
    }
    std::size_t arg = 0;
    for (std::size_t g = 1; g < grid.size(); ++g)
      if (mean[g] < mean[arg]) arg = g;
    const double band = mean[arg] + se[arg];
    for (std::size_t g = 0; g < grid.size(); ++g)
      if (mean[g] <= band) return grid[g];
    return grid[arg];
  };
  return {pick(crit_l1), pick(crit_l2)};
}

double select_lambda(std::span<const SiteDataset> sites,
                     std::span<const double> grid, std::size_t n_splits,
                     std::uint64_t seed, Penalty penalty,
                     const AnalysisOptions& opts) {
  const LambdaPair pair = select_lambda_both(sites, grid, n_splits, seed, opts);
  return penalty == Penalty::l1 ? pair.l1 : pair.l2;
}

}  // namespace fedtate

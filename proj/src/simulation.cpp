#include "fedtate/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"

namespace fedtate {

Specification parse_specification(const std::string& s) {
  if (s == "I" || s == "1") return Specification::I;
  if (s == "II" || s == "2") return Specification::II;
  if (s == "III" || s == "3") return Specification::III;
  if (s == "IV" || s == "4") return Specification::IV;
  if (s == "V" || s == "5") return Specification::V;
  throw ValidationError("unknown specification: " + s);
}

Density parse_density(const std::string& s) {
  if (s == "dense") return Density::dense;
  if (s == "sparse") return Density::sparse;
  throw ValidationError("unknown density: " + s);
}

std::string to_string(Specification s) {
  switch (s) {
    case Specification::I: return "I";
    case Specification::II: return "II";
    case Specification::III: return "III";
    case Specification::IV: return "IV";
    case Specification::V: return "V";
  }
  return "?";
}

std::string to_string(Density d) {
  return d == Density::dense ? "dense" : "sparse";
}

const char* estimator_name(EstimatorKind e) {
  switch (e) {
    case EstimatorKind::target_only: return "target_only";
    case EstimatorKind::ss_naive: return "ss_naive";
    case EstimatorKind::ss: return "ss";
    case EstimatorKind::global_l2: return "global_l2";
    case EstimatorKind::global_l1: return "global_l1";
  }
  return "?";
}

const char* estimator_label(EstimatorKind e) {
  switch (e) {
    case EstimatorKind::target_only: return "Target-Only";
    case EstimatorKind::ss_naive: return "SS (naive)";
    case EstimatorKind::ss: return "SS";
    case EstimatorKind::global_l2: return "GLOBAL-l2";
    case EstimatorKind::global_l1: return "GLOBAL-l1";
  }
  return "?";
}

std::vector<double> default_lambda_grid() {
  return {0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0};
}

std::vector<double> sample_skew_normal(const SkewNormalParams& params,
                                       std::size_t n, rng::Rng& r) {
  const double d = params.skew / std::sqrt(1.0 + params.skew * params.skew);
  const double c = std::sqrt(1.0 - d * d);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z0 = r.normal();
    const double z1 = r.normal();
    out[i] = params.location + params.scale * (d * std::fabs(z0) + c * z1);
  }
  return out;
}

std::vector<std::size_t> sample_site_sizes(std::size_t k_sites, rng::Rng& r) {
  std::vector<std::size_t> sizes(k_sites > 0 ? k_sites - 1 : 0);
  for (auto& s : sizes) {
    const double g = std::max(r.gamma(16.0, 0.08), 50.0);
    s = static_cast<std::size_t>(std::llround(g));
  }
  return sizes;
}

namespace {

std::vector<double> linspace(double a, double b, std::size_t p) {
  std::vector<double> v(p);
  if (p == 1) {
    v[0] = a;
    return v;
  }
  for (std::size_t j = 0; j < p; ++j)
    v[j] = a + (b - a) * static_cast<double>(j) / static_cast<double>(p - 1);
  return v;
}

// R type-7 quantile (linear interpolation of order statistics).
double quantile_type7(std::vector<double> v, double prob) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * prob;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

bool quadratic_outcome(Specification s) {
  return s == Specification::II || s == Specification::IV || s == Specification::V;
}

}  // namespace

DgpParams dgp_params(const DgpConfig& cfg, rng::Rng& r) {
  if (cfg.k_sites < 2) throw ValidationError("dgp: K must be >= 2");
  if (cfg.p_cov < 2) throw ValidationError("dgp: P must be >= 2");
  const std::size_t p = cfg.p_cov;
  const std::size_t k = cfg.k_sites;

  DgpParams out;
  out.beta10 = linspace(0.4, 1.2, p);
  for (double& v : out.beta10) v /= static_cast<double>(p);
  out.beta11 = out.beta10;
  for (double& v : out.beta11) v *= 3.0;
  out.beta20.assign(p, 0.0);
  out.beta21.assign(p, 0.0);
  if (quadratic_outcome(cfg.spec)) {
    out.beta20 = linspace(0.2, 0.4, p);
    out.beta21 = out.beta20;
  }
  out.alpha1 = linspace(0.5, -0.5, p);
  out.alpha2.assign(p, 0.0);
  if (cfg.spec == Specification::III || cfg.spec == Specification::IV ||
      cfg.spec == Specification::V)
    out.alpha2 = linspace(0.15, -0.15, p);
  out.noise_sd = 1.5 * static_cast<double>(p);

  out.site_sizes.resize(k);
  out.site_sizes[0] = cfg.target_n;
  const std::vector<std::size_t> source_sizes = sample_site_sizes(k, r);
  for (std::size_t i = 0; i + 1 < k; ++i) out.site_sizes[i + 1] = source_sizes[i];

  std::vector<double> sizes_d(out.site_sizes.begin(), out.site_sizes.end());
  const double q1 = quantile_type7(sizes_d, 0.25);
  const double q3 = quantile_type7(sizes_d, 0.75);
  const double kf = static_cast<double>(k);
  const double sparse_hi = quantile_type7(sizes_d, (65.0 - kf / 10.0) / 100.0);
  const double sparse_lo = quantile_type7(sizes_d, (35.0 + kf / 10.0) / 100.0);

  // Location parameters: the dense setting spreads them over all P; the
  // sparse setting keeps the two continuous covariates at their P=2 values.
  const bool sparse = cfg.density == Density::sparse;
  const std::size_t n_cont = sparse && p > 2 ? 2 : p;
  std::vector<double> xi(p, 0.0);
  for (std::size_t j = 0; j < n_cont; ++j) {
    const double denom = sparse ? 1.0 : static_cast<double>(p - 1);
    xi[j] = 0.15 + 0.05 * (1.0 - static_cast<double>(j + 1)) / denom;
  }

  out.skew.assign(k, std::vector<double>(p, 0.0));
  out.bernoulli_mean.assign(k, {});
  out.alpha2_active.assign(k, false);
  for (std::size_t s = 0; s < k; ++s) {
    const double nk = sizes_d[s];
    if (s > 0) {
      if (sparse) {
        if (nk >= sparse_hi || nk <= sparse_lo)
          for (std::size_t j = 0; j < std::min<std::size_t>(2, n_cont); ++j)
            out.skew[s][j] = 2.0;
      } else {
        double a = 0.0;
        if (nk >= q3)
          a = 3.0 * 2.0 / static_cast<double>(p);
        else if (nk <= q1)
          a = -1.0 * 2.0 / static_cast<double>(p);
        for (std::size_t j = 0; j < p; ++j) out.skew[s][j] = a;
      }
    }
    if (sparse && p > 2) {
      out.bernoulli_mean[s].assign(p, 0.0);
      for (std::size_t j = 2; j < p; ++j) {
        out.bernoulli_mean[s][j] =
            s == 0 ? 0.5
                   : 0.45 + 0.1 * (static_cast<double>(j + 1) - 3.0) / 7.0;
      }
    }
    switch (cfg.spec) {
      case Specification::III:
      case Specification::IV:
        out.alpha2_active[s] = true;
        break;
      case Specification::V:
        out.alpha2_active[s] = s > 0 && (nk >= q3 || nk <= q1);
        break;
      default:
        break;
    }
  }

  out.mu1.assign(p, 0.0);
  for (std::size_t j = 0; j < p; ++j) {
    const bool bern = sparse && p > 2 && j >= 2;
    out.mu1[j] = bern ? 0.5 : xi[j];
  }
  out.site_locations = xi;
  return out;
}

std::vector<SiteDataset> generate_sites(const DgpConfig& cfg, rng::Rng& r) {
  DgpParams par = dgp_params(cfg, r);
  const std::size_t p = cfg.p_cov;
  const std::size_t k = cfg.k_sites;
  const bool sparse = cfg.density == Density::sparse;

  std::vector<SiteDataset> sites;
  sites.reserve(k);
  std::vector<double> mu1 = par.mu1;

  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t n = par.site_sizes[s];
    SiteDataset ds;
    if (s == 0) {
      ds.site_id = "T";
    } else {
      ds.site_id = "S" + std::string(s < 10 ? "0" : "") + std::to_string(s);
    }
    ds.outcome_kind = OutcomeKind::continuous;
    ds.covariates = linalg::Matrix(n, p);
    for (std::size_t j = 0; j < p; ++j) {
      const bool bern = sparse && p > 2 && j >= 2;
      auto col = ds.covariates.col(j);
      if (bern) {
        const double theta = par.bernoulli_mean[s][j];
        for (std::size_t i = 0; i < n; ++i) col[i] = r.bernoulli(theta) ? 1.0 : 0.0;
      } else {
        SkewNormalParams sn{par.site_locations[j], 1.0, par.skew[s][j]};
        auto draws = sample_skew_normal(sn, n, r);
        std::copy(draws.begin(), draws.end(), col.begin());
      }
    }
    if (s == 0 && cfg.mu1_empirical) mu1 = covariate_means(ds);

    // Propensity and arms; redraw arms (not covariates) when one is empty.
    std::vector<double> lp(n, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
      kernels::scale_add(par.alpha1[j], ds.covariates.col(j), lp);
      if (par.alpha2_active[s] && par.alpha2[j] != 0.0) {
        auto col = ds.covariates.col(j);
        for (std::size_t i = 0; i < n; ++i)
          lp[i] += par.alpha2[j] * col[i] * col[i];
      }
    }
    std::vector<double> prob(n);
    kernels::expit_vec(lp, prob);
    ds.treatment.assign(n, 0.0);
    for (int attempt = 0; attempt < 20; ++attempt) {
      std::size_t n1 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        ds.treatment[i] = r.bernoulli(prob[i]) ? 1.0 : 0.0;
        n1 += ds.treatment[i] == 1.0;
      }
      if (n1 > 0 && n1 < n) break;
    }

    ds.outcome.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double lin1 = 3.0, lin0 = 0.0;
      for (std::size_t j = 0; j < p; ++j) {
        const double x = ds.covariates(i, j);
        const double xc = x - mu1[j];
        lin1 += xc * par.beta11[j] + x * x * par.beta21[j];
        lin0 += xc * par.beta10[j] + x * x * par.beta20[j];
      }
      const double eps = r.normal(0.0, par.noise_sd);
      ds.outcome[i] = ds.treatment[i] == 1.0 ? lin1 + eps : lin0 + eps;
    }
    sites.push_back(std::move(ds));
  }
  return sites;
}

TruthOracle true_tate_oracle(const DgpConfig& cfg, std::size_t draws) {
  DgpConfig c = cfg;
  rng::Rng setup(rng::mix_seed(0x7472757468ULL, 0, "dgp-params"));
  DgpParams par = dgp_params(c, setup);  // site sizes irrelevant for truth
  const std::size_t p = cfg.p_cov;
  const bool sparse = cfg.density == Density::sparse;

  rng::Rng r(rng::mix_seed(0x7472757468ULL, 1, "truth-oracle"));
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    double g = 3.0;
    for (std::size_t j = 0; j < p; ++j) {
      const bool bern = sparse && p > 2 && j >= 2;
      const double x = bern ? (r.bernoulli(0.5) ? 1.0 : 0.0)
                            : par.site_locations[j] + r.normal();
      g += (x - par.mu1[j]) * (par.beta11[j] - par.beta10[j]) +
           x * x * (par.beta21[j] - par.beta20[j]);
    }
    const double delta = g - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (g - mean);
  }
  TruthOracle out;
  out.value = mean;
  out.se = std::sqrt(m2 / static_cast<double>(draws - 1) /
                     static_cast<double>(draws));
  return out;
}

double true_tate(const DgpConfig& cfg) {
  return true_tate_oracle(cfg, 10'000'000).value;
}

namespace {

StudyInputs make_inputs(const TargetAnalysis& target,
                        const std::vector<const SourceAnalysis*>& active) {
  StudyInputs inputs;
  inputs.n_target = target.n;
  for (const SourceAnalysis* sa : active) inputs.source_ids.push_back(sa->site_id);
  for (std::size_t a = 0; a < 2; ++a) {
    StudyArmData& arm = inputs.arm[a];
    arm.target_mu = target.mu_hat[a];
    arm.xi_target_local = target.xi_target[a];

    for (const SourceAnalysis* sa : active) {
      arm.source_mu.push_back(sa->mu_hat[a]);
      arm.source_ifs.push_back({sa->if_sum[a], sa->if_sumsq[a], sa->n});
    }
  }
  return inputs;
}

EstimatorResult from_global(const GlobalResult& g) {
  EstimatorResult r;
  r.estimate = g.tate.value;
  r.se = g.tate.se;
  r.lo = g.tate.lo;
  r.hi = g.tate.hi;
  r.ok = true;
  return r;
}

std::vector<double> size_weights(const std::vector<const SourceAnalysis*>& active,
                                 std::size_t n_target) {
  double total = static_cast<double>(n_target);
  for (const SourceAnalysis* sa : active) total += static_cast<double>(sa->n);
  std::vector<double> eta;
  for (const SourceAnalysis* sa : active)
    eta.push_back(static_cast<double>(sa->n) / total);
  return eta;
}

}  // namespace

ReplicationResult run_replication(const StudyConfig& cfg, std::size_t rep_index) {
  ReplicationResult out;
  const std::vector<double> grid =
      cfg.lambda_grid.empty() ? default_lambda_grid() : cfg.lambda_grid;

  rng::Rng dgp_rng(rng::mix_seed(cfg.master_seed, rep_index, "dgp"));
  std::vector<SiteDataset> sites;
  TargetAnalysis target;
  try {
    sites = generate_sites(cfg.dgp, dgp_rng);
    target = analyze_target(sites[0], cfg.analysis);
  } catch (const std::exception& e) {
    for (auto& r : out.by_estimator) {
      r.ok = false;
      r.error = e.what();
    }
    return out;
  }

  const TargetMoments moments{target.cov_means, target.n};
  std::vector<SourceAnalysis> tilted, naive;
  for (std::size_t k = 1; k < sites.size(); ++k) {
    tilted.push_back(analyze_source(sites[k], moments, target.or_mean,
                                    cfg.analysis, TiltPolicy::solve));
    naive.push_back(analyze_source(sites[k], moments, target.or_mean,
                                   cfg.analysis, TiltPolicy::identity));
  }
  std::vector<const SourceAnalysis*> tilted_active, naive_active;
  for (const auto& sa : tilted)
    if (!sa.dropped) tilted_active.push_back(&sa);
  for (const auto& sa : naive)
    if (!sa.dropped) naive_active.push_back(&sa);

  const StudyInputs tilted_inputs = make_inputs(target, tilted_active);
  const StudyInputs naive_inputs = make_inputs(target, naive_active);
  const StudyInputs target_inputs = make_inputs(target, {});

  auto run = [&](EstimatorKind kind, auto&& fn) {
    auto& slot = out.by_estimator[static_cast<std::size_t>(kind)];
    try {
      slot = fn();
    } catch (const std::exception& e) {
      slot.ok = false;
      slot.error = e.what();
    }
  };

  run(EstimatorKind::target_only, [&] {
    return from_global(solve_global(target_inputs, 0.0, Penalty::l1));
  });
  run(EstimatorKind::ss, [&] {
    return from_global(fixed_weight_global(
        tilted_inputs, size_weights(tilted_active, target.n)));
  });
  run(EstimatorKind::ss_naive, [&] {
    return from_global(fixed_weight_global(
        naive_inputs, size_weights(naive_active, target.n)));
  });

  LambdaPair lambda{grid[0], grid[0]};
  bool lambda_ok = true;
  if (grid.size() > 1) {
    try {
      lambda = select_lambda_both(sites, grid, cfg.n_splits,
                                  rng::mix_seed(cfg.master_seed, rep_index, "split"),
                                  cfg.analysis);
    } catch (const std::exception& e) {
      lambda_ok = false;
      for (EstimatorKind kind : {EstimatorKind::global_l1, EstimatorKind::global_l2}) {
        auto& slot = out.by_estimator[static_cast<std::size_t>(kind)];
        slot.ok = false;
        slot.error = e.what();
      }
    }
  }
  if (lambda_ok) {
    run(EstimatorKind::global_l1, [&] {
      return from_global(solve_global(tilted_inputs, lambda.l1, Penalty::l1));
    });
    run(EstimatorKind::global_l2, [&] {
      return from_global(solve_global(tilted_inputs, lambda.l2, Penalty::l2));
    });
  }
  return out;
}

StudyReport run_study(const StudyConfig& cfg) {
  if (cfg.n_reps == 0) throw ValidationError("n_reps must be positive");
  StudyReport report;
  const TruthOracle truth = true_tate_oracle(cfg.dgp, 10'000'000);
  report.truth = truth.value;
  report.truth_se = truth.se;

  report.replications.assign(cfg.n_reps, {});
  const std::size_t workers = std::max<std::size_t>(1, cfg.workers);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cfg.n_reps) return;
      report.replications[i] = run_replication(cfg, i);
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t e = 0; e < kNumEstimators; ++e) {
    MetricsRow row;
    row.estimator = estimator_name(static_cast<EstimatorKind>(e));
    double sum = 0.0, sumsq_dev = 0.0, len = 0.0;
    std::size_t ok = 0, covered = 0;
    for (const auto& rep : report.replications) {
      const EstimatorResult& r = rep.by_estimator[e];
      if (!r.ok) {
        ++row.n_fail;
        continue;
      }
      ++ok;
      sum += r.estimate;
      const double dev = r.estimate - report.truth;
      sumsq_dev += dev * dev;
      len += r.hi - r.lo;
      if (r.lo <= report.truth && report.truth <= r.hi) ++covered;
    }
    if (ok > 0) {
      row.bias = std::fabs(sum / static_cast<double>(ok) - report.truth);
      row.rmse = std::sqrt(sumsq_dev / static_cast<double>(ok));
      row.coverage = 100.0 * static_cast<double>(covered) / static_cast<double>(ok);
      row.ci_length = len / static_cast<double>(ok);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::pair<double, double> fixed_effects_tate(std::span<const SiteDataset> sites,
                                             std::size_t target_index) {
  if (sites.empty()) throw ValidationError("fixed_effects: no sites");
  const std::size_t k = sites.size();
  const std::size_t p = sites[0].p();
  std::size_t n = 0;
  for (const auto& ds : sites) n += ds.n();
  const std::size_t dim = 2 * k + p;

  linalg::Matrix x(n, dim);
  std::vector<double> y(n);
  std::size_t row = 0;
  for (std::size_t s = 0; s < k; ++s) {
    const SiteDataset& ds = sites[s];
    for (std::size_t i = 0; i < ds.n(); ++i, ++row) {
      x(row, s) = 1.0;
      x(row, k + s) = ds.treatment[i];
      for (std::size_t j = 0; j < p; ++j) x(row, 2 * k + j) = ds.covariates(i, j);
      y[row] = ds.outcome[i];
    }
  }

  linalg::Matrix gram = linalg::xtx(x);
  std::vector<double> xty = linalg::xtv(x, y);
  linalg::Cholesky chol(gram);
  const std::vector<double> coef = chol.solve(xty);

  std::vector<double> fitted = linalg::matvec(x, coef);
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - fitted[i];
    rss += r * r;
  }
  const double sigma2 = rss / static_cast<double>(n - dim);
  const linalg::Matrix inv = chol.inverse();
  const std::size_t j = k + target_index;
  return {coef[j], std::sqrt(sigma2 * inv(j, j))};
}

}  // namespace fedtate

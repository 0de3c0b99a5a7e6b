#include "fedtate/estimators.hpp"

#include <cmath>

#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"

namespace fedtate {

IfMode default_if_mode(OutcomeKind kind) {
  return kind == OutcomeKind::continuous ? IfMode::general : IfMode::simple;
}

namespace {

double row_dot(const linalg::Matrix& design, std::size_t i,
               std::span<const double> coef) {
  double acc = 0.0;
  for (std::size_t j = 0; j < design.cols(); ++j) acc += design(i, j) * coef[j];
  return acc;
}

void require_continuous_for_general(IfMode mode, OutcomeKind kind) {
  if (mode == IfMode::general && kind == OutcomeKind::binary)
    throw FitError("general corrections implemented for continuous outcome only");
}

// d(1/pi_a)/d(alpha' x) as a scalar multiplier of the design row, at the
// unclipped fitted probability.
inline double inv_prob_slope(double lp, TreatmentArm arm) {
  return arm == TreatmentArm::treated ? -std::exp(-lp) : std::exp(lp);
}

}  // namespace

double target_or_mean(const SiteDataset& ds_t, const OutcomeFits& ors,
                      TreatmentArm arm) {
  std::vector<double> m = predict_outcome(ors.arm(arm), ds_t.covariates);
  return kernels::sum(m) / static_cast<double>(m.size());
}

std::vector<double> compute_target_if(const SiteDataset& ds_t,
                                      const LogisticFit& ps,
                                      const OutcomeFits& ors, TreatmentArm arm,
                                      double clip, IfMode mode) {
  require_continuous_for_general(mode, ds_t.outcome_kind);
  const std::size_t n = ds_t.n();
  const double inv_n = 1.0 / static_cast<double>(n);

  const std::vector<double> ind = arm_indicator(ds_t, arm);
  const std::vector<double> pi =
      predict_propensity(ps, ds_t.covariates, arm, clip);
  const std::vector<double> m = predict_outcome(ors.arm(arm), ds_t.covariates);

  double mu = 0.0;
  std::vector<double> xi(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double aipw_i =
        m[i] + ind[i] / pi[i] * (ds_t.outcome[i] - m[i]);
    mu += aipw_i;
    xi[i] = aipw_i;
  }
  mu *= inv_n;
  for (double& v : xi) v -= mu;
  if (mode == IfMode::simple) return xi;

  const linalg::Matrix design = augmented_design(ds_t.covariates);
  const std::size_t d = design.cols();

  // Propensity refit term: D1' IF_i(alpha).
  std::vector<double> lp = linear_predictor(ps.coefficients, ds_t.covariates);
  std::vector<double> p1(n), w(n);
  kernels::expit_vec(lp, p1);
  kernels::logit_weights(p1, w);
  linalg::Matrix h_alpha = linalg::xtwx(design, w);
  std::vector<double> d1(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (ind[i] != 1.0) continue;
    const double f = (ds_t.outcome[i] - m[i]) * inv_prob_slope(lp[i], arm);
    for (std::size_t j = 0; j < d; ++j) d1[j] += f * design(i, j);
  }
  for (double& v : d1) v *= inv_n;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) h_alpha(r, c) *= inv_n;
  const std::vector<double> c_alpha = linalg::Cholesky(h_alpha).solve(d1);

  // Outcome refit term: -D2' IF_i(beta).
  linalg::Matrix m_arm = linalg::xtwx(design, ind);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) m_arm(r, c) *= inv_n;
  std::vector<double> d2(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = ind[i] / pi[i] - 1.0;
    for (std::size_t j = 0; j < d; ++j) d2[j] += f * design(i, j);
  }
  for (double& v : d2) v *= inv_n;
  const std::vector<double> c_beta = linalg::Cholesky(m_arm).solve(d2);

  for (std::size_t i = 0; i < n; ++i) {
    const double score_a = ds_t.treatment[i] - p1[i];
    xi[i] += row_dot(design, i, c_alpha) * score_a;
    if (ind[i] == 1.0)
      xi[i] -= row_dot(design, i, c_beta) * (ds_t.outcome[i] - m[i]);
  }
  return xi;
}

ArmEstimate target_aipw(const SiteDataset& ds_t, const LogisticFit& ps,
                        const OutcomeFits& ors, TreatmentArm arm, double clip,
                        IfMode mode) {
  const std::vector<double> ind = arm_indicator(ds_t, arm);
  if (kernels::sum(ind) == 0.0)
    throw FitError(std::string("no arm-") +
                   (arm == TreatmentArm::treated ? "treated" : "control") +
                   " patients in target");
  const std::vector<double> pi =
      predict_propensity(ps, ds_t.covariates, arm, clip);
  const std::vector<double> m = predict_outcome(ors.arm(arm), ds_t.covariates);

  ArmEstimate est;
  est.arm = arm;
  est.site_id = ds_t.site_id;
  est.n_contributing = ds_t.n();
  double acc = 0.0;
  for (std::size_t i = 0; i < ds_t.n(); ++i)
    acc += m[i] + ind[i] / pi[i] * (ds_t.outcome[i] - m[i]);
  est.value = acc / static_cast<double>(ds_t.n());
  est.per_patient_if = compute_target_if(ds_t, ps, ors, arm, clip, mode);
  return est;
}

double augmentation_term(const SiteDataset& ds_k, const TiltFit& tilt,
                         const LogisticFit& ps_k, const OutcomeFits& or_k,
                         TreatmentArm arm, double clip) {
  const std::vector<double> ind = arm_indicator(ds_k, arm);
  if (kernels::sum(ind) == 0.0)
    throw FitError(std::string("no arm-") +
                   (arm == TreatmentArm::treated ? "treated" : "control") +
                   " patients in source");
  const std::vector<double> omega = density_ratio_weights(tilt, ds_k.covariates);
  const std::vector<double> pi =
      predict_propensity(ps_k, ds_k.covariates, arm, clip);
  const std::vector<double> m = predict_outcome(or_k.arm(arm), ds_k.covariates);
  double acc = 0.0;
  for (std::size_t i = 0; i < ds_k.n(); ++i)
    acc += ind[i] * omega[i] / pi[i] * (ds_k.outcome[i] - m[i]);
  return acc / static_cast<double>(ds_k.n());
}

std::vector<double> source_if_target_component(const SiteDataset& ds_t,
                                               const OutcomeFits& or_t,
                                               TreatmentArm arm, IfMode mode) {
  require_continuous_for_general(mode, ds_t.outcome_kind);
  const std::size_t n = ds_t.n();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> m = predict_outcome(or_t.arm(arm), ds_t.covariates);
  const double mbar = kernels::sum(m) * inv_n;
  std::vector<double> xi(n);
  for (std::size_t i = 0; i < n; ++i) xi[i] = m[i] - mbar;
  if (mode == IfMode::simple) return xi;

  // Refit correction for the target outcome parameters: xbar' IF_i(beta_T).
  const linalg::Matrix design = augmented_design(ds_t.covariates);
  const std::size_t d = design.cols();
  const std::vector<double> ind = arm_indicator(ds_t, arm);
  linalg::Matrix m_arm = linalg::xtwx(design, ind);
  std::vector<double> xbar(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    xbar[j] = kernels::sum(design.col(j)) * inv_n;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) m_arm(r, c) *= inv_n;
  const std::vector<double> c_beta = linalg::Cholesky(m_arm).solve(xbar);
  for (std::size_t i = 0; i < n; ++i)
    if (ind[i] == 1.0)
      xi[i] += row_dot(design, i, c_beta) * (ds_t.outcome[i] - m[i]);
  return xi;
}

std::vector<double> source_if_source_component(const SiteDataset& ds_k,
                                               const TiltFit& tilt,
                                               const LogisticFit& ps_k,
                                               const OutcomeFits& or_k,
                                               TreatmentArm arm, double clip,
                                               IfMode mode,
                                               bool tilt_estimated) {
  require_continuous_for_general(mode, ds_k.outcome_kind);
  const std::size_t n = ds_k.n();
  const double inv_n = 1.0 / static_cast<double>(n);

  const std::vector<double> ind = arm_indicator(ds_k, arm);
  const std::vector<double> omega = density_ratio_weights(tilt, ds_k.covariates);
  const std::vector<double> pi =
      predict_propensity(ps_k, ds_k.covariates, arm, clip);
  const std::vector<double> m = predict_outcome(or_k.arm(arm), ds_k.covariates);

  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = ind[i] * omega[i] / pi[i] * (ds_k.outcome[i] - m[i]);
  const double aug = kernels::sum(g) * inv_n;
  std::vector<double> xi(n);
  for (std::size_t i = 0; i < n; ++i) xi[i] = g[i] - aug;
  if (mode == IfMode::simple) return xi;

  const linalg::Matrix design = augmented_design(ds_k.covariates);
  const std::size_t d = design.cols();

  // Outcome refit: -D2k' IF_i(beta_k).
  linalg::Matrix m_arm = linalg::xtwx(design, ind);
  std::vector<double> d2k(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (ind[i] != 1.0) continue;
    const double f = omega[i] / pi[i];
    for (std::size_t j = 0; j < d; ++j) d2k[j] += f * design(i, j);
  }
  for (double& v : d2k) v *= inv_n;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) m_arm(r, c) *= inv_n;
  const std::vector<double> c_beta = linalg::Cholesky(m_arm).solve(d2k);

  // Propensity refit: +D1a' IF_i(alpha_k).
  std::vector<double> lp = linear_predictor(ps_k.coefficients, ds_k.covariates);
  std::vector<double> p1(n), w(n);
  kernels::expit_vec(lp, p1);
  kernels::logit_weights(p1, w);
  linalg::Matrix h_alpha = linalg::xtwx(design, w);
  std::vector<double> d1a(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (ind[i] != 1.0) continue;
    const double f =
        omega[i] * (ds_k.outcome[i] - m[i]) * inv_prob_slope(lp[i], arm);
    for (std::size_t j = 0; j < d; ++j) d1a[j] += f * design(i, j);
  }
  for (double& v : d1a) v *= inv_n;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) h_alpha(r, c) *= inv_n;
  const std::vector<double> c_alpha = linalg::Cholesky(h_alpha).solve(d1a);

  // Tilt refit: +D1g' IF_i(gamma_k), source-side piece. tau recovered from
  // the solved moment equations so the correction centers exactly. Skipped
  // when the density ratio was fixed rather than estimated.
  std::vector<double> c_gamma(d, 0.0), tau_eff(d, 0.0);
  if (tilt_estimated) {
    linalg::Matrix jac = linalg::xtwx(design, omega);
    std::vector<double> d1g(d, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      tau_eff[j] = kernels::dot(omega, design.col(j)) * inv_n;
    for (std::size_t i = 0; i < n; ++i) {
      if (ind[i] != 1.0) continue;
      const double f = omega[i] / pi[i] * (ds_k.outcome[i] - m[i]);
      for (std::size_t j = 0; j < d; ++j) d1g[j] += f * design(i, j);
    }
    for (double& v : d1g) v *= inv_n;
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) jac(r, c) *= inv_n;
    c_gamma = linalg::Cholesky(jac).solve(d1g);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const double score_a = ds_k.treatment[i] - p1[i];
    xi[i] += row_dot(design, i, c_alpha) * score_a;
    if (ind[i] == 1.0)
      xi[i] -= row_dot(design, i, c_beta) * (ds_k.outcome[i] - m[i]);
    if (tilt_estimated) {
      double hg = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        hg += c_gamma[j] * (design(i, j) * omega[i] - tau_eff[j]);
      xi[i] -= hg;
    }
  }
  return xi;
}

double transported_mean(const SiteDataset& ds_k, const TiltFit& tilt,
                        const LogisticFit& ps_k, const OutcomeFits& or_k,
                        TreatmentArm arm, double clip) {
  const std::vector<double> ind = arm_indicator(ds_k, arm);
  if (kernels::sum(ind) == 0.0)
    throw FitError(std::string("no arm-") +
                   (arm == TreatmentArm::treated ? "treated" : "control") +
                   " patients in source");
  const std::vector<double> omega = density_ratio_weights(tilt, ds_k.covariates);
  const std::vector<double> pi =
      predict_propensity(ps_k, ds_k.covariates, arm, clip);
  const std::vector<double> m = predict_outcome(or_k.arm(arm), ds_k.covariates);
  double acc = 0.0;
  for (std::size_t i = 0; i < ds_k.n(); ++i)
    acc += omega[i] * (m[i] + ind[i] / pi[i] * (ds_k.outcome[i] - m[i]));
  return acc / static_cast<double>(ds_k.n());
}

std::vector<double> transported_if(const SiteDataset& ds_k, const TiltFit& tilt,
                                   const LogisticFit& ps_k,
                                   const OutcomeFits& or_k, TreatmentArm arm,
                                   double clip, IfMode mode,
                                   bool tilt_estimated) {
  require_continuous_for_general(mode, ds_k.outcome_kind);
  const std::size_t n = ds_k.n();
  const double inv_n = 1.0 / static_cast<double>(n);

  const std::vector<double> ind = arm_indicator(ds_k, arm);
  const std::vector<double> omega = density_ratio_weights(tilt, ds_k.covariates);
  const std::vector<double> pi =
      predict_propensity(ps_k, ds_k.covariates, arm, clip);
  const std::vector<double> m = predict_outcome(or_k.arm(arm), ds_k.covariates);

  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = omega[i] * (m[i] + ind[i] / pi[i] * (ds_k.outcome[i] - m[i]));
  const double mu = kernels::sum(w) * inv_n;
  std::vector<double> xi(n);
  for (std::size_t i = 0; i < n; ++i) xi[i] = w[i] - mu;
  if (mode == IfMode::simple) return xi;

  const linalg::Matrix design = augmented_design(ds_k.covariates);
  const std::size_t d = design.cols();

  // Outcome refit: +Cb' IF_i(beta_k) with Cb = (1/n) sum omega (1 - I_a/pi) x.
  linalg::Matrix m_arm = linalg::xtwx(design, ind);
  std::vector<double> cb(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = omega[i] * (1.0 - ind[i] / pi[i]);
    for (std::size_t j = 0; j < d; ++j) cb[j] += f * design(i, j);
  }
  for (double& v : cb) v *= inv_n;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) m_arm(r, c) *= inv_n;
  const std::vector<double> c_beta = linalg::Cholesky(m_arm).solve(cb);

  // Propensity refit: +Ca' IF_i(alpha_k).
  std::vector<double> lp = linear_predictor(ps_k.coefficients, ds_k.covariates);
  std::vector<double> p1(n), wgt(n);
  kernels::expit_vec(lp, p1);
  kernels::logit_weights(p1, wgt);
  linalg::Matrix h_alpha = linalg::xtwx(design, wgt);
  std::vector<double> ca(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (ind[i] != 1.0) continue;
    const double f =
        omega[i] * (ds_k.outcome[i] - m[i]) * inv_prob_slope(lp[i], arm);
    for (std::size_t j = 0; j < d; ++j) ca[j] += f * design(i, j);
  }
  for (double& v : ca) v *= inv_n;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) h_alpha(r, c) *= inv_n;
  const std::vector<double> c_alpha = linalg::Cholesky(h_alpha).solve(ca);

  // Tilt refit: +Cg' IF_i(gamma_k) with Cg = (1/n) sum psi omega (m + I r/pi).
  std::vector<double> c_gamma(d, 0.0), tau_eff(d, 0.0);
  if (tilt_estimated) {
    linalg::Matrix jac = linalg::xtwx(design, omega);
    std::vector<double> cg(d, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      tau_eff[j] = kernels::dot(omega, design.col(j)) * inv_n;
    for (std::size_t i = 0; i < n; ++i) {
      const double f =
          omega[i] *
          (m[i] + ind[i] / pi[i] * (ds_k.outcome[i] - m[i]));
      for (std::size_t j = 0; j < d; ++j) cg[j] += f * design(i, j);
    }
    for (double& v : cg) v *= inv_n;
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) jac(r, c) *= inv_n;
    c_gamma = linalg::Cholesky(jac).solve(cg);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const double score_a = ds_k.treatment[i] - p1[i];
    xi[i] += row_dot(design, i, c_alpha) * score_a;
    if (ind[i] == 1.0)
      xi[i] += row_dot(design, i, c_beta) * (ds_k.outcome[i] - m[i]);
    if (tilt_estimated) {
      double hg = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        hg += c_gamma[j] * (design(i, j) * omega[i] - tau_eff[j]);
      xi[i] -= hg;
    }
  }
  return xi;
}

ArmEstimate source_augmented(double target_or_mean_value,
                             const SiteDataset& ds_k, const TiltFit& tilt,
                             const LogisticFit& ps_k, const OutcomeFits& or_k,
                             TreatmentArm arm, double clip, IfMode mode) {
  ArmEstimate est;
  est.arm = arm;
  est.site_id = ds_k.site_id;
  est.n_contributing = ds_k.n();
  est.value = target_or_mean_value +
              augmentation_term(ds_k, tilt, ps_k, or_k, arm, clip);
  est.per_patient_if =
      source_if_source_component(ds_k, tilt, ps_k, or_k, arm, clip, mode);
  return est;
}

SourceIf compute_source_if(const SiteDataset& ds_t, const OutcomeFits& or_t,
                           const SiteDataset& ds_k, const TiltFit& tilt,
                           const LogisticFit& ps_k, const OutcomeFits& or_k,
                           TreatmentArm arm, double clip, IfMode mode) {
  SourceIf out;
  out.on_target = source_if_target_component(ds_t, or_t, arm, mode);
  out.on_source =
      source_if_source_component(ds_k, tilt, ps_k, or_k, arm, clip, mode);
  return out;
}

double tate(const ArmEstimate& mu1, const ArmEstimate& mu0) {
  return mu1.value - mu0.value;
}

double weighted_target_mean(std::span<const double> values,
                            std::span<const double> sizes) {
  const double total = kernels::sum(sizes);
  return kernels::dot(values, sizes) / total;
}

TargetAnalysis analyze_target(const SiteDataset& ds_t,
                              const AnalysisOptions& opts) {
  TargetAnalysis out;
  const IfMode mode = ds_t.outcome_kind == OutcomeKind::binary
                          ? IfMode::simple
                          : opts.mode;
  out.ps = fit_propensity(ds_t, opts.irls);
  out.ors = fit_outcomes(ds_t, opts.irls);
  out.cov_means = covariate_means(ds_t);
  out.n = ds_t.n();
  for (TreatmentArm arm : {TreatmentArm::control, TreatmentArm::treated}) {
    const std::size_t a = static_cast<std::size_t>(arm_value(arm));
    out.or_mean[a] = target_or_mean(ds_t, out.ors, arm);
    ArmEstimate est = target_aipw(ds_t, out.ps, out.ors, arm, opts.clip, mode);
    out.mu_hat[a] = est.value;
    out.xi_target[a] = std::move(est.per_patient_if);
  }
  return out;
}

SourceAnalysis analyze_source(const SiteDataset& ds_k,
                              const TargetMoments& moments,
                              const std::array<double, 2>& target_or_means,
                              const AnalysisOptions& opts, TiltPolicy policy) {
  SourceAnalysis out;
  out.site_id = ds_k.site_id;
  out.n = ds_k.n();
  const IfMode mode = ds_k.outcome_kind == OutcomeKind::binary
                          ? IfMode::simple
                          : opts.mode;

  bool any1 = false, any0 = false;
  for (double a : ds_k.treatment) (a == 1.0 ? any1 : any0) = true;
  if (!any1 || !any0) {
    out.dropped = true;
    out.drop_reason = any1 ? "no arm-control patients" : "no arm-treated patients";
    return out;
  }

  try {
    if (policy == TiltPolicy::solve) {
      out.tilt = solve_tilt(ds_k.covariates, moments, opts.tilt);
    } else {
      out.tilt.gamma.assign(ds_k.p() + 1, 0.0);
      out.tilt.converged = true;
    }
    out.ps = fit_propensity(ds_k, opts.irls);
    out.ors = fit_outcomes(ds_k, opts.irls);
    for (TreatmentArm arm : {TreatmentArm::control, TreatmentArm::treated}) {
      const std::size_t a = static_cast<std::size_t>(arm_value(arm));
      out.mu_hat[a] =
          transported_mean(ds_k, out.tilt, out.ps, out.ors, arm, opts.clip);
      out.augmentation[a] = out.mu_hat[a] - target_or_means[a];
      out.xi_source[a] =
          transported_if(ds_k, out.tilt, out.ps, out.ors, arm, opts.clip, mode,
                         policy == TiltPolicy::solve);
      out.if_sum[a] = kernels::sum(out.xi_source[a]);
      out.if_sumsq[a] = kernels::sumsq(out.xi_source[a]);
    }
  } catch (const TiltError& e) {
    out.dropped = true;
    out.drop_reason = e.what();
  } catch (const FitError& e) {
    out.dropped = true;
    out.drop_reason = e.what();
  } catch (const SingularMatrixError& e) {
    out.dropped = true;
    out.drop_reason = e.what();
  }
  return out;
}

}  // namespace fedtate

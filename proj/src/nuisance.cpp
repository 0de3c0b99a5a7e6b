#include "fedtate/nuisance.hpp"

#include <cmath>

#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"

namespace fedtate {

std::vector<double> linear_predictor(std::span<const double> coef,
                                     const linalg::Matrix& x) {
  std::vector<double> lp(x.rows(), coef[0]);
  for (std::size_t j = 0; j < x.cols(); ++j)
    kernels::scale_add(coef[j + 1], x.col(j), lp);
  return lp;
}

namespace {

// Bernoulli log-likelihood with optional ridge penalty on non-intercept terms.
double penalized_loglik(std::span<const double> lp, std::span<const double> y,
                        std::span<const double> coef, double ridge) {
  double ll = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double z = lp[i];
    ll += y[i] * z - (std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))));
  }
  if (ridge > 0.0)
    for (std::size_t j = 1; j < coef.size(); ++j)
      ll -= 0.5 * ridge * coef[j] * coef[j];
  return ll;
}

struct IrlsResult {
  std::vector<double> coef;
  bool converged = false;
  std::size_t iterations = 0;
  std::vector<double> loglik_path;
  bool saw_extreme_prob = false;
};

IrlsResult run_irls(const linalg::Matrix& design, std::span<const double> y,
                    double ridge, const IrlsOptions& opts) {
  const std::size_t n = design.rows();
  const std::size_t d = design.cols();
  IrlsResult res;
  res.coef.assign(d, 0.0);

  std::vector<double> lp(n, 0.0), prob(n), w(n), resid(n);
  std::vector<double> trial(d);

  auto eval_lp = [&](std::span<const double> c, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), c[0]);
    for (std::size_t j = 1; j < d; ++j)
      kernels::scale_add(c[j], design.col(j), out);
  };

  eval_lp(res.coef, lp);
  double ll = penalized_loglik(lp, y, res.coef, ridge);
  res.loglik_path.push_back(ll);

  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    kernels::expit_vec(lp, prob);
    for (std::size_t i = 0; i < n; ++i) {
      resid[i] = y[i] - prob[i];
      if (prob[i] < 1e-8 || prob[i] > 1.0 - 1e-8) res.saw_extreme_prob = true;
    }
    std::vector<double> score = linalg::xtv(design, resid);
    if (ridge > 0.0)
      for (std::size_t j = 1; j < d; ++j) score[j] -= ridge * res.coef[j];

    double sup = 0.0;
    for (double g : score) sup = std::max(sup, std::fabs(g));
    if (sup < opts.tol) {
      res.converged = true;
      return res;
    }

    kernels::logit_weights(prob, w);
    linalg::Matrix h = linalg::xtwx(design, w);
    if (ridge > 0.0)
      for (std::size_t j = 1; j < d; ++j) h(j, j) += ridge;
    std::vector<double> delta = linalg::Cholesky(h).solve(score);

    double step = 1.0;
    for (std::size_t halving = 0;; ++halving) {
      for (std::size_t j = 0; j < d; ++j) trial[j] = res.coef[j] + step * delta[j];
      eval_lp(trial, lp);
      const double ll_trial = penalized_loglik(lp, y, trial, ridge);
      if (ll_trial >= ll || halving >= opts.max_halvings) {
        res.coef = trial;
        ll = ll_trial;
        break;
      }
      step *= 0.5;
    }
    res.loglik_path.push_back(ll);
    res.iterations = it + 1;
  }
  return res;
}

}  // namespace

LogisticFit fit_logistic(const linalg::Matrix& x, std::span<const double> y,
                         const IrlsOptions& opts) {
  bool any0 = false, any1 = false;
  for (double v : y) (v == 1.0 ? any1 : any0) = true;
  if (!any0 || !any1) throw FitError("degenerate response");

  const linalg::Matrix design = augmented_design(x);

  LogisticFit fit;
  try {
    IrlsResult raw = run_irls(design, y, 0.0, opts);
    if (raw.converged) {
      fit.coefficients = std::move(raw.coef);
      fit.converged = true;
      fit.iterations = raw.iterations;
      fit.loglik_path = std::move(raw.loglik_path);
      return fit;
    }
    if (!raw.saw_extreme_prob) {
      // Did not converge but no sign of separation; return as-is.
      fit.coefficients = std::move(raw.coef);
      fit.converged = false;
      fit.iterations = raw.iterations;
      fit.loglik_path = std::move(raw.loglik_path);
      return fit;
    }
  } catch (const SingularMatrixError&) {
    // fall through to the ridge refit
  }

  IrlsResult ridge;
  try {
    ridge = run_irls(design, y, opts.ridge_fallback, opts);
  } catch (const SingularMatrixError&) {
    throw FitError("singular weighted cross-product after ridge");
  }
  fit.coefficients = std::move(ridge.coef);
  fit.converged = ridge.converged;
  fit.iterations = ridge.iterations;
  fit.ridge_used = opts.ridge_fallback;
  fit.loglik_path = std::move(ridge.loglik_path);
  for (double c : fit.coefficients)
    if (!std::isfinite(c)) throw FitError("non-finite coefficients after ridge");
  return fit;
}

LinearFit fit_linear(const linalg::Matrix& x, std::span<const double> y) {
  const linalg::Matrix design = augmented_design(x);
  const std::size_t n = design.rows();
  const std::size_t d = design.cols();

  linalg::Matrix xtx_m = linalg::xtx(design);
  std::vector<double> xty = linalg::xtv(design, y);

  LinearFit fit;
  try {
    fit.coefficients = linalg::Cholesky(xtx_m).solve(xty);
  } catch (const SingularMatrixError&) {
    throw FitError("singular design");
  }

  if (n > d) {
    std::vector<double> resid = linear_predictor(fit.coefficients, x);
    for (std::size_t i = 0; i < n; ++i) resid[i] = y[i] - resid[i];
    fit.residual_variance =
        kernels::sumsq(resid) / static_cast<double>(n - d);
  }
  return fit;
}

LogisticFit fit_propensity(const SiteDataset& ds, const IrlsOptions& opts) {
  bool any0 = false, any1 = false;
  for (double a : ds.treatment) (a == 1.0 ? any1 : any0) = true;
  if (!any1) throw FitError("no treated units");
  if (!any0) throw FitError("no control units");
  return fit_logistic(ds.covariates, ds.treatment, opts);
}

std::vector<double> predict_propensity(const LogisticFit& fit,
                                       const linalg::Matrix& x,
                                       TreatmentArm arm, double clip) {
  std::vector<double> lp = linear_predictor(fit.coefficients, x);
  std::vector<double> prob(lp.size());
  kernels::expit_vec(lp, prob);
  if (arm == TreatmentArm::control)
    for (double& v : prob) v = 1.0 - v;
  kernels::clip_vec(clip, 1.0 - clip, prob);
  return prob;
}

namespace {

// Rows of x (plus y) where the indicator is 1.
std::pair<linalg::Matrix, std::vector<double>> subset_rows(
    const linalg::Matrix& x, std::span<const double> y,
    std::span<const double> keep, std::size_t count) {
  linalg::Matrix xs(count, x.cols());
  std::vector<double> ys(count);
  std::size_t r = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (keep[i] != 1.0) continue;
    for (std::size_t j = 0; j < x.cols(); ++j) xs(r, j) = x(i, j);
    ys[r] = y[i];
    ++r;
  }
  return {std::move(xs), std::move(ys)};
}

OutcomeFit fit_one_arm(const SiteDataset& ds, TreatmentArm arm,
                       const IrlsOptions& opts) {
  const std::vector<double> ind = arm_indicator(ds, arm);
  const std::size_t n_arm =
      static_cast<std::size_t>(kernels::sum(ind));
  if (n_arm < ds.p() + 2)
    throw FitError("insufficient arm size (" +
                   std::string(arm == TreatmentArm::treated ? "treated" : "control") +
                   ", " + std::to_string(n_arm) + ")");
  auto [xs, ys] = subset_rows(ds.covariates, ds.outcome, ind, n_arm);

  OutcomeFit fit;
  fit.kind = ds.outcome_kind;
  if (ds.outcome_kind == OutcomeKind::continuous) {
    LinearFit lf = fit_linear(xs, ys);
    fit.coefficients = std::move(lf.coefficients);
    fit.residual_variance = lf.residual_variance;
  } else {
    LogisticFit lf = fit_logistic(xs, ys, opts);
    fit.coefficients = std::move(lf.coefficients);
  }
  return fit;
}

}  // namespace

OutcomeFits fit_outcomes(const SiteDataset& ds, const IrlsOptions& opts) {
  OutcomeFits fits;
  fits.treated = fit_one_arm(ds, TreatmentArm::treated, opts);
  fits.control = fit_one_arm(ds, TreatmentArm::control, opts);
  return fits;
}

std::vector<double> predict_outcome(const OutcomeFit& fit,
                                    const linalg::Matrix& x) {
  std::vector<double> lp = linear_predictor(fit.coefficients, x);
  if (fit.kind == OutcomeKind::binary) {
    std::vector<double> prob(lp.size());
    kernels::expit_vec(lp, prob);
    return prob;
  }
  return lp;
}

}  // namespace fedtate

#pragma once
// Local nuisance models: logistic regression by IRLS with a ridge fallback
// under quasi-separation, and linear regression by normal equations.

#include <cstddef>
#include <span>
#include <vector>

#include "fedtate/domain.hpp"
#include "fedtate/linalg.hpp"

namespace fedtate {

struct IrlsOptions {
  double tol = 1e-10;           // sup-norm of the score
  std::size_t max_iter = 100;
  std::size_t max_halvings = 20;
  double ridge_fallback = 1e-4;  // penalty on non-intercept terms
};

struct LogisticFit {
  std::vector<double> coefficients;  // length p+1, intercept first
  bool converged = false;
  std::size_t iterations = 0;
  double ridge_used = 0.0;
  std::vector<double> loglik_path;  // accepted-step objective values
};

struct LinearFit {
  std::vector<double> coefficients;  // length p+1, intercept first
  double residual_variance = 0.0;
};

// One arm's outcome regression: linear for continuous outcomes, logistic for
// binary ones. Predictions are always on the mean scale.
struct OutcomeFit {
  OutcomeKind kind = OutcomeKind::continuous;
  std::vector<double> coefficients;
  double residual_variance = 0.0;
};

struct OutcomeFits {
  OutcomeFit treated;
  OutcomeFit control;
  const OutcomeFit& arm(TreatmentArm a) const {
    return a == TreatmentArm::treated ? treated : control;
  }
};

// Maximum-likelihood logistic fit of y on [1|X]. Throws FitError on a
// degenerate response or a singular system after the ridge fallback.
LogisticFit fit_logistic(const linalg::Matrix& x, std::span<const double> y,
                         const IrlsOptions& opts = {});

// Least squares fit of y on [1|X]. Throws FitError("singular design").
LinearFit fit_linear(const linalg::Matrix& x, std::span<const double> y);

// Logistic fit of treatment on covariates. Requires both arms present.
LogisticFit fit_propensity(const SiteDataset& ds, const IrlsOptions& opts = {});

// P(A=arm | x) for every row, clipped into [clip, 1-clip]. clip in (0, 0.5).
std::vector<double> predict_propensity(const LogisticFit& fit,
                                       const linalg::Matrix& x,
                                       TreatmentArm arm, double clip);

// Per-arm outcome fits on the arm subsets. Requires >= p+2 patients per arm.
OutcomeFits fit_outcomes(const SiteDataset& ds, const IrlsOptions& opts = {});

// Mean-scale predictions m_a(x) for every row of x.
std::vector<double> predict_outcome(const OutcomeFit& fit,
                                    const linalg::Matrix& x);

// Linear predictor [1|X] * coef.
std::vector<double> linear_predictor(std::span<const double> coef,
                                     const linalg::Matrix& x);

}  // namespace fedtate

#pragma once
// Exponential-tilt density-ratio estimation at a source site from the
// target's covariate means only. Solves
//   (1/n_k) sum_i psi(x_i) exp(gamma' psi(x_i)) = (1, target_means)
// with psi(x) = (1, x'); the intercept enforces mean-one normalization.

#include <cstddef>
#include <vector>

#include "fedtate/linalg.hpp"

namespace fedtate {

struct TargetMoments {
  std::vector<double> means;  // length p
  std::size_t n_target = 0;
};

struct TiltFit {
  std::vector<double> gamma;  // length p+1, intercept first
  bool converged = false;
  double residual_norm = 0.0;
};

struct TiltOptions {
  double tol = 1e-9;  // sup-norm of the estimating equations
  std::size_t max_iter = 200;
  std::size_t max_halvings = 60;
};

// Newton solve with step-halving on the residual norm. Throws TiltError when
// the target means fall outside the source support (component-wise), on a
// singular Jacobian, or on non-convergence; the error carries the last
// residual sup-norm.
TiltFit solve_tilt(const linalg::Matrix& source_x, const TargetMoments& target,
                   const TiltOptions& opts = {});

// omega_i = exp(gamma' psi(x_i)) > 0 for every row of x.
std::vector<double> density_ratio_weights(const TiltFit& fit,
                                          const linalg::Matrix& x);

// Sup-norm of the estimating equations at the fitted gamma.
double moment_residual(const TiltFit& fit, const linalg::Matrix& source_x,
                       const TargetMoments& target);

}  // namespace fedtate

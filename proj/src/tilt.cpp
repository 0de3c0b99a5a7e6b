#include "fedtate/tilt.hpp"

#include <cmath>

#include "fedtate/domain.hpp"
#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"

namespace fedtate {

namespace {

// h(gamma) = (1/n) sum_i psi_i exp(gamma' psi_i) - tau, with omega as scratch.
void residual_at(const linalg::Matrix& design, std::span<const double> gamma,
                 std::span<const double> tau, std::vector<double>& lp,
                 std::vector<double>& omega, std::vector<double>& h) {
  const std::size_t n = design.rows();
  const std::size_t d = design.cols();
  std::fill(lp.begin(), lp.end(), gamma[0]);
  for (std::size_t j = 1; j < d; ++j)
    kernels::scale_add(gamma[j], design.col(j), lp);
  kernels::exp_vec(lp, omega);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < d; ++j)
    h[j] = kernels::dot(omega, design.col(j)) * inv_n - tau[j];
}

double sup_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s = std::max(s, std::fabs(x));
  return s;
}

}  // namespace

TiltFit solve_tilt(const linalg::Matrix& source_x, const TargetMoments& target,
                   const TiltOptions& opts) {
  const std::size_t n = source_x.rows();
  const std::size_t p = source_x.cols();
  if (target.means.size() != p)
    throw TiltError("target means dimension mismatch", 0.0);

  // Feasibility: each target mean must lie strictly inside the source range,
  // otherwise no tilt can match it and Newton diverges.
  for (std::size_t j = 0; j < p; ++j) {
    auto col = source_x.col(j);
    double lo = col[0], hi = col[0];
    for (double v : col) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double m = target.means[j];
    const double slack = 1e-12 * std::max(1.0, hi - lo);
    if (!(m > lo + slack) || !(m < hi - slack))
      throw TiltError("target mean outside source support (covariate " +
                          std::to_string(j + 1) + ")",
                      std::fabs(m));
  }

  const linalg::Matrix design = augmented_design(source_x);
  const std::size_t d = p + 1;
  std::vector<double> tau(d);
  tau[0] = 1.0;
  for (std::size_t j = 0; j < p; ++j) tau[j + 1] = target.means[j];

  TiltFit fit;
  fit.gamma.assign(d, 0.0);

  std::vector<double> lp(n), omega(n), h(d), trial(d), h_trial(d);
  residual_at(design, fit.gamma, tau, lp, omega, h);
  double norm = sup_norm(h);

  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    if (norm < opts.tol) {
      fit.converged = true;
      fit.residual_norm = norm;
      return fit;
    }
    // Jacobian (1/n) sum psi psi' exp(gamma' psi); SPD for positive weights.
    linalg::Matrix jac = linalg::xtwx(design, omega);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) jac(r, c) *= inv_n;

    std::vector<double> step;
    try {
      std::vector<double> neg_h(d);
      for (std::size_t j = 0; j < d; ++j) neg_h[j] = -h[j];
      step = linalg::Cholesky(jac).solve(neg_h);
    } catch (const SingularMatrixError&) {
      throw TiltError("singular tilt Jacobian", norm);
    }

    double scale = 1.0;
    bool accepted = false;
    for (std::size_t halving = 0; halving <= opts.max_halvings; ++halving) {
      for (std::size_t j = 0; j < d; ++j) trial[j] = fit.gamma[j] + scale * step[j];
      residual_at(design, trial, tau, lp, omega, h_trial);
      const double trial_norm = sup_norm(h_trial);
      if (std::isfinite(trial_norm) && trial_norm <= norm) {
        fit.gamma = trial;
        h = h_trial;
        norm = trial_norm;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) throw TiltError("tilt step-halving stalled", norm);
  }
  if (norm < opts.tol) {
    fit.converged = true;
    fit.residual_norm = norm;
    return fit;
  }
  throw TiltError("tilt did not converge", norm);
}

std::vector<double> density_ratio_weights(const TiltFit& fit,
                                          const linalg::Matrix& x) {
  std::vector<double> lp(x.rows(), fit.gamma[0]);
  for (std::size_t j = 0; j < x.cols(); ++j)
    kernels::scale_add(fit.gamma[j + 1], x.col(j), lp);
  std::vector<double> omega(lp.size());
  kernels::exp_vec(lp, omega);
  return omega;
}

double moment_residual(const TiltFit& fit, const linalg::Matrix& source_x,
                       const TargetMoments& target) {
  const linalg::Matrix design = augmented_design(source_x);
  const std::size_t d = design.cols();
  std::vector<double> tau(d);
  tau[0] = 1.0;
  for (std::size_t j = 0; j + 1 < d; ++j) tau[j + 1] = target.means[j];
  std::vector<double> lp(design.rows()), omega(design.rows()), h(d);
  residual_at(design, fit.gamma, tau, lp, omega, h);
  return sup_norm(h);
}

}  // namespace fedtate

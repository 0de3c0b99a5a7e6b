#include "fedtate/linalg.hpp"

#include <cmath>

#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"

namespace fedtate::linalg {

Cholesky::Cholesky(const Matrix& a) : l_(a.rows(), a.cols()) {
  const std::size_t n = a.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::fabs(a(i, i)));
  if (scale == 0.0) scale = 1.0;
  const double tol = 1e-12 * scale;

  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
    if (!(d > tol)) throw SingularMatrixError("matrix not positive definite");
    const double ljj = std::sqrt(d);
    l_(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
      l_(i, j) = s / ljj;
    }
  }
}

std::vector<double> Cholesky::solve(std::span<const double> b) const {
  const std::size_t n = l_.rows();
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = y[i];
    for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * y[k];
    y[i] = s / l_(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * y[k];
    y[ii] = s / l_(ii, ii);
  }
  return y;
}

Matrix Cholesky::inverse() const {
  const std::size_t n = l_.rows();
  Matrix inv(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    auto x = solve(e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = x[i];
    e[j] = 0.0;
  }
  return inv;
}

std::vector<double> solve_spd(const Matrix& a, std::span<const double> b) {
  return Cholesky(a).solve(b);
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  std::vector<double> out(a.rows(), 0.0);
  for (std::size_t j = 0; j < a.cols(); ++j)
    kernels::scale_add(x[j], a.col(j), out);
  return out;
}

Matrix xtwx(const Matrix& x, std::span<const double> w) {
  const std::size_t p = x.cols();
  Matrix m(p, p);
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t k = j; k < p; ++k) {
      const double v = kernels::wdot(w, x.col(j), x.col(k));
      m(j, k) = v;
      m(k, j) = v;
    }
  return m;
}

Matrix xtx(const Matrix& x) {
  const std::size_t p = x.cols();
  Matrix m(p, p);
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t k = j; k < p; ++k) {
      const double v = kernels::dot(x.col(j), x.col(k));
      m(j, k) = v;
      m(k, j) = v;
    }
  return m;
}

std::vector<double> xtv(const Matrix& x, std::span<const double> v) {
  std::vector<double> out(x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) out[j] = kernels::dot(x.col(j), v);
  return out;
}

double spectral_bound(const Matrix& a) {
  double bound = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) row += std::fabs(a(i, j));
    bound = std::max(bound, row);
  }
  return bound;
}

}  // namespace fedtate::linalg

#pragma once
// Small dense matrices and SPD solves. Problem dimensions here are tiny
// (design width p+1 <= ~21; fixed-effects comparator <= 2K+p), so a plain
// Cholesky on top of the kernel layer is all that is needed.

#include <cstddef>
#include <span>
#include <vector>

namespace fedtate::linalg {

// Column-major dense matrix; columns are contiguous so kernels can consume
// them as spans.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[j * rows_ + i]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[j * rows_ + i]; }

  std::span<double> col(std::size_t j) { return {data_.data() + j * rows_, rows_}; }
  std::span<const double> col(std::size_t j) const {
    return {data_.data() + j * rows_, rows_};
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

// Cholesky factorization A = L L'. Throws SingularMatrixError when a pivot
// falls below a relative tolerance.
class Cholesky {
 public:
  explicit Cholesky(const Matrix& a);
  std::vector<double> solve(std::span<const double> b) const;
  Matrix inverse() const;

 private:
  Matrix l_;
};

std::vector<double> solve_spd(const Matrix& a, std::span<const double> b);

std::vector<double> matvec(const Matrix& a, std::span<const double> x);

// X' diag(w) X for a column-major design; symmetric output.
Matrix xtwx(const Matrix& x, std::span<const double> w);
// X' X.
Matrix xtx(const Matrix& x);
// X' v.
std::vector<double> xtv(const Matrix& x, std::span<const double> v);

// Gershgorin upper bound on the spectral radius of a symmetric matrix.
double spectral_bound(const Matrix& a);

}  // namespace fedtate::linalg

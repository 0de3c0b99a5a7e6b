#pragma once
// Scalar reference kernels. These define the semantics the SIMD variants are
// tested against, and serve as the fallback on CPUs without AVX2.

#include <cmath>
#include <cstddef>
#include <span>

namespace fedtate::kernels::scalar {

inline double sum(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v;
  return acc;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double sumsq(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc;
}

inline double wdot(std::span<const double> w, std::span<const double> a,
                   std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * a[i] * b[i];
  return acc;
}

inline void exp_vec(std::span<const double> in, std::span<double> out) {
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
}

inline void expit_vec(std::span<const double> in, std::span<double> out) {
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-in[i]));
}

inline void mul_vec(std::span<const double> a, std::span<const double> b,
                    std::span<double> out) {
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
}

inline void logit_weights(std::span<const double> p, std::span<double> w) {
  for (std::size_t i = 0; i < p.size(); ++i) w[i] = p[i] * (1.0 - p[i]);
}

inline void scale_add(double alpha, std::span<const double> x,
                      std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void clip_vec(double lo, double hi, std::span<double> x) {
  for (double& v : x) v = v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace fedtate::kernels::scalar

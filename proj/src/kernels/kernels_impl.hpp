#pragma once
// Internal dispatch table shared by kernels.cpp and the SIMD backends.

#include <cstddef>
#include <span>

namespace fedtate::kernels::detail {

struct Backend {
  double (*sum)(std::span<const double>);
  double (*dot)(std::span<const double>, std::span<const double>);
  double (*sumsq)(std::span<const double>);
  double (*wdot)(std::span<const double>, std::span<const double>,
                 std::span<const double>);
  void (*exp_vec)(std::span<const double>, std::span<double>);
  void (*expit_vec)(std::span<const double>, std::span<double>);
  void (*mul_vec)(std::span<const double>, std::span<const double>,
                  std::span<double>);
  void (*logit_weights)(std::span<const double>, std::span<double>);
  void (*scale_add)(double, std::span<const double>, std::span<double>);
  void (*clip_vec)(double, double, std::span<double>);
  const char* name;
};

// Defined in kernels_avx2.cpp; null when the build target is not x86-64.
const Backend* avx2_backend();

}  // namespace fedtate::kernels::detail

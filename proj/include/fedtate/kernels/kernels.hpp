#pragma once
// Vectorized inner-loop kernels with runtime backend dispatch.
//
// Every kernel has a scalar reference implementation (kernels/scalar.hpp) and,
// on x86-64 with AVX2+FMA, a SIMD variant selected once at startup. The two
// backends agree to floating-point reassociation error; equivalence is
// enforced by tests/test_kernels.cpp.

#include <cstddef>
#include <span>
#include <string_view>

namespace fedtate::kernels {

// Reductions.
double sum(std::span<const double> x);
double dot(std::span<const double> a, std::span<const double> b);
double sumsq(std::span<const double> x);
// Weighted cross product: sum_i w[i]*a[i]*b[i]. Workhorse of IRLS/tilt
// normal-equation assembly.
double wdot(std::span<const double> w, std::span<const double> a,
            std::span<const double> b);

// Elementwise transforms. in and out may alias exactly (same pointer).
void exp_vec(std::span<const double> in, std::span<double> out);
void expit_vec(std::span<const double> in, std::span<double> out);
// out = a * b elementwise.
void mul_vec(std::span<const double> a, std::span<const double> b,
             std::span<double> out);
// w = p * (1 - p); the IRLS working weight.
void logit_weights(std::span<const double> p, std::span<double> w);
// y += alpha * x.
void scale_add(double alpha, std::span<const double> x, std::span<double> y);
void clip_vec(double lo, double hi, std::span<double> x);

// Name of the backend currently dispatched ("avx2" or "scalar").
std::string_view active_backend();
// Force a backend by name; returns false if unavailable. Test hook.
bool force_backend(std::string_view name);

}  // namespace fedtate::kernels

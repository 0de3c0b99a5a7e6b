// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; nothing here may be called unless the CPU reports both.

#include "kernels_impl.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>
#include <cstdint>

namespace fedtate::kernels::detail {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double sum_avx2(std::span<const double> x) {
  const double* p = x.data();
  std::size_t n = x.size(), i = 0;
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(p + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(p + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(p + i));
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += p[i];
  return acc;
}

double dot_avx2(std::span<const double> a, std::span<const double> b) {
  const double* pa = a.data();
  const double* pb = b.data();
  std::size_t n = a.size(), i = 0;
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i + 4), _mm256_loadu_pd(pb + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += pa[i] * pb[i];
  return acc;
}

double sumsq_avx2(std::span<const double> x) { return dot_avx2(x, x); }

double wdot_avx2(std::span<const double> w, std::span<const double> a,
                 std::span<const double> b) {
  const double* pw = w.data();
  const double* pa = a.data();
  const double* pb = b.data();
  std::size_t n = w.size(), i = 0;
  __m256d acc = _mm256_setzero_pd();
  for (; i + 4 <= n; i += 4) {
    __m256d ab = _mm256_mul_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i));
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(pw + i), ab, acc);
  }
  double r = hsum(acc);
  for (; i < n; ++i) r += pw[i] * pa[i] * pb[i];
  return r;
}

// exp for 4 doubles, Cephes-style: range reduction by ln2 followed by a
// rational approximation and exponent reassembly. ~1 ulp over the clamped
// domain; inputs outside [-708.39, 709.43] saturate instead of producing
// inf/0 denormals.
inline __m256d exp4(__m256d x) {
  const __m256d log2e = _mm256_set1_pd(1.4426950408889634073599);
  const __m256d c1 = _mm256_set1_pd(6.93145751953125e-1);
  const __m256d c2 = _mm256_set1_pd(1.42860682030941723212e-6);
  const __m256d p0 = _mm256_set1_pd(1.26177193074810590878e-4);
  const __m256d p1 = _mm256_set1_pd(3.02994407707441961300e-2);
  const __m256d p2 = _mm256_set1_pd(9.99999999999999999910e-1);
  const __m256d q0 = _mm256_set1_pd(3.00198505138664455042e-6);
  const __m256d q1 = _mm256_set1_pd(2.52448340349684104192e-3);
  const __m256d q2 = _mm256_set1_pd(2.27265548208155028766e-1);
  const __m256d q3 = _mm256_set1_pd(2.00000000000000000005e0);
  const __m256d one = _mm256_set1_pd(1.0);
  const __m256d half = _mm256_set1_pd(0.5);

  x = _mm256_min_pd(x, _mm256_set1_pd(708.39641853226408));
  x = _mm256_max_pd(x, _mm256_set1_pd(-708.39641853226408));

  __m256d n = _mm256_floor_pd(_mm256_fmadd_pd(log2e, x, half));
  x = _mm256_fnmadd_pd(n, c1, x);
  x = _mm256_fnmadd_pd(n, c2, x);
  __m256d xx = _mm256_mul_pd(x, x);

  __m256d px = _mm256_fmadd_pd(p0, xx, p1);
  px = _mm256_fmadd_pd(px, xx, p2);
  px = _mm256_mul_pd(px, x);
  __m256d qx = _mm256_fmadd_pd(q0, xx, q1);
  qx = _mm256_fmadd_pd(qx, xx, q2);
  qx = _mm256_fmadd_pd(qx, xx, q3);
  __m256d r = _mm256_div_pd(px, _mm256_sub_pd(qx, px));
  r = _mm256_fmadd_pd(r, _mm256_set1_pd(2.0), one);

  // 2^n via the exponent field; |n| <= 1022 after the clamp above.
  __m128i n32 = _mm256_cvtpd_epi32(n);
  __m256i n64 = _mm256_cvtepi32_epi64(n32);
  __m256i e = _mm256_slli_epi64(_mm256_add_epi64(n64, _mm256_set1_epi64x(1023)), 52);
  return _mm256_mul_pd(r, _mm256_castsi256_pd(e));
}

void exp_vec_avx2(std::span<const double> in, std::span<double> out) {
  const double* p = in.data();
  double* q = out.data();
  std::size_t n = in.size(), i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(q + i, exp4(_mm256_loadu_pd(p + i)));
  for (; i < n; ++i) q[i] = std::exp(p[i]);
}

void expit_vec_avx2(std::span<const double> in, std::span<double> out) {
  const __m256d one = _mm256_set1_pd(1.0);
  const double* p = in.data();
  double* q = out.data();
  std::size_t n = in.size(), i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d ez = exp4(_mm256_sub_pd(_mm256_setzero_pd(), _mm256_loadu_pd(p + i)));
    _mm256_storeu_pd(q + i, _mm256_div_pd(one, _mm256_add_pd(one, ez)));
  }
  for (; i < n; ++i) q[i] = 1.0 / (1.0 + std::exp(-p[i]));
}

void mul_vec_avx2(std::span<const double> a, std::span<const double> b,
                  std::span<double> out) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* q = out.data();
  std::size_t n = a.size(), i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(q + i, _mm256_mul_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i)));
  for (; i < n; ++i) q[i] = pa[i] * pb[i];
}

void logit_weights_avx2(std::span<const double> p, std::span<double> w) {
  const __m256d one = _mm256_set1_pd(1.0);
  const double* pp = p.data();
  double* q = w.data();
  std::size_t n = p.size(), i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(pp + i);
    _mm256_storeu_pd(q + i, _mm256_mul_pd(v, _mm256_sub_pd(one, v)));
  }
  for (; i < n; ++i) q[i] = pp[i] * (1.0 - pp[i]);
}

void scale_add_avx2(double alpha, std::span<const double> x, std::span<double> y) {
  const __m256d a = _mm256_set1_pd(alpha);
  const double* px = x.data();
  double* py = y.data();
  std::size_t n = x.size(), i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(py + i, _mm256_fmadd_pd(a, _mm256_loadu_pd(px + i), _mm256_loadu_pd(py + i)));
  for (; i < n; ++i) py[i] += alpha * px[i];
}

void clip_vec_avx2(double lo, double hi, std::span<double> x) {
  const __m256d vlo = _mm256_set1_pd(lo);
  const __m256d vhi = _mm256_set1_pd(hi);
  double* p = x.data();
  std::size_t n = x.size(), i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(p + i);
    _mm256_storeu_pd(p + i, _mm256_min_pd(_mm256_max_pd(v, vlo), vhi));
  }
  for (; i < n; ++i) p[i] = p[i] < lo ? lo : (p[i] > hi ? hi : p[i]);
}

const Backend kAvx2 = {
    sum_avx2,     dot_avx2,       sumsq_avx2,         wdot_avx2,
    exp_vec_avx2, expit_vec_avx2, mul_vec_avx2,       logit_weights_avx2,
    scale_add_avx2, clip_vec_avx2, "avx2",
};

}  // namespace

const Backend* avx2_backend() { return &kAvx2; }

}  // namespace fedtate::kernels::detail

#else  // non-x86 build

namespace fedtate::kernels::detail {
const Backend* avx2_backend() { return nullptr; }
}  // namespace fedtate::kernels::detail

#endif

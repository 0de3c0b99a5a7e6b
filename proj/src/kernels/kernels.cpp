// Backend selection and public kernel entry points.

#include "fedtate/kernels/kernels.hpp"

#include <atomic>

#include "fedtate/kernels/scalar.hpp"
#include "kernels_impl.hpp"

namespace fedtate::kernels {
namespace {

using detail::Backend;

const Backend kScalar = {
    scalar::sum,     scalar::dot,       scalar::sumsq,         scalar::wdot,
    scalar::exp_vec, scalar::expit_vec, scalar::mul_vec,       scalar::logit_weights,
    scalar::scale_add, scalar::clip_vec, "scalar",
};

const Backend* pick_backend() {
#if defined(__x86_64__) || defined(_M_X64)
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    if (const Backend* b = detail::avx2_backend()) return b;
  }
#endif
  return &kScalar;
}

std::atomic<const Backend*> g_backend{nullptr};

const Backend& active() {
  const Backend* b = g_backend.load(std::memory_order_acquire);
  if (!b) {
    b = pick_backend();
    g_backend.store(b, std::memory_order_release);
  }
  return *b;
}

}  // namespace

double sum(std::span<const double> x) { return active().sum(x); }
double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a, b);
}
double sumsq(std::span<const double> x) { return active().sumsq(x); }
double wdot(std::span<const double> w, std::span<const double> a,
            std::span<const double> b) {
  return active().wdot(w, a, b);
}
void exp_vec(std::span<const double> in, std::span<double> out) {
  active().exp_vec(in, out);
}
void expit_vec(std::span<const double> in, std::span<double> out) {
  active().expit_vec(in, out);
}
void mul_vec(std::span<const double> a, std::span<const double> b,
             std::span<double> out) {
  active().mul_vec(a, b, out);
}
void logit_weights(std::span<const double> p, std::span<double> w) {
  active().logit_weights(p, w);
}
void scale_add(double alpha, std::span<const double> x, std::span<double> y) {
  active().scale_add(alpha, x, y);
}
void clip_vec(double lo, double hi, std::span<double> x) {
  active().clip_vec(lo, hi, x);
}

std::string_view active_backend() { return active().name; }

bool force_backend(std::string_view name) {
  if (name == "scalar") {
    g_backend.store(&kScalar, std::memory_order_release);
    return true;
  }
  if (name == "avx2") {
#if defined(__x86_64__) || defined(_M_X64)
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
      g_backend.store(detail::avx2_backend(), std::memory_order_release);
      return true;
    }
#endif
    return false;
  }
  return false;
}

}  // namespace fedtate::kernels

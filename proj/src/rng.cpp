#include "fedtate/rng.hpp"

#include <cmath>

namespace fedtate::rng {

std::uint64_t hash_label(std::string_view label) {
  // FNV-1a, then one splitmix round to spread low-entropy labels.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return splitmix64(h);
}

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t replication,
                       std::string_view label) {
  std::uint64_t s = splitmix64(master);
  s = splitmix64(s ^ (0xa0761d6478bd642fULL + replication));
  s = splitmix64(s ^ hash_label(label));
  return s;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

double Rng::gamma(double shape, double rate) {
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / rate;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
      return d * v / rate;
  }
}

}  // namespace fedtate::rng

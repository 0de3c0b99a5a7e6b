#pragma once
// Seed mixing and stable random variates. Distribution algorithms are
// implemented here rather than taken from <random> so that streams are
// byte-identical across standard libraries and platforms.

#include <cstdint>
#include <random>
#include <string_view>

namespace fedtate::rng {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_label(std::string_view label);

// Child seed from (master, replication index, stream label).
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t replication,
                       std::string_view label);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal();

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Gamma(shape, rate) by Marsaglia-Tsang squeeze; shape >= 1.
  double gamma(double shape, double rate);

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fedtate::rng

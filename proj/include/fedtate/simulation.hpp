#pragma once
// Data-generating process (skew-normal covariates, five model-specification
// settings, dense/sparse site heterogeneity) and the Monte Carlo study
// runner producing bias/RMSE/coverage/CI-length tables.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedtate/domain.hpp"
#include "fedtate/ensemble.hpp"
#include "fedtate/rng.hpp"

namespace fedtate {

struct SkewNormalParams {
  double location = 0.0;
  double scale = 1.0;
  double skew = 0.0;
};

enum class Density { dense, sparse };
enum class Specification { I = 1, II, III, IV, V };

Specification parse_specification(const std::string& s);
Density parse_density(const std::string& s);
std::string to_string(Specification s);
std::string to_string(Density d);

struct DgpConfig {
  std::size_t k_sites = 10;  // total sites including the target
  std::size_t p_cov = 2;     // 2 or 10
  Density density = Density::sparse;
  Specification spec = Specification::I;
  std::size_t target_n = 100;
  bool mu1_empirical = false;  // center outcomes at the per-replication
                               // target sample mean instead of the analytic one
};

// Resolved generator parameters: coefficient vectors, drawn site sizes and
// the per-site distribution assignments. Exposed for tests.
struct DgpParams {
  std::vector<double> beta10, beta11, beta20, beta21;
  std::vector<double> alpha1, alpha2;
  std::vector<std::size_t> site_sizes;            // all K, target first
  std::vector<std::vector<double>> skew;          // per site, per covariate
  std::vector<std::vector<double>> bernoulli_mean;  // empty vectors when continuous
  std::vector<bool> alpha2_active;                // per site
  std::vector<double> mu1;                        // analytic centering vector
  std::vector<double> site_locations;             // continuous-covariate locations
  double noise_sd = 0.0;
};

// Draws via X = location + scale*(d|Z0| + sqrt(1-d^2) Z1), d = A/sqrt(1+A^2).
std::vector<double> sample_skew_normal(const SkewNormalParams& params,
                                       std::size_t n, rng::Rng& r);

// Gamma(16, 0.08) clamped below at 50, rounded; one draw per source site.
std::vector<std::size_t> sample_site_sizes(std::size_t k_sites, rng::Rng& r);

// Site sizes plus the per-site distribution assignment (consumes draws).
DgpParams dgp_params(const DgpConfig& cfg, rng::Rng& r);

// One simulated study; target site first.
std::vector<SiteDataset> generate_sites(const DgpConfig& cfg, rng::Rng& r);

struct TruthOracle {
  double value = 0.0;
  double se = 0.0;
};

// Monte Carlo evaluation of the target-law TATE with a fixed oracle seed.
TruthOracle true_tate_oracle(const DgpConfig& cfg, std::size_t draws);
double true_tate(const DgpConfig& cfg);

enum class EstimatorKind : std::size_t {
  target_only = 0,
  ss_naive = 1,
  ss = 2,
  global_l2 = 3,
  global_l1 = 4,
};
inline constexpr std::size_t kNumEstimators = 5;
const char* estimator_name(EstimatorKind e);
const char* estimator_label(EstimatorKind e);  // Table-1 style label

struct EstimatorResult {
  double estimate = 0.0;
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  bool ok = false;
  std::string error;
};

struct ReplicationResult {
  std::array<EstimatorResult, kNumEstimators> by_estimator;
};

struct StudyConfig {
  DgpConfig dgp;
  std::size_t n_reps = 200;
  std::vector<double> lambda_grid;  // defaults to the standard grid if empty
  std::uint64_t master_seed = 0;
  std::size_t workers = 1;
  std::size_t n_splits = 10;
  AnalysisOptions analysis{};
};

// The paper's lambda grid.
std::vector<double> default_lambda_grid();

ReplicationResult run_replication(const StudyConfig& cfg, std::size_t rep_index);

struct MetricsRow {
  std::string estimator;
  double bias = 0.0;      // |mean estimate - truth|
  double rmse = 0.0;
  double coverage = 0.0;  // percent
  double ci_length = 0.0;
  std::size_t n_fail = 0;
};

struct StudyReport {
  double truth = 0.0;
  double truth_se = 0.0;
  std::vector<MetricsRow> rows;                  // Table-1 estimator order
  std::vector<ReplicationResult> replications;   // per-rep detail
};

// Deterministic for a fixed master seed regardless of worker count.
StudyReport run_study(const StudyConfig& cfg);

// Pooled fixed-effects regression comparator (not part of the protocol):
// site intercepts, site-specific treatment effects, shared covariate slopes.
// Returns the target site's treatment coefficient and its OLS standard error.
std::pair<double, double> fixed_effects_tate(std::span<const SiteDataset> sites,
                                             std::size_t target_index);

}  // namespace fedtate

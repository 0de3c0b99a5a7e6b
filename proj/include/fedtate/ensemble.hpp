#pragma once
// Data-adaptive site weights: the penalized influence-function objective over
// the simplex, lambda selection by sample splitting, global combination, and
// the influence-based variance.
//
// The quadratic part of the objective is evaluated on the estimator scale
// (sums of squared per-patient contributions to mu_hat, i.e. the spec's
// S-blocks divided by N^2); this is what makes the paper's lambda grid
// {0,...,10} operate as reported.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedtate/estimators.hpp"
#include "fedtate/linalg.hpp"

namespace fedtate {

enum class Penalty { l1, l2 };

// Privacy-safe sufficient statistics for one arm's objective. All-N scaling
// is already applied to the S blocks.
struct QSummaries {
  double s_y = 0.0;
  linalg::Matrix s_x;             // (K-1) x (K-1)
  std::vector<double> s_xy;       // K-1
  std::vector<double> delta;      // K-1
  std::vector<std::size_t> site_sizes;  // source sizes, same order
  std::size_t n_target = 0;
  std::size_t n_total = 0;
};

// One source site's influence contribution, compressed to scalars
// (site-local scale).
struct SourceIfSummary {
  double sum = 0.0;
  double sumsq = 0.0;
  std::size_t n = 0;
};

SourceIfSummary summarize_source_if(std::span<const double> xi_local);

// Raw path: per-patient influence vectors for every source site.
QSummaries build_summaries(std::span<const double> xi_target_local,
                           std::span<const double> xi_shared_local,
                           const std::vector<std::vector<double>>& xi_sources_local,
                           std::span<const double> deltas);

// Compressed path: per-site scalar triplets. Produces output identical to
// the raw path up to float reassociation.
QSummaries build_summaries_compressed(std::span<const double> xi_target_local,
                                      std::span<const double> xi_shared_local,
                                      std::span<const SourceIfSummary> sources,
                                      std::span<const double> deltas);

struct WeightSolution {
  std::vector<double> eta;  // length K, target weight first
  double lambda = 0.0;
  double objective_value = 0.0;
  Penalty penalty = Penalty::l1;
};

// Projected-gradient minimization of
//   Q(eta) = (s_y - 2 eta's_xy + eta's_x eta)/N^2 + lambda sum p(eta_k) delta_k^2
// over {eta_k >= 0, sum eta_k <= 1}; the target weight is the slack.
WeightSolution solve_weights(const QSummaries& summ, double lambda,
                             Penalty penalty);

// Euclidean projection onto {z >= 0, sum z <= 1}. Exposed for tests.
std::vector<double> project_simplex_slack(std::span<const double> v);

// Anchor-and-augment combination: mu_T + sum eta_k (mu_k - mu_T).
double combine(double target_value, std::span<const double> source_values,
               const WeightSolution& weights);

// Influence-based SE and 95% CI around `value`, per the per-site
// sum-of-squares variance with weights applied.
struct SeCi {
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};
SeCi global_variance(const WeightSolution& weights,
                     std::span<const double> xi_target_local,
                     std::span<const SourceIfSummary> source_ifs,
                     std::size_t n_target, double value);

struct GlobalEstimate {
  TreatmentArm arm = TreatmentArm::treated;
  double value = 0.0;
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  WeightSolution weights;
};

// TATE from two per-arm estimates; arm variances add.
struct TateEstimate {
  double value = 0.0;
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};
TateEstimate global_tate(const GlobalEstimate& mu1, const GlobalEstimate& mu0);

// ---------------------------------------------------------------------------
// Study-level assembly shared by the pooled pipeline, the federation
// aggregate, and the simulation harness.

struct StudyArmData {
  double target_mu = 0.0;
  std::span<const double> xi_target_local;
  std::span<const double> xi_shared_local;
  std::vector<double> source_mu;
  std::vector<SourceIfSummary> source_ifs;
};

struct StudyInputs {
  std::size_t n_target = 0;
  std::vector<std::string> source_ids;  // active sources, aggregation order
  std::array<StudyArmData, 2> arm;      // indexed by arm_value
};

struct GlobalResult {
  std::array<GlobalEstimate, 2> arm;
  TateEstimate tate;
  double lambda = 0.0;
};

GlobalResult solve_global(const StudyInputs& inputs, double lambda,
                          Penalty penalty);

// Same combination/variance with externally fixed source weights (the
// sample-size comparators).
GlobalResult fixed_weight_global(const StudyInputs& inputs,
                                 std::span<const double> eta_sources);

// Sample-splitting selection of lambda over a grid. `sites` is target-first;
// each site is split in half n_splits times (both arms must be present in
// each half, redrawn up to 20 times); nuisances and weights are re-fit on
// training halves and scored against the validation-half target-only TATE.
double select_lambda(std::span<const SiteDataset> sites,
                     std::span<const double> grid, std::size_t n_splits,
                     std::uint64_t seed, Penalty penalty,
                     const AnalysisOptions& opts);

// Shared-split variant selecting for both penalties in one pass.
struct LambdaPair {
  double l1 = 0.0;
  double l2 = 0.0;
};
LambdaPair select_lambda_both(std::span<const SiteDataset> sites,
                              std::span<const double> grid,
                              std::size_t n_splits, std::uint64_t seed,
                              const AnalysisOptions& opts);

}  // namespace fedtate

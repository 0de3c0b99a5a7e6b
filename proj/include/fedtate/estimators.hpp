#pragma once
// Site-level mean-potential-outcome estimators and per-patient influence
// functions.
//
// Influence values are stored on the site-local scale: for the target,
// mu_hat - mu = (1/n_T) sum_i xi_i + o_p; for a source-site estimator the
// target-patient and source-patient components are kept separately and
// satisfy mu_hat_k - mu_k = (1/n_T) sum_{i in T} xi_i + (1/n_k) sum_{i in k}
// xi_i. The all-N convention of the ensemble layer is recovered by scaling
// with N/n_T resp. N/n_k; doing the scaling late keeps every site's
// computation independent of N.

#include <array>
#include <string>
#include <vector>

#include "fedtate/domain.hpp"
#include "fedtate/nuisance.hpp"
#include "fedtate/tilt.hpp"

namespace fedtate {

enum class IfMode { simple, general };

// general corrections exist for squared-error (continuous) outcome models
// only; binary outcomes fall back to simple.
IfMode default_if_mode(OutcomeKind kind);

struct ArmEstimate {
  TreatmentArm arm = TreatmentArm::treated;
  double value = 0.0;
  std::vector<double> per_patient_if;  // site-local scale, mean ~ 0
  std::string site_id;
  std::size_t n_contributing = 0;
};

// (1/n_T) sum_i m_a(x_i) under the target's own outcome fit.
double target_or_mean(const SiteDataset& ds_t, const OutcomeFits& ors,
                      TreatmentArm arm);

// Doubly robust AIPW estimate of the target mean potential outcome.
ArmEstimate target_aipw(const SiteDataset& ds_t, const LogisticFit& ps,
                        const OutcomeFits& ors, TreatmentArm arm, double clip,
                        IfMode mode);

// Influence values (site-local scale) for the target AIPW estimator.
std::vector<double> compute_target_if(const SiteDataset& ds_t,
                                      const LogisticFit& ps,
                                      const OutcomeFits& ors, TreatmentArm arm,
                                      double clip, IfMode mode);

// (1/n_k) sum_{A_i=a} omega_i / pi_i * (y_i - m_k(x_i)); the source-side
// augmentation term. Throws FitError when the source has no arm-a patients.
double augmentation_term(const SiteDataset& ds_k, const TiltFit& tilt,
                         const LogisticFit& ps_k, const OutcomeFits& or_k,
                         TreatmentArm arm, double clip);

// Source-augmented estimate: target conditional mean plus the density-ratio
// weighted augmentation. per_patient_if holds the source-patient component.
ArmEstimate source_augmented(double target_or_mean_value,
                             const SiteDataset& ds_k, const TiltFit& tilt,
                             const LogisticFit& ps_k, const OutcomeFits& or_k,
                             TreatmentArm arm, double clip, IfMode mode);

struct SourceIf {
  std::vector<double> on_target;  // one per target patient, local scale
  std::vector<double> on_source;  // one per source patient, local scale
};

// Target-patient component of every source estimator's influence function:
// (m_{a,T}(x_i) - or_mean) plus, in general mode, the refit correction for
// the target outcome parameters. Identical for all sources, so it is
// computed once at the target.
std::vector<double> source_if_target_component(const SiteDataset& ds_t,
                                               const OutcomeFits& or_t,
                                               TreatmentArm arm, IfMode mode);

// Source-patient component; centered by the augmentation term so the
// combined influence values sum to ~0 over all N patients. When the density
// ratio was fixed rather than estimated (the naive comparator),
// tilt_estimated=false omits the tilt refit correction.
std::vector<double> source_if_source_component(const SiteDataset& ds_k,
                                               const TiltFit& tilt,
                                               const LogisticFit& ps_k,
                                               const OutcomeFits& or_k,
                                               TreatmentArm arm, double clip,
                                               IfMode mode,
                                               bool tilt_estimated = true);

SourceIf compute_source_if(const SiteDataset& ds_t, const OutcomeFits& or_t,
                           const SiteDataset& ds_k, const TiltFit& tilt,
                           const LogisticFit& ps_k, const OutcomeFits& or_k,
                           TreatmentArm arm, double clip, IfMode mode);

// Transported (importance-weighted) source estimate of the target mean
// potential outcome, computed entirely from source data:
//   (1/n_k) sum_i [ omega_i m_k(x_i) + 1{A_i=a} omega_i/pi_i (y_i - m_k(x_i)) ].
// Unlike the anchored form above, a source whose outcome level differs from
// the target's shows that difference in its estimate, which is what the
// adaptive weighting penalizes. Its influence function lives entirely on the
// site's own patients, making the per-site variance sums exact.
double transported_mean(const SiteDataset& ds_k, const TiltFit& tilt,
                        const LogisticFit& ps_k, const OutcomeFits& or_k,
                        TreatmentArm arm, double clip);

// Influence values of the transported estimate (site-local scale, mean ~0).
// tilt_estimated=false omits the density-ratio refit term (the naive
// comparator with omega fixed at 1).
std::vector<double> transported_if(const SiteDataset& ds_k, const TiltFit& tilt,
                                   const LogisticFit& ps_k,
                                   const OutcomeFits& or_k, TreatmentArm arm,
                                   double clip, IfMode mode,
                                   bool tilt_estimated = true);

double tate(const ArmEstimate& mu1, const ArmEstimate& mu0);

// Sample-size weighted average of per-site estimates (multi-target helper).
double weighted_target_mean(std::span<const double> values,
                            std::span<const double> sizes);

// ---------------------------------------------------------------------------
// Per-site analysis bundles. These are the computational core shared by the
// federation protocol, the lambda-selection splits, and the simulation
// harness; wiring every consumer through the same code is what makes
// federated-equals-pooled exact.

struct TargetAnalysis {
  LogisticFit ps;
  OutcomeFits ors;
  std::vector<double> cov_means;
  std::size_t n = 0;
  std::array<double, 2> mu_hat{};  // indexed by arm_value
  std::array<double, 2> or_mean{};
  std::array<std::vector<double>, 2> xi_target;  // own-estimator IF
};

struct SourceAnalysis {
  std::string site_id;
  bool dropped = false;
  std::string drop_reason;
  TiltFit tilt;
  LogisticFit ps;
  OutcomeFits ors;
  std::size_t n = 0;
  std::array<double, 2> mu_hat{};        // transported estimate per arm
  std::array<double, 2> augmentation{};  // mu_hat - target or_mean
  std::array<double, 2> if_sum{};    // local-scale sums over source patients
  std::array<double, 2> if_sumsq{};
  std::array<std::vector<double>, 2> xi_source;  // local scale
};

struct AnalysisOptions {
  double clip = 1e-3;
  IfMode mode = IfMode::simple;  // plug-in IFs; general adds refit corrections
  IrlsOptions irls{};
  TiltOptions tilt{};
};

// Fits nuisances and computes both arms' estimates and influence components.
// Throws on fit failures (the caller decides what a failure means).
TargetAnalysis analyze_target(const SiteDataset& ds_t,
                              const AnalysisOptions& opts);

enum class TiltPolicy { solve, identity };

// Never throws for statistical failures: tilt infeasibility, empty arms and
// fit errors produce a dropped analysis with the reason recorded.
// TiltPolicy::identity fixes omega = 1 (the naive comparator).
SourceAnalysis analyze_source(const SiteDataset& ds_k,
                              const TargetMoments& moments,
                              const std::array<double, 2>& target_or_means,
                              const AnalysisOptions& opts,
                              TiltPolicy policy = TiltPolicy::solve);

}  // namespace fedtate

#pragma once
// Core data types, dataset validation, CSV ingestion, and seed derivation.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedtate/linalg.hpp"

namespace fedtate {

enum class TreatmentArm : int { control = 0, treated = 1 };

inline int arm_value(TreatmentArm a) { return static_cast<int>(a); }

enum class OutcomeKind { continuous, binary };

enum class SiteRole { target, source };

// One site's private patient table. Immutable after construction by
// convention; all pipeline code takes it by const reference.
struct SiteDataset {
  std::string site_id;
  linalg::Matrix covariates;       // n rows, p columns
  std::vector<double> treatment;   // entries in {0,1}
  std::vector<double> outcome;
  OutcomeKind outcome_kind = OutcomeKind::continuous;

  std::size_t n() const { return covariates.rows(); }
  std::size_t p() const { return covariates.cols(); }
};

// Returns every invariant violation found; empty means valid. Also flags
// sample-level positivity failures ("no treated units" / "no control units").
std::vector<std::string> validate_dataset(const SiteDataset& ds);

// Arithmetic column means. Throws ValidationError on an empty dataset.
std::vector<double> covariate_means(const SiteDataset& ds);

// Design matrix with an intercept column prepended: [1 | X].
linalg::Matrix augmented_design(const linalg::Matrix& x);

// Indicator vector 1{A_i = a}.
std::vector<double> arm_indicator(const SiteDataset& ds, TreatmentArm arm);

struct SeedSpec {
  std::uint64_t master_seed = 0;
  std::uint64_t replication_index = 0;
  std::string stream_label;
};

// Pure deterministic child-seed derivation (splitmix-style mixing).
std::uint64_t derive_seed(const SeedSpec& spec);

// CSV loader for the `site_id,a,y,x1,...,xp` schema. Rows are grouped by
// site_id preserving first-appearance order. When `outcome_kind` is not
// given, a column of only 0/1 values is read as binary.
std::vector<SiteDataset> load_sites_csv(
    std::istream& in, std::optional<OutcomeKind> outcome_kind = std::nullopt);
std::vector<SiteDataset> load_sites_csv_file(
    const std::string& path,
    std::optional<OutcomeKind> outcome_kind = std::nullopt);

}  // namespace fedtate

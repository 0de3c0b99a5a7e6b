#pragma once
// One-round message protocol: target broadcast, source replies, processing
// aggregation. Wire format is line-delimited JSON with a fixed key order and
// fixed-width numbers (17 significant digits), so message byte sizes depend
// only on (p, K) and never on patient counts.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedtate/ensemble.hpp"
#include "fedtate/estimators.hpp"

namespace fedtate {

inline constexpr const char* kProtocolVersion = "fedtate/1";

struct TargetBroadcast {
  std::string protocol_version = kProtocolVersion;
  std::vector<double> covariate_means;
  std::size_t n_target = 0;
  std::array<double, 2> target_or_mean{};  // indexed by arm_value
  std::array<double, 2> target_mu_hat{};
};

struct SourceReply {
  std::string protocol_version = kProtocolVersion;
  std::string site_id;
  std::optional<std::string> dropped;
  // Absent (empty) when dropped:
  std::vector<double> gamma;
  std::vector<double> ps_coefficients;
  std::array<std::vector<double>, 2> or_coefficients;
  std::array<double, 2> augmentation{};
  std::array<double, 2> if_sum{};    // site-local scale
  std::array<double, 2> if_sumsq{};
  std::size_t n_k = 0;
};

struct DroppedSite {
  std::string site_id;
  std::string reason;
};

struct ProcessingResult {
  std::array<GlobalEstimate, 2> arm;  // indexed by arm_value
  TateEstimate tate;
  double lambda_opt = 0.0;
  Penalty penalty = Penalty::l1;
  std::vector<std::string> site_order;  // target first, then sorted sources
  std::array<std::vector<double>, 2> eta;  // per arm, aligned with site_order
  std::vector<DroppedSite> dropped_sites;
  std::size_t broadcast_bytes = 0;
  std::vector<std::size_t> reply_bytes;  // aligned with sorted replies
};

// Canonical single-line serializations (no trailing newline).
std::string serialize(const TargetBroadcast& msg);
std::string serialize(const SourceReply& msg);
std::string serialize(const ProcessingResult& msg);

// Parsers throw ProtocolError (with a byte offset for malformed payloads,
// including an unknown protocol_version).
TargetBroadcast parse_broadcast(std::string_view text);
SourceReply parse_reply(std::string_view text);

// Local state the target retains between the broadcast and aggregation.
struct TargetState {
  std::string site_id;
  TargetAnalysis analysis;
};

struct ProtocolOptions {
  AnalysisOptions analysis{};
  Penalty penalty = Penalty::l1;
  std::size_t n_splits = 10;
};

// Target-side round: fit nuisances, compute estimates and influence pieces,
// emit the broadcast.
std::pair<TargetBroadcast, TargetState> run_target_round(
    const SiteDataset& ds_t, const AnalysisOptions& opts);

// Source-side round. Statistical failures produce a dropped reply.
SourceReply run_source_round(const SiteDataset& ds_k, const TargetBroadcast& b,
                             const AnalysisOptions& opts);

// External policy supplying lambda when the grid is not a singleton; the
// orchestrator that owns the site datasets binds select_lambda here.
using LambdaSelector =
    std::function<double(std::span<const double> grid, std::uint64_t seed,
                         Penalty penalty)>;

// Processing-site aggregation over an ordered reply list.
ProcessingResult aggregate(const TargetBroadcast& b, const TargetState& state,
                           std::vector<SourceReply> replies,
                           std::span<const double> lambda_grid,
                           std::uint64_t seed, Penalty penalty,
                           const LambdaSelector& selector = nullptr);

// End-to-end runs over in-memory sites (target first). The federated run
// passes every message through serialize/parse, and records the wire bytes.
struct FederatedRun {
  TargetBroadcast broadcast;
  std::vector<SourceReply> replies;
  ProcessingResult result;
  std::string broadcast_wire;
  std::vector<std::string> reply_wires;  // aligned with replies
  std::string result_wire;
};

FederatedRun run_federated_study(std::span<const SiteDataset> sites,
                                 std::span<const double> lambda_grid,
                                 std::uint64_t seed,
                                 const ProtocolOptions& opts);

// Monolithic twin of the federated run; same numerics to within float
// round-trip (which the wire format makes exact).
GlobalResult run_pooled_study(std::span<const SiteDataset> sites,
                              std::span<const double> lambda_grid,
                              std::uint64_t seed, const ProtocolOptions& opts);

}  // namespace fedtate

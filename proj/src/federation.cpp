#include "fedtate/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "fedtate/errors.hpp"

namespace fedtate {

namespace {

// Fixed-width number: ' '/'-' sign slot, 17 significant digits, 3-digit
// exponent. 24 bytes for every finite double, so message sizes depend only
// on field counts.
std::string format_f64(double v) {
  if (!std::isfinite(v)) throw Error("serialize: non-finite value");
  if (v == 0.0) v = 0.0;  // normalize -0
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", std::fabs(v));
  std::string mant(buf);
  const auto epos = mant.find('e');
  std::string digits = mant.substr(epos + 2);
  const char esign = mant[epos + 1];
  mant.erase(epos);
  while (digits.size() < 3) digits.insert(digits.begin(), '0');
  std::string out;
  out.reserve(24);
  out.push_back(std::signbit(v) ? '-' : ' ');
  out += mant;
  out.push_back('e');
  out.push_back(esign);
  out += digits;
  return out;
}

std::string escape_json(std::string_view s) {
  std::string out;
  out.reserve(s.size() + 2);
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out.push_back(c);
        }
    }
  }
  return out;
}

// Minimal canonical-order JSON object writer.
class JsonWriter {
 public:
  void key(std::string_view k) {
    if (!first_) body_.push_back(',');
    first_ = false;
    body_.push_back('"');
    body_ += k;
    body_ += "\":";
  }
  void str(std::string_view k, std::string_view v) {
    key(k);
    body_.push_back('"');
    body_ += escape_json(v);
    body_.push_back('"');
  }
  void num(std::string_view k, double v) {
    key(k);
    body_ += format_f64(v);
  }
  void count(std::string_view k, std::size_t v) {
    key(k);
    body_ += format_f64(static_cast<double>(v));
  }
  void vec(std::string_view k, std::span<const double> v) {
    key(k);
    body_.push_back('[');
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) body_.push_back(',');
      body_ += format_f64(v[i]);
    }
    body_.push_back(']');
  }
  void pair(std::string_view k, const std::array<double, 2>& v) {
    vec(k, std::span<const double>(v.data(), 2));
  }
  void raw(std::string_view k, std::string_view json) {
    key(k);
    body_ += json;
  }
  std::string finish() const { return "{" + body_ + "}"; }

 private:
  std::string body_;
  bool first_ = true;
};

using json = nlohmann::json;

json parse_checked(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ProtocolError(std::string("malformed message: ") + e.what(), e.byte);
  }
}

void check_version(const json& j) {
  if (!j.contains("protocol_version") || !j["protocol_version"].is_string())
    throw ProtocolError("missing protocol_version");
  const std::string v = j["protocol_version"].get<std::string>();
  if (v != kProtocolVersion)
    throw ProtocolError("unsupported protocol_version: " + v);
}

double get_num(const json& j, const char* k) {
  if (!j.contains(k) || !j[k].is_number())
    throw ProtocolError(std::string("missing numeric field: ") + k);
  return j[k].get<double>();
}

std::size_t get_count(const json& j, const char* k) {
  const double v = get_num(j, k);
  if (v < 0 || v != std::floor(v))
    throw ProtocolError(std::string("field is not a count: ") + k);
  return static_cast<std::size_t>(v);
}

std::vector<double> get_vec(const json& j, const char* k) {
  if (!j.contains(k) || !j[k].is_array())
    throw ProtocolError(std::string("missing array field: ") + k);
  std::vector<double> out;
  for (const auto& e : j[k]) {
    if (!e.is_number())
      throw ProtocolError(std::string("non-numeric element in: ") + k);
    out.push_back(e.get<double>());
  }
  return out;
}

std::array<double, 2> get_pair(const json& j, const char* k) {
  auto v = get_vec(j, k);
  if (v.size() != 2)
    throw ProtocolError(std::string("field must have 2 entries: ") + k);
  return {v[0], v[1]};
}

}  // namespace

std::string serialize(const TargetBroadcast& msg) {
  JsonWriter w;
  w.str("protocol_version", msg.protocol_version);
  w.vec("covariate_means", msg.covariate_means);
  w.count("n_target", msg.n_target);
  w.pair("target_or_mean", msg.target_or_mean);
  w.pair("target_mu_hat", msg.target_mu_hat);
  return w.finish();
}

TargetBroadcast parse_broadcast(std::string_view text) {
  const json j = parse_checked(text);
  check_version(j);
  TargetBroadcast b;
  b.covariate_means = get_vec(j, "covariate_means");
  b.n_target = get_count(j, "n_target");
  b.target_or_mean = get_pair(j, "target_or_mean");
  b.target_mu_hat = get_pair(j, "target_mu_hat");
  return b;
}

std::string serialize(const SourceReply& msg) {
  JsonWriter w;
  w.str("protocol_version", msg.protocol_version);
  w.str("site_id", msg.site_id);
  if (msg.dropped) {
    w.str("dropped", *msg.dropped);
    return w.finish();
  }
  w.vec("gamma", msg.gamma);
  w.vec("ps_coefficients", msg.ps_coefficients);
  w.vec("or_coefficients_control", msg.or_coefficients[0]);
  w.vec("or_coefficients_treated", msg.or_coefficients[1]);
  w.pair("augmentation", msg.augmentation);
  w.pair("if_sum", msg.if_sum);
  w.pair("if_sumsq", msg.if_sumsq);
  w.count("n_k", msg.n_k);
  return w.finish();
}

SourceReply parse_reply(std::string_view text) {
  const json j = parse_checked(text);
  check_version(j);
  SourceReply r;
  if (!j.contains("site_id") || !j["site_id"].is_string())
    throw ProtocolError("missing site_id");
  r.site_id = j["site_id"].get<std::string>();
  if (j.contains("dropped")) {
    r.dropped = j["dropped"].get<std::string>();
    return r;
  }
  r.gamma = get_vec(j, "gamma");
  r.ps_coefficients = get_vec(j, "ps_coefficients");
  r.or_coefficients[0] = get_vec(j, "or_coefficients_control");
  r.or_coefficients[1] = get_vec(j, "or_coefficients_treated");
  r.augmentation = get_pair(j, "augmentation");
  r.if_sum = get_pair(j, "if_sum");
  r.if_sumsq = get_pair(j, "if_sumsq");
  r.n_k = get_count(j, "n_k");
  return r;
}

std::string serialize(const ProcessingResult& msg) {
  JsonWriter w;
  w.str("protocol_version", kProtocolVersion);
  for (std::size_t a = 0; a < 2; ++a) {
    const char* name = a == 0 ? "arm_control" : "arm_treated";
    JsonWriter aw;
    aw.num("value", msg.arm[a].value);
    aw.num("se", msg.arm[a].se);
    aw.num("ci_lo", msg.arm[a].lo);
    aw.num("ci_hi", msg.arm[a].hi);
    w.raw(name, aw.finish());
  }
  {
    JsonWriter tw;
    tw.num("value", msg.tate.value);
    tw.num("se", msg.tate.se);
    tw.num("ci_lo", msg.tate.lo);
    tw.num("ci_hi", msg.tate.hi);
    w.raw("tate", tw.finish());
  }
  w.num("lambda_opt", msg.lambda_opt);
  w.str("penalty", msg.penalty == Penalty::l1 ? "l1" : "l2");
  {
    std::string arr = "[";
    for (std::size_t i = 0; i < msg.site_order.size(); ++i) {
      if (i) arr.push_back(',');
      arr += "\"" + escape_json(msg.site_order[i]) + "\"";
    }
    arr.push_back(']');
    w.raw("site_order", arr);
  }
  w.vec("eta_control", msg.eta[0]);
  w.vec("eta_treated", msg.eta[1]);
  {
    std::string arr = "[";
    for (std::size_t i = 0; i < msg.dropped_sites.size(); ++i) {
      if (i) arr.push_back(',');
      arr += "{\"site_id\":\"" + escape_json(msg.dropped_sites[i].site_id) +
             "\",\"reason\":\"" + escape_json(msg.dropped_sites[i].reason) + "\"}";
    }
    arr.push_back(']');
    w.raw("dropped_sites", arr);
  }
  {
    JsonWriter aw;
    aw.count("broadcast_bytes", msg.broadcast_bytes);
    std::string arr = "[";
    for (std::size_t i = 0; i < msg.reply_bytes.size(); ++i) {
      if (i) arr.push_back(',');
      arr += format_f64(static_cast<double>(msg.reply_bytes[i]));
    }
    arr.push_back(']');
    aw.raw("reply_bytes", arr);
    w.raw("audit", aw.finish());
  }
  return w.finish();
}

std::pair<TargetBroadcast, TargetState> run_target_round(
    const SiteDataset& ds_t, const AnalysisOptions& opts) {
  const auto violations = validate_dataset(ds_t);
  if (!violations.empty())
    throw ValidationError("target dataset invalid: " + violations.front());

  TargetState state;
  state.site_id = ds_t.site_id;
  state.analysis = analyze_target(ds_t, opts);

  TargetBroadcast b;
  b.covariate_means = state.analysis.cov_means;
  b.n_target = state.analysis.n;
  b.target_or_mean = state.analysis.or_mean;
  b.target_mu_hat = state.analysis.mu_hat;
  return {std::move(b), std::move(state)};
}

SourceReply run_source_round(const SiteDataset& ds_k, const TargetBroadcast& b,
                             const AnalysisOptions& opts) {
  SourceReply r;
  r.site_id = ds_k.site_id;

  const auto violations = validate_dataset(ds_k);
  if (!violations.empty()) {
    r.dropped = "invalid dataset: " + violations.front();
    return r;
  }

  TargetMoments moments{b.covariate_means, b.n_target};
  SourceAnalysis a = analyze_source(ds_k, moments, b.target_or_mean, opts);
  if (a.dropped) {
    r.dropped = a.drop_reason;
    return r;
  }
  r.gamma = a.tilt.gamma;
  r.ps_coefficients = a.ps.coefficients;
  r.or_coefficients[0] = a.ors.control.coefficients;
  r.or_coefficients[1] = a.ors.treated.coefficients;
  r.augmentation = a.augmentation;
  r.if_sum = a.if_sum;
  r.if_sumsq = a.if_sumsq;
  r.n_k = a.n;
  return r;
}

ProcessingResult aggregate(const TargetBroadcast& b, const TargetState& state,
                           std::vector<SourceReply> replies,
                           std::span<const double> lambda_grid,
                           std::uint64_t seed, Penalty penalty,
                           const LambdaSelector& selector) {
  std::sort(replies.begin(), replies.end(),
            [](const SourceReply& x, const SourceReply& y) {
              return x.site_id < y.site_id;
            });

  ProcessingResult out;
  out.penalty = penalty;
  out.broadcast_bytes = serialize(b).size();
  for (const SourceReply& r : replies) out.reply_bytes.push_back(serialize(r).size());

  StudyInputs inputs;
  inputs.n_target = b.n_target;
  std::vector<const SourceReply*> active;
  for (const SourceReply& r : replies) {
    if (r.dropped) {
      out.dropped_sites.push_back({r.site_id, *r.dropped});
    } else {
      active.push_back(&r);
      inputs.source_ids.push_back(r.site_id);
    }
  }
  for (std::size_t a = 0; a < 2; ++a) {
    StudyArmData& arm = inputs.arm[a];
    arm.target_mu = b.target_mu_hat[a];
    arm.xi_target_local = state.analysis.xi_target[a];

    for (const SourceReply* r : active) {
      arm.source_mu.push_back(b.target_or_mean[a] + r->augmentation[a]);
      arm.source_ifs.push_back({r->if_sum[a], r->if_sumsq[a], r->n_k});
    }
  }

  if (lambda_grid.empty()) throw Error("aggregate: empty lambda grid");
  double lambda = lambda_grid[0];
  if (lambda_grid.size() > 1) {
    if (!selector)
      throw Error("aggregate: lambda grid needs a selection policy");
    lambda = selector(lambda_grid, seed, penalty);
  }

  GlobalResult g = solve_global(inputs, lambda, penalty);
  out.lambda_opt = lambda;
  out.tate = g.tate;

  // eta aligned with [target, sorted replies], dropped sites at weight 0.
  out.site_order.push_back(state.site_id);
  for (const SourceReply& r : replies) out.site_order.push_back(r.site_id);
  for (std::size_t a = 0; a < 2; ++a) {
    out.arm[a] = g.arm[a];
    std::vector<double>& eta = out.eta[a];
    eta.assign(replies.size() + 1, 0.0);
    eta[0] = g.arm[a].weights.eta[0];
    std::size_t active_idx = 0;
    for (std::size_t i = 0; i < replies.size(); ++i)
      if (!replies[i].dropped) eta[i + 1] = g.arm[a].weights.eta[++active_idx];
  }
  return out;
}

FederatedRun run_federated_study(std::span<const SiteDataset> sites,
                                 std::span<const double> lambda_grid,
                                 std::uint64_t seed,
                                 const ProtocolOptions& opts) {
  if (sites.empty()) throw ValidationError("no sites");
  FederatedRun run;

  auto [broadcast, state] = run_target_round(sites[0], opts.analysis);
  run.broadcast_wire = serialize(broadcast);
  run.broadcast = parse_broadcast(run.broadcast_wire);

  for (std::size_t k = 1; k < sites.size(); ++k) {
    SourceReply reply = run_source_round(sites[k], run.broadcast, opts.analysis);
    run.reply_wires.push_back(serialize(reply));
    run.replies.push_back(parse_reply(run.reply_wires.back()));
  }

  // Lambda selection re-runs the training pipeline, which needs the site
  // data; the orchestrator (which owns the data) supplies the policy.
  std::vector<SiteDataset> owned(sites.begin(), sites.end());
  LambdaSelector selector = [owned = std::move(owned), &opts](
                                std::span<const double> grid, std::uint64_t s,
                                Penalty pen) {
    return select_lambda(owned, grid, opts.n_splits, s, pen, opts.analysis);
  };

  run.result = aggregate(run.broadcast, state, run.replies, lambda_grid, seed,
                         opts.penalty, selector);
  run.result_wire = serialize(run.result);
  return run;
}

GlobalResult run_pooled_study(std::span<const SiteDataset> sites,
                              std::span<const double> lambda_grid,
                              std::uint64_t seed, const ProtocolOptions& opts) {
  if (sites.empty()) throw ValidationError("no sites");
  TargetAnalysis target = analyze_target(sites[0], opts.analysis);
  TargetMoments moments{target.cov_means, target.n};

  struct Entry {
    std::string id;
    SourceAnalysis analysis;
  };
  std::vector<Entry> entries;
  for (std::size_t k = 1; k < sites.size(); ++k)
    entries.push_back(
        {sites[k].site_id,
         analyze_source(sites[k], moments, target.or_mean, opts.analysis)});
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.id < b.id; });

  StudyInputs inputs;
  inputs.n_target = target.n;
  std::vector<const SourceAnalysis*> active;
  for (const Entry& e : entries)
    if (!e.analysis.dropped) {
      active.push_back(&e.analysis);
      inputs.source_ids.push_back(e.id);
    }
  for (std::size_t a = 0; a < 2; ++a) {
    StudyArmData& arm = inputs.arm[a];
    arm.target_mu = target.mu_hat[a];
    arm.xi_target_local = target.xi_target[a];

    for (const SourceAnalysis* sa : active) {
      arm.source_mu.push_back(sa->mu_hat[a]);
      arm.source_ifs.push_back({sa->if_sum[a], sa->if_sumsq[a], sa->n});
    }
  }

  double lambda = lambda_grid[0];
  if (lambda_grid.size() > 1)
    lambda = select_lambda(sites, lambda_grid, opts.n_splits, seed, opts.penalty,
                           opts.analysis);
  return solve_global(inputs, lambda, opts.penalty);
}

}  // namespace fedtate

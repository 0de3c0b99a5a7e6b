// Command-line front end: simulate (Monte Carlo studies), estimate (the
// federated protocol on CSV data), report (Table-style rendering of metrics).

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedtate/errors.hpp"
#include "fedtate/federation.hpp"
#include "fedtate/simulation.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitProtocol = 3;

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> grid;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      grid.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw fedtate::ValidationError("lambda grid: not a number: '" + tok + "'");
    }
  }
  if (grid.empty()) throw fedtate::ValidationError("lambda grid: empty");
  return grid;
}

std::string grid_to_string(const std::vector<double>& grid) {
  std::string out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (i) out.push_back(',');
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", grid[i]);
    out += buf;
  }
  return out;
}

// Flat key=value config file; unknown keys rejected.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::ifstream f(path);
  if (!f) throw fedtate::ValidationError("cannot open config file: " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
      line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    const auto eq = line.find('=', start);
    if (eq == std::string::npos)
      throw fedtate::ValidationError("config line " + std::to_string(line_no) +
                                     ": expected key=value");
    kv[line.substr(start, eq - start)] = line.substr(eq + 1);
  }
  return kv;
}

std::string git_describe() {
  FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::uint64_t resolve_seed(bool seed_given, std::uint64_t seed) {
  if (seed_given) return seed;
  if (const char* env = std::getenv("FEDTATE_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw fedtate::ValidationError("FEDTATE_SEED is not an integer");
    }
  }
  return 0;
}

std::string sanitize_filename(const std::string& s) {
  std::string out;
  for (char c : s)
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw fedtate::Error("cannot write " + path.string());
  f << content;
}

struct SimulateArgs {
  std::string config_path;
  std::string spec = "I";
  std::string density = "sparse";
  std::size_t k_sites = 10;
  std::size_t p_cov = 2;
  std::size_t reps = 200;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t workers = 1;
  std::size_t splits = 10;
  std::size_t target_n = 100;
  std::string lambda_grid;
  std::string out_dir = ".";
  bool mu1_empirical = false;
  bool print_config = false;
};

void apply_config_file(SimulateArgs& a, const std::string& path,
                       const CLI::App* cmd) {
  const auto kv = read_config_file(path);
  const auto was_set = [&](const char* flag) { return cmd->count(flag) > 0; };
  for (const auto& [k, v] : kv) {
    if (k == "spec") {
      if (!was_set("--spec")) a.spec = v;
    } else if (k == "density") {
      if (!was_set("--density")) a.density = v;
    } else if (k == "K") {
      if (!was_set("--K")) a.k_sites = std::stoul(v);
    } else if (k == "P") {
      if (!was_set("--P")) a.p_cov = std::stoul(v);
    } else if (k == "reps") {
      if (!was_set("--reps")) a.reps = std::stoul(v);
    } else if (k == "seed") {
      if (!was_set("--seed")) {
        a.seed = std::stoull(v);
        a.seed_given = true;
      }
    } else if (k == "workers") {
      if (!was_set("--workers")) a.workers = std::stoul(v);
    } else if (k == "splits") {
      if (!was_set("--splits")) a.splits = std::stoul(v);
    } else if (k == "target_n") {
      if (!was_set("--target-n")) a.target_n = std::stoul(v);
    } else if (k == "lambda_grid") {
      if (!was_set("--lambda-grid")) a.lambda_grid = v;
    } else if (k == "mu1_empirical") {
      if (!was_set("--mu1-empirical")) a.mu1_empirical = v == "1" || v == "true";
    } else if (k == "out") {
      if (!was_set("--out")) a.out_dir = v;
    } else {
      throw fedtate::ValidationError("config: unknown key '" + k + "'");
    }
  }
}

int cmd_simulate(const SimulateArgs& args) {
  fedtate::StudyConfig cfg;
  cfg.dgp.spec = fedtate::parse_specification(args.spec);
  cfg.dgp.density = fedtate::parse_density(args.density);
  cfg.dgp.k_sites = args.k_sites;
  cfg.dgp.p_cov = args.p_cov;
  cfg.dgp.target_n = args.target_n;
  cfg.dgp.mu1_empirical = args.mu1_empirical;
  cfg.n_reps = args.reps;
  cfg.master_seed = resolve_seed(args.seed_given, args.seed);
  cfg.workers = args.workers;
  cfg.n_splits = args.splits;
  cfg.lambda_grid = args.lambda_grid.empty() ? fedtate::default_lambda_grid()
                                             : parse_grid(args.lambda_grid);
  if (cfg.n_reps == 0) throw fedtate::ValidationError("reps: must be >= 1");
  if (cfg.dgp.k_sites < 2) throw fedtate::ValidationError("K: must be >= 2");
  if (cfg.dgp.p_cov < 2) throw fedtate::ValidationError("P: must be >= 2");
  if (cfg.dgp.target_n < 4) throw fedtate::ValidationError("target_n: must be >= 4");

  if (args.print_config) {
    std::printf("spec=%s\ndensity=%s\nK=%zu\nP=%zu\nreps=%zu\nseed=%llu\n"
                "workers=%zu\nsplits=%zu\ntarget_n=%zu\nlambda_grid=%s\n"
                "mu1_empirical=%d\nout=%s\n",
                fedtate::to_string(cfg.dgp.spec).c_str(),
                fedtate::to_string(cfg.dgp.density).c_str(), cfg.dgp.k_sites,
                cfg.dgp.p_cov, cfg.n_reps,
                static_cast<unsigned long long>(cfg.master_seed), cfg.workers,
                cfg.n_splits, cfg.dgp.target_n,
                grid_to_string(cfg.lambda_grid).c_str(),
                cfg.dgp.mu1_empirical ? 1 : 0, args.out_dir.c_str());
    return kExitOk;
  }

  fs::create_directories(args.out_dir);
  const fedtate::StudyReport report = fedtate::run_study(cfg);

  std::string metrics = "estimator,bias,rmse,coverage,ci_length,n_fail\n";
  for (const auto& row : report.rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g,%.10g,%zu\n",
                  row.estimator.c_str(), row.bias, row.rmse, row.coverage,
                  row.ci_length, row.n_fail);
    metrics += buf;
  }
  write_file(fs::path(args.out_dir) / "metrics.csv", metrics);

  std::string reps = "estimator,rep,estimate,se,lo,hi,ok\n";
  for (std::size_t i = 0; i < report.replications.size(); ++i) {
    for (std::size_t e = 0; e < fedtate::kNumEstimators; ++e) {
      const auto& r = report.replications[i].by_estimator[e];
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%zu,%.10g,%.10g,%.10g,%.10g,%d\n",
                    fedtate::estimator_name(static_cast<fedtate::EstimatorKind>(e)),
                    i, r.estimate, r.se, r.lo, r.hi, r.ok ? 1 : 0);
      reps += buf;
    }
  }
  write_file(fs::path(args.out_dir) / "replications.csv", reps);

  ordered_json manifest;
  manifest["command"] = "simulate";
  manifest["spec"] = fedtate::to_string(cfg.dgp.spec);
  manifest["density"] = fedtate::to_string(cfg.dgp.density);
  manifest["K"] = cfg.dgp.k_sites;
  manifest["P"] = cfg.dgp.p_cov;
  manifest["target_n"] = cfg.dgp.target_n;
  manifest["reps"] = cfg.n_reps;
  manifest["seed"] = cfg.master_seed;
  manifest["workers"] = cfg.workers;
  manifest["splits"] = cfg.n_splits;
  manifest["lambda_grid"] = grid_to_string(cfg.lambda_grid);
  manifest["mu1_empirical"] = cfg.dgp.mu1_empirical;
  manifest["truth"] = report.truth;
  manifest["truth_se"] = report.truth_se;
  manifest["git"] = git_describe();
  manifest["generated_at"] = static_cast<long long>(std::time(nullptr));
  write_file(fs::path(args.out_dir) / "manifest.json", manifest.dump(2) + "\n");

  std::printf("wrote %s/{metrics.csv,replications.csv,manifest.json} (truth %.6f)\n",
              args.out_dir.c_str(), report.truth);
  return kExitOk;
}

struct EstimateArgs {
  std::string data_path;
  std::string target_id;
  std::string out_dir = ".";
  std::string lambda_grid;
  std::string penalty = "l1";
  std::string outcome = "auto";
  std::size_t splits = 10;
  std::uint64_t seed = 0;
  bool seed_given = false;
  double clip = 1e-3;
};

int cmd_estimate(const EstimateArgs& args) {
  std::optional<fedtate::OutcomeKind> kind;
  if (args.outcome == "continuous") kind = fedtate::OutcomeKind::continuous;
  else if (args.outcome == "binary") kind = fedtate::OutcomeKind::binary;
  else if (args.outcome != "auto")
    throw fedtate::ValidationError("outcome must be auto|continuous|binary");

  std::vector<fedtate::SiteDataset> sites =
      fedtate::load_sites_csv_file(args.data_path, kind);

  std::size_t target_idx = sites.size();
  for (std::size_t i = 0; i < sites.size(); ++i)
    if (sites[i].site_id == args.target_id) target_idx = i;
  if (target_idx == sites.size())
    throw fedtate::ValidationError("target site '" + args.target_id +
                                   "' not present in data");
  if (target_idx != 0) {
    // Target first; remaining sites keep file order.
    std::vector<fedtate::SiteDataset> ordered;
    ordered.push_back(std::move(sites[target_idx]));
    for (std::size_t i = 0; i < sites.size(); ++i)
      if (i != target_idx) ordered.push_back(std::move(sites[i]));
    sites = std::move(ordered);
  }

  const auto violations = fedtate::validate_dataset(sites[0]);
  if (!violations.empty())
    throw fedtate::ValidationError("target dataset: " + violations.front());

  fedtate::ProtocolOptions opts;
  opts.analysis.clip = args.clip;
  opts.analysis.mode = fedtate::IfMode::simple;
  opts.penalty = args.penalty == "l2" ? fedtate::Penalty::l2 : fedtate::Penalty::l1;
  opts.n_splits = args.splits;
  const std::vector<double> grid = args.lambda_grid.empty()
                                       ? fedtate::default_lambda_grid()
                                       : parse_grid(args.lambda_grid);
  const std::uint64_t seed = resolve_seed(args.seed_given, args.seed);

  const fedtate::FederatedRun run =
      fedtate::run_federated_study(sites, grid, seed, opts);

  fs::create_directories(args.out_dir);
  write_file(fs::path(args.out_dir) / "broadcast.ndjson", run.broadcast_wire + "\n");
  for (std::size_t i = 0; i < run.replies.size(); ++i) {
    const std::string name =
        "reply_" + sanitize_filename(run.replies[i].site_id) + ".ndjson";
    write_file(fs::path(args.out_dir) / name, run.reply_wires[i] + "\n");
  }
  write_file(fs::path(args.out_dir) / "result.ndjson", run.result_wire + "\n");

  const fedtate::ProcessingResult& res = run.result;
  std::string summary;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "Target site: %s\nTATE: %.6f  SE: %.6f  95%% CI: [%.6f, %.6f]\n"
                "lambda: %g  penalty: %s\n\nsite  eta(control)  eta(treated)\n",
                args.target_id.c_str(), res.tate.value, res.tate.se, res.tate.lo,
                res.tate.hi, res.lambda_opt,
                res.penalty == fedtate::Penalty::l1 ? "l1" : "l2");
  summary += buf;
  for (std::size_t i = 0; i < res.site_order.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%-8s %12.6f %12.6f\n",
                  res.site_order[i].c_str(), res.eta[0][i], res.eta[1][i]);
    summary += buf;
  }
  if (!res.dropped_sites.empty()) {
    summary += "\ndropped sites:\n";
    for (const auto& d : res.dropped_sites) {
      std::snprintf(buf, sizeof buf, "  %s: %s\n", d.site_id.c_str(),
                    d.reason.c_str());
      summary += buf;
    }
  }
  write_file(fs::path(args.out_dir) / "summary.txt", summary);
  std::fputs(summary.c_str(), stdout);
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> metrics_files;
  std::string out_dir = ".";
};

struct ReportRow {
  std::string spec = "-";
  std::string density = "-";
  long k = -1;
  long p = -1;
  std::string estimator;
  double bias = 0, rmse = 0, coverage = 0, ci_length = 0;
  std::size_t n_fail = 0;
};

int estimator_order(const std::string& name) {
  for (std::size_t e = 0; e < fedtate::kNumEstimators; ++e)
    if (name == fedtate::estimator_name(static_cast<fedtate::EstimatorKind>(e)))
      return static_cast<int>(e);
  return 99;
}

int cmd_report(const ReportArgs& args) {
  std::vector<ReportRow> rows;
  for (const std::string& path : args.metrics_files) {
    std::ifstream f(path);
    if (!f) throw fedtate::ValidationError("cannot open metrics file: " + path);

    std::string spec = "-", density = "-";
    long k = -1, p = -1;
    const fs::path manifest_path = fs::path(path).parent_path() / "manifest.json";
    if (fs::exists(manifest_path)) {
      std::ifstream mf(manifest_path);
      try {
        nlohmann::json m = nlohmann::json::parse(mf);
        if (m.contains("spec")) spec = m["spec"].get<std::string>();
        if (m.contains("density")) density = m["density"].get<std::string>();
        if (m.contains("K")) k = m["K"].get<long>();
        if (m.contains("P")) p = m["P"].get<long>();
      } catch (const nlohmann::json::exception&) {
        throw fedtate::ValidationError("malformed manifest: " + manifest_path.string());
      }
    }

    std::string line;
    if (!std::getline(f, line) || line.rfind("estimator,bias,rmse", 0) != 0)
      throw fedtate::ValidationError("malformed metrics header in " + path);
    std::size_t line_no = 1;
    while (std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::stringstream ss(line);
      ReportRow row;
      row.spec = spec;
      row.density = density;
      row.k = k;
      row.p = p;
      std::string tok;
      try {
        std::getline(ss, row.estimator, ',');
        std::getline(ss, tok, ','); row.bias = std::stod(tok);
        std::getline(ss, tok, ','); row.rmse = std::stod(tok);
        std::getline(ss, tok, ','); row.coverage = std::stod(tok);
        std::getline(ss, tok, ','); row.ci_length = std::stod(tok);
        std::getline(ss, tok, ','); row.n_fail = std::stoul(tok);
      } catch (const std::exception&) {
        throw fedtate::ValidationError(path + " line " + std::to_string(line_no) +
                                       ": malformed row");
      }
      rows.push_back(std::move(row));
    }
  }

  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.spec != b.spec) return a.spec < b.spec;
    if (a.k != b.k) return a.k < b.k;
    return estimator_order(a.estimator) < estimator_order(b.estimator);
  });

  std::string md =
      "| Spec | Density | K | P | Estimator | Bias | RMSE | Cov. | Len. | Fail |\n"
      "|------|---------|---|---|-----------|------|------|------|------|------|\n";
  std::string long_csv = "spec,density,K,P,estimator,metric,value\n";
  for (const ReportRow& r : rows) {
    char buf[512];
    const char* label = r.estimator.c_str();
    for (std::size_t e = 0; e < fedtate::kNumEstimators; ++e) {
      const auto kind = static_cast<fedtate::EstimatorKind>(e);
      if (r.estimator == fedtate::estimator_name(kind))
        label = fedtate::estimator_label(kind);
    }
    std::snprintf(buf, sizeof buf,
                  "| %s | %s | %ld | %ld | %s | %.4f | %.4f | %.4f | %.4f | %zu |\n",
                  r.spec.c_str(), r.density.c_str(), r.k, r.p, label, r.bias,
                  r.rmse, r.coverage, r.ci_length, r.n_fail);
    md += buf;
    const std::pair<const char*, double> metrics[] = {
        {"bias", r.bias},
        {"rmse", r.rmse},
        {"coverage", r.coverage},
        {"ci_length", r.ci_length},
        {"n_fail", static_cast<double>(r.n_fail)}};
    for (const auto& [name, value] : metrics) {
      std::snprintf(buf, sizeof buf, "%s,%s,%ld,%ld,%s,%s,%.10g\n", r.spec.c_str(),
                    r.density.c_str(), r.k, r.p, r.estimator.c_str(), name, value);
      long_csv += buf;
    }
  }

  fs::create_directories(args.out_dir);
  write_file(fs::path(args.out_dir) / "report.md", md);
  write_file(fs::path(args.out_dir) / "long.csv", long_csv);
  std::fputs(md.c_str(), stdout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated doubly robust TATE estimation"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* simulate = app.add_subcommand("simulate", "Run a Monte Carlo study");
  simulate->add_option("--config", sim.config_path, "flat key=value config file");
  simulate->add_option("--spec", sim.spec, "specification I..V");
  simulate->add_option("--density", sim.density, "dense|sparse");
  simulate->add_option("--K", sim.k_sites, "total sites");
  simulate->add_option("--P", sim.p_cov, "covariates");
  simulate->add_option("--reps", sim.reps, "replications");
  CLI::Option* seed_opt = simulate->add_option("--seed", sim.seed, "master seed");
  simulate->add_option("--workers", sim.workers, "worker threads");
  simulate->add_option("--splits", sim.splits, "lambda selection splits");
  simulate->add_option("--target-n", sim.target_n, "target site size");
  simulate->add_option("--lambda-grid", sim.lambda_grid, "comma-separated grid");
  simulate->add_flag("--mu1-empirical", sim.mu1_empirical,
                     "center outcomes at the per-replication target mean");
  simulate->add_option("--out", sim.out_dir, "output directory");
  simulate->add_flag("--print-config", sim.print_config, "print effective config");

  EstimateArgs est;
  CLI::App* estimate = app.add_subcommand("estimate", "Federated estimation on CSV data");
  estimate->add_option("data", est.data_path, "input CSV")->required();
  estimate->add_option("--target", est.target_id, "target site id")->required();
  estimate->add_option("--out", est.out_dir, "output directory");
  estimate->add_option("--lambda-grid", est.lambda_grid, "comma-separated grid");
  estimate->add_option("--penalty", est.penalty, "l1|l2");
  estimate->add_option("--outcome", est.outcome, "auto|continuous|binary");
  estimate->add_option("--splits", est.splits, "lambda selection splits");
  CLI::Option* est_seed = estimate->add_option("--seed", est.seed, "seed");
  estimate->add_option("--clip", est.clip, "propensity clipping");

  ReportArgs rep;
  CLI::App* report = app.add_subcommand("report", "Render metrics tables");
  report->add_option("metrics", rep.metrics_files, "metrics.csv files")->required();
  report->add_option("--out", rep.out_dir, "output directory");

  try {
    app.parse(argc, argv);
    if (simulate->parsed()) {
      if (!sim.config_path.empty()) apply_config_file(sim, sim.config_path, simulate);
      sim.seed_given = sim.seed_given || seed_opt->count() > 0;
      return cmd_simulate(sim);
    }
    if (estimate->parsed()) {
      est.seed_given = est_seed->count() > 0;
      return cmd_estimate(est);
    }
    if (report->parsed()) return cmd_report(rep);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitValidation;
  } catch (const fedtate::ProtocolError& e) {
    std::fprintf(stderr, "protocol error: %s\n", e.what());
    return kExitProtocol;
  } catch (const fedtate::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitOk;
}

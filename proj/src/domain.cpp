#include "fedtate/domain.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "fedtate/errors.hpp"
#include "fedtate/kernels/kernels.hpp"
#include "fedtate/rng.hpp"

namespace fedtate {

std::vector<std::string> validate_dataset(const SiteDataset& ds) {
  std::vector<std::string> out;
  const std::size_t n = ds.n();
  if (n == 0) {
    out.push_back("empty dataset");
    return out;
  }
  if (ds.treatment.size() != n)
    out.push_back("treatment length " + std::to_string(ds.treatment.size()) +
                  " != n " + std::to_string(n));
  if (ds.outcome.size() != n)
    out.push_back("outcome length " + std::to_string(ds.outcome.size()) +
                  " != n " + std::to_string(n));

  for (std::size_t j = 0; j < ds.p(); ++j) {
    auto col = ds.covariates.col(j);
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(col[i]))
        out.push_back("non-finite entry at (" + std::to_string(i) + "," +
                      std::to_string(j) + ")");
  }

  std::size_t treated = 0, control = 0;
  for (std::size_t i = 0; i < ds.treatment.size() && i < n; ++i) {
    const double a = ds.treatment[i];
    if (a == 1.0)
      ++treated;
    else if (a == 0.0)
      ++control;
    else
      out.push_back("treatment entry not in {0,1} at row " + std::to_string(i));
  }
  if (treated == 0) out.push_back("no treated units");
  if (control == 0) out.push_back("no control units");

  for (std::size_t i = 0; i < ds.outcome.size() && i < n; ++i) {
    const double y = ds.outcome[i];
    if (!std::isfinite(y)) {
      out.push_back("non-finite outcome at row " + std::to_string(i));
    } else if (ds.outcome_kind == OutcomeKind::binary && y != 0.0 && y != 1.0) {
      out.push_back("binary outcome entry not in {0,1} at row " +
                    std::to_string(i));
    }
  }
  return out;
}

std::vector<double> covariate_means(const SiteDataset& ds) {
  if (ds.n() == 0) throw ValidationError("covariate_means: empty dataset");
  std::vector<double> means(ds.p());
  const double inv_n = 1.0 / static_cast<double>(ds.n());
  for (std::size_t j = 0; j < ds.p(); ++j)
    means[j] = kernels::sum(ds.covariates.col(j)) * inv_n;
  return means;
}

linalg::Matrix augmented_design(const linalg::Matrix& x) {
  linalg::Matrix d(x.rows(), x.cols() + 1);
  for (std::size_t i = 0; i < x.rows(); ++i) d(i, 0) = 1.0;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    auto src = x.col(j);
    auto dst = d.col(j + 1);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return d;
}

std::vector<double> arm_indicator(const SiteDataset& ds, TreatmentArm arm) {
  const double a = static_cast<double>(arm_value(arm));
  std::vector<double> ind(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i)
    ind[i] = ds.treatment[i] == a ? 1.0 : 0.0;
  return ind;
}

std::uint64_t derive_seed(const SeedSpec& spec) {
  return rng::mix_seed(spec.master_seed, spec.replication_index,
                       spec.stream_label);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_num(const std::string& s, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("csv line " + std::to_string(line_no) +
                          ": not a number: '" + s + "'");
  }
}

}  // namespace

std::vector<SiteDataset> load_sites_csv(std::istream& in,
                                        std::optional<OutcomeKind> outcome_kind) {
  std::string line;
  if (!std::getline(in, line))
    throw ValidationError("csv: empty input");
  auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "site_id" || header[1] != "a" ||
      header[2] != "y")
    throw ValidationError("csv: header must be site_id,a,y,x1,...,xp");
  const std::size_t p = header.size() - 3;
  for (std::size_t j = 0; j < p; ++j)
    if (header[3 + j] != "x" + std::to_string(j + 1))
      throw ValidationError("csv: covariate column " + std::to_string(j + 4) +
                            " must be named x" + std::to_string(j + 1));

  struct Rows {
    std::vector<double> a, y;
    std::vector<std::vector<double>> x;
  };
  std::vector<std::string> order;
  std::map<std::string, Rows> by_site;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw ValidationError("csv line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, got " +
                            std::to_string(fields.size()));
    const std::string& sid = fields[0];
    auto [it, inserted] = by_site.try_emplace(sid);
    if (inserted) {
      order.push_back(sid);
      it->second.x.resize(p);
    }
    Rows& rows = it->second;
    rows.a.push_back(parse_num(fields[1], line_no));
    rows.y.push_back(parse_num(fields[2], line_no));
    for (std::size_t j = 0; j < p; ++j)
      rows.x[j].push_back(parse_num(fields[3 + j], line_no));
  }
  if (order.empty()) throw ValidationError("csv: no data rows");

  bool all_binary = true;
  for (const auto& sid : order)
    for (double y : by_site[sid].y)
      if (y != 0.0 && y != 1.0) all_binary = false;
  const OutcomeKind kind = outcome_kind.value_or(
      all_binary ? OutcomeKind::binary : OutcomeKind::continuous);

  std::vector<SiteDataset> sites;
  sites.reserve(order.size());
  for (const auto& sid : order) {
    Rows& rows = by_site[sid];
    const std::size_t n = rows.a.size();
    SiteDataset ds;
    ds.site_id = sid;
    ds.covariates = linalg::Matrix(n, p);
    for (std::size_t j = 0; j < p; ++j) {
      auto dst = ds.covariates.col(j);
      std::copy(rows.x[j].begin(), rows.x[j].end(), dst.begin());
    }
    ds.treatment = std::move(rows.a);
    ds.outcome = std::move(rows.y);
    ds.outcome_kind = kind;
    sites.push_back(std::move(ds));
  }
  return sites;
}

std::vector<SiteDataset> load_sites_csv_file(const std::string& path,
                                             std::optional<OutcomeKind> outcome_kind) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open csv file: " + path);
  return load_sites_csv(f, outcome_kind);
}

}  // namespace fedtate

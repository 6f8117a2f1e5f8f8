#pragma once

// Run records, per-config aggregates, baseline-vs-candidate gain tables and
// their json / csv / markdown renderings.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tripledml/errors.hpp"
#include "tripledml/hyper.hpp"

namespace tripledml {

inline constexpr int kReportSchemaVersion = 1;

struct RunRecord {
  std::string loss;
  HyperConfig config;
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  double val_accuracy = 0.0;
  std::size_t epochs_trained = 0;
  double wall_time = 0.0;  // seconds

  bool operator==(const RunRecord&) const = default;
};

struct ConfigAggregate {
  std::string loss;
  HyperConfig config;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  std::size_t n = 0;

  bool operator==(const ConfigAggregate&) const = default;
};

enum class SizeBucket { small, medium, large, extra_large };

inline std::string_view to_string(SizeBucket b) {
  switch (b) {
    case SizeBucket::small: return "small";
    case SizeBucket::medium: return "medium";
    case SizeBucket::large: return "large";
    case SizeBucket::extra_large: return "extra-large";
  }
  return "?";
}

/// small <= 1000; medium 4000-5000; large 10000-11000; extra-large >= 50000.
/// Sizes between the bands have no bucket.
inline std::optional<SizeBucket> size_bucket(std::size_t n) {
  if (n <= 1000) return SizeBucket::small;
  if (n >= 4000 && n <= 5000) return SizeBucket::medium;
  if (n >= 10000 && n <= 11000) return SizeBucket::large;
  if (n >= 50000) return SizeBucket::extra_large;
  return std::nullopt;
}

struct ReportMetadata {
  std::string dataset;
  std::size_t dataset_size = 0;
  std::string loss;
  std::vector<std::uint64_t> seeds;
  std::size_t fold_count = 0;

  bool operator==(const ReportMetadata&) const = default;

  std::string protocol() const {
    std::string s = "seeds=";
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
    return s + ";folds=" + std::to_string(fold_count);
  }
};

struct RunReport {
  ReportMetadata metadata;
  std::vector<RunRecord> records;
  std::vector<ConfigAggregate> aggregates;
  std::size_t best_index = 0;

  const ConfigAggregate& best() const {
    if (aggregates.empty()) throw ContractError("report has no aggregates");
    return aggregates.at(best_index);
  }

  bool operator==(const RunReport&) const = default;
};

/// Arithmetic mean and sample std per (loss, config), ordered by config.
inline std::vector<ConfigAggregate> aggregate(std::span<const RunRecord> records) {
  if (records.empty()) throw ContractError("aggregate of an empty record set");
  std::map<std::pair<std::string, HyperConfig>, std::vector<double>> groups;
  for (const auto& r : records) groups[{r.loss, r.config}].push_back(r.val_accuracy);
  std::vector<ConfigAggregate> out;
  for (const auto& [key, acc] : groups) {
    ConfigAggregate a;
    a.loss = key.first;
    a.config = key.second;
    a.n = acc.size();
    double s = 0.0;
    for (double v : acc) s += v;
    a.mean = s / static_cast<double>(a.n);
    if (a.n > 1) {
      double ss = 0.0;
      for (double v : acc) ss += (v - a.mean) * (v - a.mean);
      a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
    }
    out.push_back(a);
  }
  return out;
}

/// Index of the highest mean; ties go to the smallest config (the
/// aggregates are config-ordered, so the first maximum).
inline std::size_t best_aggregate(std::span<const ConfigAggregate> aggs) {
  if (aggs.empty()) throw ContractError("no aggregates to choose from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < aggs.size(); ++i)
    if (aggs[i].mean > aggs[best].mean) best = i;
  return best;
}

inline RunReport make_report(ReportMetadata meta, std::vector<RunRecord> records) {
  RunReport r;
  r.metadata = std::move(meta);
  r.records = std::move(records);
  r.aggregates = aggregate(r.records);
  r.best_index = best_aggregate(r.aggregates);
  return r;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Mean accuracy (fraction) of one system on one dataset.
struct DatasetScore {
  std::string dataset;
  std::size_t size = 0;
  double mean = 0.0;
  std::string protocol;
};

inline DatasetScore score_of(const RunReport& report) {
  return {report.metadata.dataset, report.metadata.dataset_size, report.best().mean, report.metadata.protocol()};
}

struct GainRow {
  std::string dataset;
  std::size_t size = 0;
  std::optional<SizeBucket> bucket;
  double baseline = 0.0;   // fraction
  double candidate = 0.0;  // fraction
  double gain_pp = 0.0;    // percentage points
};

struct BucketGain {
  SizeBucket bucket;
  double mean_gain_pp = 0.0;
  std::size_t datasets = 0;
};

struct GainTable {
  std::vector<GainRow> rows;
  std::vector<BucketGain> buckets;
};

/// Gains of `candidate` over `baseline`, matched by dataset name in
/// baseline order. Both sides must share dataset sizes and protocol.
inline GainTable compare(std::span<const DatasetScore> baseline, std::span<const DatasetScore> candidate) {
  if (baseline.size() != candidate.size()) throw ContractError("compare: reports cover different dataset sets");
  GainTable table;
  for (const auto& b : baseline) {
    auto it = std::find_if(candidate.begin(), candidate.end(), [&](const auto& c) { return c.dataset == b.dataset; });
    if (it == candidate.end()) throw ContractError("compare: candidate has no result for dataset '" + b.dataset + "'");
    if (it->size != b.size || it->protocol != b.protocol) {
      throw ContractError("compare: metadata mismatch on dataset '" + b.dataset + "'");
    }
    table.rows.push_back({b.dataset, b.size, size_bucket(b.size), b.mean, it->mean, (it->mean - b.mean) * 100.0});
  }
  for (SizeBucket bucket : {SizeBucket::small, SizeBucket::medium, SizeBucket::large, SizeBucket::extra_large}) {
    BucketGain g{bucket, 0.0, 0};
    for (const auto& row : table.rows)
      if (row.bucket == bucket) {
        g.mean_gain_pp += row.gain_pp;
        ++g.datasets;
      }
    if (g.datasets == 0) continue;
    g.mean_gain_pp /= static_cast<double>(g.datasets);
    table.buckets.push_back(g);
  }
  return table;
}

inline GainTable compare(const RunReport& baseline, const RunReport& candidate) {
  if (baseline.metadata.dataset != candidate.metadata.dataset) {
    throw ContractError("compare: reports are for different datasets ('" + baseline.metadata.dataset + "' vs '" +
                        candidate.metadata.dataset + "')");
  }
  const DatasetScore b[] = {score_of(baseline)};
  const DatasetScore c[] = {score_of(candidate)};
  return compare(b, c);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

using ordered_json = nlohmann::ordered_json;

inline ordered_json config_to_json(const HyperConfig& c) {
  return ordered_json{{"k", c.k}, {"gamma", c.gamma}, {"lambda", c.lambda}, {"delta", c.delta}, {"beta", c.beta}};
}

inline HyperConfig config_from_json(const ordered_json& j) {
  HyperConfig c;
  c.k = j.at("k").get<std::size_t>();
  c.gamma = j.at("gamma").get<double>();
  c.lambda = j.at("lambda").get<double>();
  c.delta = j.at("delta").get<double>();
  c.beta = j.at("beta").get<double>();
  return c;
}

inline ordered_json record_to_json(const RunRecord& r) {
  return ordered_json{{"loss", r.loss},
                      {"config", config_to_json(r.config)},
                      {"seed", r.seed},
                      {"fold", r.fold},
                      {"val_accuracy", r.val_accuracy},
                      {"epochs_trained", r.epochs_trained},
                      {"wall_time", r.wall_time}};
}

inline RunRecord record_from_json(const ordered_json& j) {
  RunRecord r;
  r.loss = j.at("loss").get<std::string>();
  r.config = config_from_json(j.at("config"));
  r.seed = j.at("seed").get<std::uint64_t>();
  r.fold = j.at("fold").get<std::size_t>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  r.epochs_trained = j.at("epochs_trained").get<std::size_t>();
  r.wall_time = j.at("wall_time").get<double>();
  return r;
}

inline std::string report_to_json(const RunReport& r) {
  ordered_json j;
  j["schema"] = "tripledml.run_report";
  j["version"] = kReportSchemaVersion;
  const auto& m = r.metadata;
  const auto bucket = size_bucket(m.dataset_size);
  j["metadata"] = ordered_json{{"dataset", m.dataset},
                               {"dataset_size", m.dataset_size},
                               {"size_bucket", bucket ? std::string(to_string(*bucket)) : std::string("none")},
                               {"loss", m.loss},
                               {"seeds", m.seeds},
                               {"fold_count", m.fold_count}};
  j["records"] = ordered_json::array();
  for (const auto& rec : r.records) j["records"].push_back(record_to_json(rec));
  j["aggregates"] = ordered_json::array();
  for (const auto& a : r.aggregates) {
    j["aggregates"].push_back(ordered_json{
        {"loss", a.loss}, {"config", config_to_json(a.config)}, {"mean", a.mean}, {"std", a.std}, {"n", a.n}});
  }
  j["best_index"] = r.best_index;
  return j.dump(2) + "\n";
}

inline RunReport report_from_json(std::string_view text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("report is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("schema") != "tripledml.run_report") throw DataError("not a tripledml run report");
    if (j.at("version").get<int>() != kReportSchemaVersion) throw DataError("unsupported report version");
    RunReport r;
    const auto& m = j.at("metadata");
    r.metadata.dataset = m.at("dataset").get<std::string>();
    r.metadata.dataset_size = m.at("dataset_size").get<std::size_t>();
    r.metadata.loss = m.at("loss").get<std::string>();
    r.metadata.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    r.metadata.fold_count = m.at("fold_count").get<std::size_t>();
    for (const auto& rec : j.at("records")) r.records.push_back(record_from_json(rec));
    for (const auto& a : j.at("aggregates")) {
      r.aggregates.push_back({a.at("loss").get<std::string>(), config_from_json(a.at("config")),
                              a.at("mean").get<double>(), a.at("std").get<double>(), a.at("n").get<std::size_t>()});
    }
    r.best_index = j.at("best_index").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::size_t line) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw DataError("records csv line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string signed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.2f", std::abs(v) < 0.005 ? 0.0 : v);
  return buf;
}

}  // namespace detail

inline constexpr std::string_view kRecordsCsvHeader =
    "loss,k,gamma,lambda,delta,beta,seed,fold,val_accuracy,epochs_trained,wall_time";

inline std::string records_to_csv(std::span<const RunRecord> records) {
  std::string out(kRecordsCsvHeader);
  out += '\n';
  using detail::fmt_double;
  for (const auto& r : records) {
    out += r.loss + ',' + std::to_string(r.config.k) + ',' + fmt_double(r.config.gamma) + ',' +
           fmt_double(r.config.lambda) + ',' + fmt_double(r.config.delta) + ',' + fmt_double(r.config.beta) + ',' +
           std::to_string(r.seed) + ',' + std::to_string(r.fold) + ',' + fmt_double(r.val_accuracy) + ',' +
           std::to_string(r.epochs_trained) + ',' + fmt_double(r.wall_time) + '\n';
  }
  return out;
}

inline std::vector<RunRecord> records_from_csv(std::string_view text) {
  std::vector<RunRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kRecordsCsvHeader) throw DataError("records csv: unexpected header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 11) throw DataError("records csv line " + std::to_string(lineno) + ": expected 11 fields");
    RunRecord r;
    r.loss = f[0];
    r.config.k = static_cast<std::size_t>(detail::parse_double(f[1], lineno));
    r.config.gamma = detail::parse_double(f[2], lineno);
    r.config.lambda = detail::parse_double(f[3], lineno);
    r.config.delta = detail::parse_double(f[4], lineno);
    r.config.beta = detail::parse_double(f[5], lineno);
    r.seed = std::stoull(f[6]);
    r.fold = std::stoul(f[7]);
    r.val_accuracy = detail::parse_double(f[8], lineno);
    r.epochs_trained = std::stoul(f[9]);
    r.wall_time = detail::parse_double(f[10], lineno);
    out.push_back(r);
  }
  return out;
}

/// Aggregates as a markdown table, accuracies in percent.
inline std::string report_to_markdown(const RunReport& r) {
  std::ostringstream os;
  os << "**" << r.metadata.dataset << "** (n=" << r.metadata.dataset_size << ", loss " << r.metadata.loss << ", "
     << r.metadata.protocol() << ")\n\n";
  os << "| k | gamma | lambda | delta | beta | mean acc (%) | std (%) | runs |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < r.aggregates.size(); ++i) {
    const auto& a = r.aggregates[i];
    os << "| " << a.config.k << " | " << detail::fmt_double(a.config.gamma) << " | "
       << detail::fmt_double(a.config.lambda) << " | " << detail::fmt_double(a.config.delta) << " | "
       << detail::fmt_double(a.config.beta) << " | " << detail::fixed2(a.mean * 100.0)
       << (i == r.best_index ? " (best)" : "") << " | " << detail::fixed2(a.std * 100.0) << " | " << a.n << " |\n";
  }
  return os.str();
}

/// Two-row comparison table with a gain row.
inline std::string gain_table_to_markdown(const GainTable& t, std::string_view baseline_name,
                                          std::string_view candidate_name) {
  std::ostringstream os;
  os << "| Model |";
  for (const auto& r : t.rows) os << ' ' << r.dataset << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < t.rows.size(); ++i) os << "---|";
  os << "\n| " << baseline_name << " |";
  for (const auto& r : t.rows) os << ' ' << detail::fixed2(r.baseline * 100.0) << " |";
  os << "\n| " << candidate_name << " |";
  for (const auto& r : t.rows) os << ' ' << detail::fixed2(r.candidate * 100.0) << " |";
  os << "\n| Gain (pp) |";
  for (const auto& r : t.rows) os << ' ' << detail::signed2(r.gain_pp) << " |";
  os << "\n";
  if (!t.buckets.empty()) {
    os << "\n| Size bucket | Datasets | Mean gain (pp) |\n|---|---|---|\n";
    for (const auto& b : t.buckets)
      os << "| " << to_string(b.bucket) << " | " << b.datasets << " | " << detail::signed2(b.mean_gain_pp) << " |\n";
  }
  return os.str();
}

inline std::string gain_table_to_csv(const GainTable& t) {
  std::string out = "dataset,size,bucket,baseline,candidate,gain_pp\n";
  for (const auto& r : t.rows) {
    out += r.dataset + ',' + std::to_string(r.size) + ',' +
           (r.bucket ? std::string(to_string(*r.bucket)) : std::string("none")) + ',' +
           detail::fmt_double(r.baseline) + ',' + detail::fmt_double(r.candidate) + ',' +
           detail::fmt_double(r.gain_pp) + '\n';
  }
  return out;
}

inline std::string gain_table_to_json(const GainTable& t) {
  ordered_json j;
  j["schema"] = "tripledml.gain_table";
  j["version"] = kReportSchemaVersion;
  j["rows"] = ordered_json::array();
  for (const auto& r : t.rows) {
    j["rows"].push_back(ordered_json{{"dataset", r.dataset},
                                     {"size", r.size},
                                     {"bucket", r.bucket ? std::string(to_string(*r.bucket)) : "none"},
                                     {"baseline", r.baseline},
                                     {"candidate", r.candidate},
                                     {"gain_pp", r.gain_pp}});
  }
  j["buckets"] = ordered_json::array();
  for (const auto& b : t.buckets) {
    j["buckets"].push_back(
        ordered_json{{"bucket", std::string(to_string(b.bucket))}, {"datasets", b.datasets}, {"mean_gain_pp", b.mean_gain_pp}});
  }
  return j.dump(2) + "\n";
}

/// (dataset size, gain) pairs sorted by size: the gain-vs-size curve.
inline std::string gain_vs_size_csv(const GainTable& t) {
  auto rows = t.rows;
  std::stable_sort(rows.begin(), rows.end(), [](const GainRow& a, const GainRow& b) { return a.size < b.size; });
  std::string out = "dataset_size,gain_pp,dataset\n";
  for (const auto& r : rows) out += std::to_string(r.size) + ',' + detail::fmt_double(r.gain_pp) + ',' + r.dataset + '\n';
  return out;
}

enum class ReportFormat { json, csv, markdown };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  if (s == "md" || s == "markdown") return ReportFormat::markdown;
  throw ConfigError("unknown report format '" + std::string(s) + "'");
}

inline std::string render(const RunReport& r, ReportFormat f) {
  switch (f) {
    case ReportFormat::json: return report_to_json(r);
    case ReportFormat::csv: return records_to_csv(r.records);
    case ReportFormat::markdown: return report_to_markdown(r);
  }
  return {};
}

inline void write_text(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void emit(const RunReport& r, ReportFormat f, const std::string& path) { write_text(path, render(r, f)); }

inline RunReport load_report(const std::string& path) { return report_from_json(read_text(path)); }

}  // namespace tripledml

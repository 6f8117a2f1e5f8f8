#pragma once

// Text classification datasets: csv/tsv/jsonl ingestion, stratified
// subsampling and stratified k-fold splits.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tripledml/errors.hpp"
#include "tripledml/losses.hpp"
#include "tripledml/rng.hpp"

namespace tripledml {

struct TextRecord {
  std::string text;
  std::optional<std::string> text2;
  ClassId label = 0;

  bool operator==(const TextRecord&) const = default;
};

struct TextDataset {
  std::vector<TextRecord> records;
  std::vector<std::string> class_names;
  std::string provenance;

  std::size_t size() const { return records.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  bool pair_task() const { return !records.empty() && records.front().text2.has_value(); }

  std::vector<ClassId> labels() const {
    std::vector<ClassId> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.label);
    return out;
  }

  /// Indices of each class, in dataset order.
  std::vector<std::vector<std::size_t>> indices_by_class() const {
    std::vector<std::vector<std::size_t>> out(num_classes());
    for (std::size_t i = 0; i < records.size(); ++i) out[records[i].label].push_back(i);
    return out;
  }

  TextDataset select(std::span<const std::size_t> index, std::string descriptor = {}) const {
    TextDataset out;
    out.class_names = class_names;
    out.provenance = descriptor.empty() ? provenance : provenance + " | " + descriptor;
    out.records.reserve(index.size());
    for (std::size_t i : index) out.records.push_back(records.at(i));
    return out;
  }
};

enum class DataFormat { csv, tsv, jsonl };

inline DataFormat parse_format(std::string_view s) {
  if (s == "csv") return DataFormat::csv;
  if (s == "tsv") return DataFormat::tsv;
  if (s == "jsonl") return DataFormat::jsonl;
  throw ConfigError("unknown dataset format '" + std::string(s) + "' (expected csv, tsv or jsonl)");
}

/// Format from the file extension, csv when unknown.
inline DataFormat format_from_path(std::string_view path) {
  auto ends = [&](std::string_view ext) {
    return path.size() >= ext.size() && path.substr(path.size() - ext.size()) == ext;
  };
  if (ends(".tsv")) return DataFormat::tsv;
  if (ends(".jsonl") || ends(".json")) return DataFormat::jsonl;
  return DataFormat::csv;
}

namespace detail {

// RFC 4180-style reader: quoted fields may contain the delimiter, doubled
// quotes and newlines. Returns rows with the line each started on.
struct DelimitedRow {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

inline std::vector<DelimitedRow> read_delimited(std::istream& in, char delim, const std::string& path) {
  std::vector<DelimitedRow> rows;
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (content.size() >= 3 && content.compare(0, 3, "\xEF\xBB\xBF") == 0) content.erase(0, 3);
  std::size_t line = 1, i = 0;
  while (i < content.size()) {
    DelimitedRow row;
    row.line = line;
    std::string field;
    bool row_done = false;
    while (!row_done) {
      field.clear();
      if (i < content.size() && content[i] == '"') {
        ++i;
        for (;;) {
          if (i >= content.size()) {
            throw DataError(path + ":" + std::to_string(row.line) + ": unterminated quoted field");
          }
          char c = content[i++];
          if (c == '"') {
            if (i < content.size() && content[i] == '"') {
              field.push_back('"');
              ++i;
            } else {
              break;
            }
          } else {
            if (c == '\n') ++line;
            field.push_back(c);
          }
        }
        if (i < content.size() && content[i] != delim && content[i] != '\n' && content[i] != '\r') {
          throw DataError(path + ":" + std::to_string(line) + ": unexpected character after quoted field");
        }
      } else {
        while (i < content.size() && content[i] != delim && content[i] != '\n') field.push_back(content[i++]);
        if (!field.empty() && field.back() == '\r') field.pop_back();
      }
      row.fields.push_back(field);
      if (i < content.size() && content[i] == '\r') ++i;
      if (i >= content.size() || content[i] == '\n') {
        ++i;
        ++line;
        row_done = true;
      } else {
        ++i;  // delimiter
      }
    }
    if (row.fields.size() == 1 && row.fields[0].empty()) continue;  // blank line
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string quote_field(const std::string& s, char delim) {
  if (s.find_first_of(std::string{delim, '"', '\n', '\r'}) == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

struct LabelMapper {
  std::vector<std::string> names;
  bool closed = false;
  std::map<std::string, ClassId> ids;

  explicit LabelMapper(const std::vector<std::string>* known) {
    if (known) {
      closed = true;
      names = *known;
      for (std::size_t i = 0; i < names.size(); ++i) ids.emplace(names[i], i);
    }
  }

  ClassId map(const std::string& label, const std::string& where) {
    auto it = ids.find(label);
    if (it != ids.end()) return it->second;
    if (closed) throw DataError(where + ": unknown label '" + label + "'");
    ids.emplace(label, names.size());
    names.push_back(label);
    return names.size() - 1;
  }
};

}  // namespace detail

/// Loads a dataset. Labels are mapped to dense ids in first-seen order, or,
/// when `label_space` is given, against that fixed list (unknown labels are
/// errors).
inline TextDataset load_dataset(const std::string& path, DataFormat format,
                                const std::vector<std::string>* label_space = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path);
  TextDataset ds;
  ds.provenance = path;
  detail::LabelMapper labels(label_space);

  if (format == DataFormat::jsonl) {
    std::string line;
    std::size_t lineno = 0;
    std::optional<bool> pair;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      const std::string where = path + ":" + std::to_string(lineno);
      nlohmann::json obj;
      try {
        obj = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError(where + ": unparseable row (" + e.what() + ")");
      }
      if (!obj.is_object()) throw DataError(where + ": row is not a JSON object");
      if (!obj.contains("text") || !obj["text"].is_string()) throw DataError(where + ": missing column 'text'");
      if (!obj.contains("label")) throw DataError(where + ": missing column 'label'");
      const bool has_pair = obj.contains("text2") && !obj["text2"].is_null();
      if (!pair) pair = has_pair;
      if (*pair != has_pair) throw DataError(where + ": pair-task rows must all carry 'text2'");
      TextRecord r;
      r.text = obj["text"].get<std::string>();
      if (has_pair) {
        if (!obj["text2"].is_string()) throw DataError(where + ": 'text2' must be a string");
        r.text2 = obj["text2"].get<std::string>();
      }
      const auto& lab = obj["label"];
      std::string label = lab.is_string() ? lab.get<std::string>() : lab.dump();
      r.label = labels.map(label, where);
      ds.records.push_back(std::move(r));
    }
  } else {
    const char delim = format == DataFormat::tsv ? '\t' : ',';
    auto rows = detail::read_delimited(in, delim, path);
    if (rows.empty()) throw DataError(path + ": empty file");
    const auto& header = rows.front().fields;
    auto column = [&](const char* name) -> std::optional<std::size_t> {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) return std::nullopt;
      return static_cast<std::size_t>(it - header.begin());
    };
    auto text_col = column("text");
    auto label_col = column("label");
    auto text2_col = column("text2");
    if (!text_col) throw DataError(path + ": missing column 'text'");
    if (!label_col) throw DataError(path + ": missing column 'label'");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      const std::string where = path + ":" + std::to_string(row.line);
      if (row.fields.size() != header.size()) {
        throw DataError(where + ": unparseable row (expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(row.fields.size()) + ")");
      }
      TextRecord rec;
      rec.text = row.fields[*text_col];
      if (text2_col) rec.text2 = row.fields[*text2_col];
      rec.label = labels.map(row.fields[*label_col], where);
      ds.records.push_back(std::move(rec));
    }
  }
  if (ds.records.empty()) throw DataError(path + ": empty file");
  ds.class_names = labels.names;
  return ds;
}

inline TextDataset load_dataset(const std::string& path) { return load_dataset(path, format_from_path(path)); }

inline void save_dataset(const TextDataset& ds, const std::string& path, DataFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset " + path);
  const bool pair = ds.pair_task();
  if (format == DataFormat::jsonl) {
    for (const auto& r : ds.records) {
      nlohmann::ordered_json obj;
      obj["text"] = r.text;
      if (pair) obj["text2"] = r.text2.value_or("");
      obj["label"] = ds.class_names.at(r.label);
      out << obj.dump() << '\n';
    }
    return;
  }
  const char delim = format == DataFormat::tsv ? '\t' : ',';
  out << "text" << delim << (pair ? std::string("text2") + delim : "") << "label\n";
  for (const auto& r : ds.records) {
    out << detail::quote_field(r.text, delim) << delim;
    if (pair) out << detail::quote_field(r.text2.value_or(""), delim) << delim;
    out << detail::quote_field(ds.class_names.at(r.label), delim) << '\n';
  }
}

/// Stratified sample of `n` indices: per-class quotas by largest remainder,
/// members drawn by a seeded shuffle. Returned in ascending order.
inline std::vector<std::size_t> subsample_indices(const TextDataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) {
    throw ContractError("cannot subsample " + std::to_string(n) + " records from " + std::to_string(ds.size()));
  }
  auto by_class = ds.indices_by_class();
  const std::size_t total = ds.size();
  std::vector<std::size_t> quota(by_class.size());
  std::vector<std::pair<std::size_t, std::size_t>> remainders;  // (remainder numerator, class)
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const std::size_t num = by_class[c].size() * n;
    quota[c] = num / total;
    assigned += quota[c];
    remainders.emplace_back(num % total, c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[remainders[i].second];

  Rng rng = make_rng(seed, "subsample");
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto members = by_class[c];
    shuffle(members, rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline TextDataset subsample(const TextDataset& ds, std::size_t n, std::uint64_t seed) {
  auto idx = subsample_indices(ds, n, seed);
  return ds.select(idx, "subsample n=" + std::to_string(n) + " seed=" + std::to_string(seed));
}

struct FoldSplit {
  std::size_t fold_count = 5;
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> validation;
};

/// Each class is shuffled and dealt round-robin over the folds, continuing
/// the deal position across classes so fold sizes stay balanced too.
inline FoldSplit stratified_kfold(const TextDataset& ds, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ContractError("k-fold needs k >= 2");
  auto by_class = ds.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < k) {
      throw ContractError("class '" + ds.class_names[c] + "' has " + std::to_string(by_class[c].size()) +
                          " members, fewer than k = " + std::to_string(k));
    }
  }
  Rng rng = make_rng(seed, "kfold");
  std::vector<std::size_t> fold_of(ds.size());
  std::size_t deal = 0;
  for (auto& members : by_class) {
    shuffle(members, rng);
    for (std::size_t i : members) fold_of[i] = deal++ % k;
  }
  FoldSplit split;
  split.fold_count = k;
  split.train.resize(k);
  split.validation.resize(k);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) (fold_of[i] == f ? split.validation[f] : split.train[f]).push_back(i);
  return split;
}

}  // namespace tripledml

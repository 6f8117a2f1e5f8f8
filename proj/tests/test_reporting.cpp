#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tripledml/reporting.hpp"

using namespace tripledml;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "tripledml_test_reporting";
  std::filesystem::create_directories(dir);
  return dir / name;
}

RunRecord rec(double acc, HyperConfig c = {}, std::uint64_t seed = 2, std::size_t fold = 0) {
  return {"tripleentropy", c, seed, fold, acc, 3, 0.25};
}

std::vector<DatasetScore> scores(const std::vector<std::tuple<std::string, std::size_t, double>>& rows) {
  std::vector<DatasetScore> out;
  for (const auto& [name, size, pct] : rows) out.push_back({name, size, pct / 100.0, "seeds=2,16,128,2048;folds=5"});
  return out;
}

// Reference baseline and candidate accuracies (percent) with dataset sizes.
const std::vector<std::tuple<std::string, std::size_t, double>> kBaseline = {
    {"SST2-1k", 1000, 88.63},   {"IMDb-1k", 1000, 81.00},   {"SUBJ-1k", 1000, 94.61}, {"MPQA-1k", 1000, 87.75},
    {"MRPC-1k", 1000, 78.01},   {"TREC-1k", 1000, 79.80},   {"CR-1k", 1000, 91.57},   {"MR-1k", 1000, 85.89},
    {"MRPC", 4000, 83.11},      {"TREC", 5000, 96.19},      {"CR", 4000, 93.28},      {"MR", 11000, 89.09},
    {"SST2-10k", 10000, 92.63}, {"IMDb-10k", 10000, 85.12}, {"SUBJ", 10000, 96.83},   {"MPQA", 11000, 91.08},
    {"SST2", 67000, 94.89},     {"IMDb", 50000, 87.10}};
const std::vector<std::tuple<std::string, std::size_t, double>> kCandidate = {
    {"SST2-1k", 1000, 89.09},   {"IMDb-1k", 1000, 81.45},   {"SUBJ-1k", 1000, 94.70}, {"MPQA-1k", 1000, 87.93},
    {"MRPC-1k", 1000, 79.12},   {"TREC-1k", 1000, 82.09},   {"CR-1k", 1000, 92.16},   {"MR-1k", 1000, 86.39},
    {"MRPC", 4000, 84.39},      {"TREC", 5000, 97.19},      {"CR", 4000, 93.58},      {"MR", 11000, 89.29},
    {"SST2-10k", 10000, 92.79}, {"IMDb-10k", 10000, 85.23}, {"SUBJ", 10000, 97.15},   {"MPQA", 11000, 91.30},
    {"SST2", 67000, 94.95},     {"IMDb", 50000, 87.12}};

const GainRow& row_for(const GainTable& t, const std::string& name) {
  for (const auto& r : t.rows)
    if (r.dataset == name) return r;
  throw std::runtime_error("no row " + name);
}

double bucket_gain(const GainTable& t, SizeBucket b) {
  for (const auto& g : t.buckets)
    if (g.bucket == b) return g.mean_gain_pp;
  return NAN;
}

RunReport sample_report() {
  std::vector<RunRecord> records;
  for (double beta : {0.3, 0.7})
    for (std::uint64_t seed : {2, 16})
      for (std::size_t fold = 0; fold < 2; ++fold) {
        HyperConfig c;
        c.beta = beta;
        records.push_back(rec(0.1 * static_cast<double>(seed % 7) + 0.01 * fold + beta / 3.0, c, seed, fold));
      }
  return make_report({"synthetic keyword fixture, \"quoted\"", 200, "tripleentropy", {2, 16}, 2}, records);
}

}  // namespace

TEST(Aggregate, IdenticalValuesHaveZeroStd) {
  std::vector<RunRecord> r(20, rec(0.8125));
  auto a = aggregate(r);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].mean, 0.8125);
  EXPECT_EQ(a[0].std, 0.0);
  EXPECT_EQ(a[0].n, 20u);
}

TEST(Aggregate, TwoValuesMean) {
  std::vector<RunRecord> r{rec(0.0), rec(1.0)};
  auto a = aggregate(r);
  EXPECT_EQ(a[0].mean, 0.5);
  EXPECT_NEAR(a[0].std, std::sqrt(0.5), 1e-15);
}

TEST(Aggregate, EmptyRejected) { EXPECT_THROW(aggregate(std::vector<RunRecord>{}), ContractError); }

TEST(AggregateProperty, MatchesBruteForceMean) {
  oracle::Lcg g(21);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<RunRecord> r;
    oracle::HighPrecision sum = 0;
    for (int i = 0; i < 20; ++i) {
      const double v = g.uniform(0.0, 1.0);
      r.push_back(rec(v));
      sum += v;
    }
    auto a = aggregate(r);
    EXPECT_NEAR(a[0].mean, static_cast<double>(sum / 20), 1e-12);
    EXPECT_GE(a[0].mean, 0.0);
    EXPECT_LE(a[0].mean, 1.0);
  }
}

TEST(Aggregate, GroupsByConfigInOrder) {
  HyperConfig lo, hi;
  lo.beta = 0.1;
  hi.beta = 0.9;
  std::vector<RunRecord> r{rec(0.5, hi), rec(0.7, lo), rec(0.9, hi)};
  auto a = aggregate(r);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].config, lo);
  EXPECT_EQ(a[1].n, 2u);
  EXPECT_NEAR(a[1].mean, 0.7, 1e-15);
}

TEST(BestConfig, TieGoesToSmallestConfig) {
  HyperConfig a, b, c;
  a.k = 100;
  b.k = 10;
  b.gamma = 0.05;
  c.k = 10;
  c.gamma = 0.07;
  std::vector<RunRecord> r{rec(0.8, a), rec(0.8, c), rec(0.8, b)};
  RunReport rep = make_report({"d", 10, "softtriple", {2}, 5}, r);
  EXPECT_EQ(rep.best().config, b);
  r.push_back(rec(1.0, a));
  EXPECT_EQ(make_report({"d", 10, "softtriple", {2}, 5}, r).best().config, a);
}

TEST(Buckets, Thresholds) {
  EXPECT_EQ(size_bucket(200), SizeBucket::small);
  EXPECT_EQ(size_bucket(1000), SizeBucket::small);
  EXPECT_EQ(size_bucket(1001), std::nullopt);
  EXPECT_EQ(size_bucket(3999), std::nullopt);
  EXPECT_EQ(size_bucket(4000), SizeBucket::medium);
  EXPECT_EQ(size_bucket(5000), SizeBucket::medium);
  EXPECT_EQ(size_bucket(5001), std::nullopt);
  EXPECT_EQ(size_bucket(10000), SizeBucket::large);
  EXPECT_EQ(size_bucket(11000), SizeBucket::large);
  EXPECT_EQ(size_bucket(49999), std::nullopt);
  EXPECT_EQ(size_bucket(50000), SizeBucket::extra_large);
}

TEST(Compare, IdenticalReportsGiveZeroGain) {
  const RunReport r = sample_report();
  GainTable t = compare(r, r);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].gain_pp, 0.0);
  auto s = scores(kBaseline);
  for (const auto& row : compare(s, s).rows) EXPECT_EQ(row.gain_pp, 0.0);
}

TEST(Compare, ReferencePerDatasetGains) {
  auto b = scores(kBaseline), c = scores(kCandidate);
  GainTable t = compare(b, c);
  ASSERT_EQ(t.rows.size(), kBaseline.size());
  EXPECT_NEAR(row_for(t, "SST2-1k").gain_pp, 0.46, 1e-9);
  EXPECT_NEAR(row_for(t, "MRPC").gain_pp, 1.28, 1e-9);
  EXPECT_NEAR(row_for(t, "TREC-1k").gain_pp, 2.29, 1e-9);
  EXPECT_NEAR(row_for(t, "MRPC-1k").gain_pp, 1.11, 1e-9);
  EXPECT_EQ(row_for(t, "IMDb").bucket, SizeBucket::extra_large);
}

TEST(Compare, ReferenceBucketAverages) {
  auto b = scores(kBaseline), c = scores(kCandidate);
  GainTable t = compare(b, c);
  ASSERT_EQ(t.buckets.size(), 4u);
  // (0.46 + 0.45 + 0.09 + 0.18 + 1.11 + 2.29 + 0.59 + 0.50) / 8
  EXPECT_NEAR(bucket_gain(t, SizeBucket::small), 0.70875, 1e-9);
  EXPECT_NEAR(bucket_gain(t, SizeBucket::medium), 0.86, 1e-9);
  // MR and MPQA (11k) join the 10k sets.
  EXPECT_NEAR(bucket_gain(t, SizeBucket::large), 0.202, 1e-9);
  EXPECT_NEAR(bucket_gain(t, SizeBucket::extra_large), 0.04, 1e-9);
}

TEST(Compare, MetadataMismatchRejected) {
  auto b = scores({{"MRPC", 4000, 83.11}});
  auto c = scores({{"MRPC", 5000, 84.39}});
  EXPECT_THROW(compare(b, c), ContractError);
  c = scores({{"TREC", 4000, 84.39}});
  EXPECT_THROW(compare(b, c), ContractError);
  c = scores({{"MRPC", 4000, 84.39}});
  c[0].protocol = "seeds=2;folds=5";
  EXPECT_THROW(compare(b, c), ContractError);
}

TEST(Render, MarkdownTableLayout) {
  auto b = scores({{"SST2-1k", 1000, 88.63}, {"MRPC", 4000, 83.11}});
  auto c = scores({{"SST2-1k", 1000, 89.09}, {"MRPC", 4000, 84.39}});
  const std::string md = gain_table_to_markdown(compare(b, c), "RB", "RB SoftTriple");
  EXPECT_NE(md.find("| Model | SST2-1k | MRPC |"), std::string::npos) << md;
  EXPECT_NE(md.find("| RB | 88.63 | 83.11 |"), std::string::npos) << md;
  EXPECT_NE(md.find("| RB SoftTriple | 89.09 | 84.39 |"), std::string::npos) << md;
  EXPECT_NE(md.find("| Gain (pp) | +0.46 | +1.28 |"), std::string::npos) << md;
}

TEST(Render, GainVsSizeSortedBySize) {
  auto b = scores(kBaseline), c = scores(kCandidate);
  const std::string csv = gain_vs_size_csv(compare(b, c));
  EXPECT_EQ(csv.rfind("dataset_size,gain_pp,dataset\n1000,", 0), 0u) << csv;
  EXPECT_NE(csv.find("\n67000,"), std::string::npos);
  EXPECT_EQ(csv.back(), '\n');
}

TEST(Emit, JsonIsByteStable) {
  const RunReport r = sample_report();
  const std::string first = report_to_json(r);
  const RunReport back = report_from_json(first);
  EXPECT_EQ(back, r);
  EXPECT_EQ(report_to_json(back), first);
}

TEST(Emit, CsvIsByteStable) {
  const RunReport r = sample_report();
  const std::string first = records_to_csv(r.records);
  const auto back = records_from_csv(first);
  EXPECT_EQ(back, r.records);
  EXPECT_EQ(records_to_csv(back), first);
}

TEST(EmitProperty, RandomReportsRoundTrip) {
  oracle::Lcg g(34);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<RunRecord> records;
    const std::size_t n = 1 + g.index(25);
    for (std::size_t i = 0; i < n; ++i) {
      HyperConfig c{1 + g.index(1000), g.uniform(1e-3, 1), g.uniform(0.5, 10), g.uniform(0, 1), g.uniform(0, 1)};
      records.push_back({"softtriple", c, g.next(), g.index(5), g.uniform(0, 1), g.index(11), g.uniform(0, 100)});
    }
    const RunReport r = make_report({"random", n, "softtriple", {g.next()}, 5}, records);
    const std::string json = report_to_json(r), csv = records_to_csv(r.records);
    EXPECT_EQ(report_to_json(report_from_json(json)), json);
    EXPECT_EQ(records_to_csv(records_from_csv(csv)), csv);
  }
}

TEST(Emit, FileRoundTrip) {
  const RunReport r = sample_report();
  const auto path = scratch("report.json").string();
  emit(r, ReportFormat::json, path);
  EXPECT_EQ(load_report(path), r);
  EXPECT_THROW(emit(r, ReportFormat::json, "/nonexistent/dir/report.json"), DataError);
}

TEST(Emit, MalformedInputsRejected) {
  EXPECT_THROW(report_from_json("{not json"), DataError);
  EXPECT_THROW(report_from_json("{\"schema\": \"other\", \"version\": 1}"), DataError);
  EXPECT_THROW(records_from_csv("wrong,header\n"), DataError);
  std::string bad(kRecordsCsvHeader);
  bad += "\nce,10,0.1,3,0.1,0.5,2,0,abc,1,0.1\n";
  EXPECT_THROW(records_from_csv(bad), DataError);
  EXPECT_THROW(parse_report_format("pdf"), ConfigError);
}

TEST(Render, ReportMarkdownMarksBest) {
  const RunReport r = sample_report();
  const std::string md = render(r, ReportFormat::markdown);
  EXPECT_NE(md.find("(best)"), std::string::npos);
  EXPECT_NE(md.find("| k | gamma | lambda | delta | beta |"), std::string::npos);
}

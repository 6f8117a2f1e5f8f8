#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tripledml/fixtures.hpp"
#include "tripledml/training.hpp"

using namespace tripledml;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "tripledml_test_training";
  std::filesystem::create_directories(dir);
  return dir / name;
}

TextDataset tiny_fixture(std::size_t size = 60, std::size_t classes = 2) {
  FixtureSpec spec;
  spec.num_classes = classes;
  spec.size = size;
  spec.seed = 31;
  return make_keyword_fixture(spec);
}

TrainConfig tiny_config(LossKind loss) {
  TrainConfig cfg;
  cfg.loss = loss;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.dim = 8;
  cfg.hidden = 8;
  cfg.base_lr = 3e-2;
  cfg.hyper.k = 2;
  return cfg;
}

std::vector<RunRecord> without_wall_time(std::vector<RunRecord> records) {
  for (auto& r : records) r.wall_time = 0.0;
  return records;
}

// Hand-stepped decoupled-decay Adam on f(p) = p^2.
std::vector<double> adamw_reference(double p, int steps, double lr, double wd) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0.0, v = 0.0;
  std::vector<double> trace;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2.0 * p;
    p = p - lr * wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t)), vhat = v / (1 - std::pow(b2, t));
    p = p - lr * mhat / (std::sqrt(vhat) + eps);
    trace.push_back(p);
  }
  return trace;
}

}  // namespace

TEST(Optimizer, ZeroGradientZeroDecayLeavesParameters) {
  std::vector<Tensor> params{Tensor::vector({1.0, -2.0, 0.5}, true)};
  backward(sum(mul_scalar(params[0], 0.0)));
  auto st = OptimizerState::for_params(params, 1e-3, 0.0);
  optimizer_step(params, st, 1e-3);
  EXPECT_EQ(std::vector<double>(params[0].data().begin(), params[0].data().end()),
            (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Optimizer, ScalarStepDescends) {
  std::vector<Tensor> params{Tensor::scalar(1.0, true)};
  backward(params[0]);  // g = 1
  auto st = OptimizerState::for_params(params);
  optimizer_step(params, st, kBaseLearningRate);
  EXPECT_LT(params[0].item(), 1.0);
}

TEST(Optimizer, ThreeQuadraticStepsMatchReference) {
  const double lr = 0.05, wd = 0.01;
  std::vector<Tensor> params{Tensor::scalar(1.5, true)};
  auto st = OptimizerState::for_params(params, lr, wd);
  const auto ref = adamw_reference(1.5, 3, lr, wd);
  for (int t = 0; t < 3; ++t) {
    params[0].zero_grad();
    backward(square(params[0]));
    optimizer_step(params, st, lr);
    EXPECT_NEAR(params[0].item(), ref[static_cast<std::size_t>(t)], 1e-12);
  }
}

TEST(Optimizer, ParameterWithoutGradientUntouched) {
  std::vector<Tensor> params{Tensor::scalar(1.0, true), Tensor::scalar(4.0, true)};
  backward(params[0]);
  auto st = OptimizerState::for_params(params, 0.1, 0.5);
  optimizer_step(params, st, 0.1);
  EXPECT_EQ(params[1].item(), 4.0);
}

TEST(Optimizer, NonFiniteGradientAborts) {
  std::vector<Tensor> params{Tensor::scalar(0.0, true)};
  backward(mul_scalar(params[0], std::numeric_limits<double>::infinity()));
  auto st = OptimizerState::for_params(params);
  EXPECT_THROW(optimizer_step(params, st, 1e-5), NumericError);
  EXPECT_EQ(params[0].item(), 0.0);
}

TEST(Optimizer, NegativeRateRejected) {
  std::vector<Tensor> params{Tensor::scalar(1.0, true)};
  auto st = OptimizerState::for_params(params);
  EXPECT_THROW(optimizer_step(params, st, -1.0), ContractError);
}

TEST(Schedule, Endpoints) {
  Schedule s{500};
  const auto warm = static_cast<std::size_t>(std::ceil(0.06 * 500));
  EXPECT_EQ(s.warmup_steps(), warm);
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_EQ(lr_at(warm, s), 1e-5);
  EXPECT_EQ(lr_at(500, s), 0.0);
  EXPECT_THROW(lr_at(501, s), ContractError);
}

TEST(Schedule, WarmupCountIgnoresFloatingNoise) {
  // 0.06 * 50 evaluates to 3.0000000000000004 in binary floating point.
  EXPECT_EQ((Schedule{50}).warmup_steps(), 3u);
  EXPECT_EQ((Schedule{51}).warmup_steps(), 4u);
}

TEST(ScheduleProperty, PiecewiseLinearWithPeakAtWarmupEnd) {
  oracle::Lcg g(4);
  for (int trial = 0; trial < 60; ++trial) {
    Schedule s{20 + g.index(3000)};
    const std::size_t warm = s.warmup_steps();
    EXPECT_EQ(warm, static_cast<std::size_t>(std::ceil(0.06 * static_cast<double>(s.total_steps) - 1e-9)));
    double peak = 0.0;
    for (std::size_t t = 0; t <= s.total_steps; ++t) {
      const double v = lr_at(t, s);
      EXPECT_GE(v, 0.0);
      peak = std::max(peak, v);
      // Second difference vanishes away from the single kink.
      if (t >= 1 && t + 1 <= s.total_steps && t != warm) {
        EXPECT_NEAR(lr_at(t + 1, s) - 2 * v + lr_at(t - 1, s), 0.0, 1e-18);
      }
    }
    EXPECT_EQ(peak, 1e-5);
    EXPECT_EQ(lr_at(warm, s), 1e-5);
  }
}

TEST(HyperGrid, FullGridSize) {
  const HyperGrid g = HyperGrid::full();
  // Product of the list lengths 3, 5, 7, 7, 5.
  const std::size_t product = 3675;
  EXPECT_EQ(g.ks.size() * g.gammas.size() * g.lambdas.size() * g.deltas.size() * g.betas.size(), product);
  EXPECT_EQ(g.size(), product);
  auto configs = g.enumerate();
  EXPECT_EQ(configs.size(), product);
  EXPECT_TRUE(std::is_sorted(configs.begin(), configs.end()));
  EXPECT_EQ(configs.front(), (HyperConfig{10, 0.01, 1, 0.01, 0.1}));
  EXPECT_EQ(configs.back(), (HyperConfig{1000, 0.1, 10, 1, 0.9}));
}

TEST(HyperGrid, ListsAreTheProtocolValues) {
  const HyperGrid g = HyperGrid::full();
  EXPECT_EQ(g.ks, (std::vector<std::size_t>{10, 100, 1000}));
  EXPECT_EQ(g.gammas, (std::vector<double>{0.01, 0.03, 0.05, 0.07, 0.1}));
  EXPECT_EQ(g.betas, (std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9}));
  EXPECT_EQ(g.lambdas, (std::vector<double>{1, 3, 3.3, 4, 6, 8, 10}));
  EXPECT_EQ(g.deltas, (std::vector<double>{0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1}));
}

TEST(HyperGrid, PresetsAndValidation) {
  EXPECT_EQ(HyperGrid::preset("desk-small").size(), 5u);
  EXPECT_EQ(HyperGrid::preset("full").size(), 3675u);
  EXPECT_EQ(HyperGrid::preset("paper-full").enumerate(), HyperGrid::full().enumerate());
  EXPECT_THROW(HyperGrid::preset("huge"), ConfigError);
  HyperGrid bad = HyperGrid::desk_small();
  bad.betas = {1.5};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.betas.clear();
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(HyperGrid, EffectiveConfigsCollapseIgnoredFields) {
  const HyperGrid g = HyperGrid::full();
  EXPECT_EQ(effective_configs(g, LossKind::ce).size(), 1u);
  EXPECT_EQ(effective_configs(g, LossKind::proxynca).size(), 1u);
  EXPECT_EQ(effective_configs(g, LossKind::softtriple).size(), 3u * 5 * 7 * 7);
  EXPECT_EQ(effective_configs(g, LossKind::tripleentropy).size(), 3675u);
}

TEST(ExperimentPlan, Defaults) {
  ExperimentPlan plan;
  EXPECT_EQ(plan.seeds, (std::vector<std::uint64_t>{2, 16, 128, 2048}));
  EXPECT_EQ(plan.fold_count, 5u);
  EXPECT_EQ(plan.base.batch_size, 64u);
  EXPECT_EQ(plan.base.base_lr, 1e-5);
}

TEST(TrainOne, BetaOneTrajectoryEqualsCrossEntropy) {
  TextDataset ds = tiny_fixture();
  FoldSplit split = stratified_kfold(ds, 5, 2);
  TrainConfig te = tiny_config(LossKind::tripleentropy);
  te.hyper.beta = 1.0;
  TrainConfig ce = tiny_config(LossKind::ce);
  const TrainResult a = train_one(te, 2, split.train[0], split.validation[0], ds);
  const TrainResult b = train_one(ce, 2, split.train[0], split.validation[0], ds);
  ASSERT_EQ(a.loss_history.size(), b.loss_history.size());
  for (std::size_t i = 0; i < a.loss_history.size(); ++i) EXPECT_NEAR(a.loss_history[i], b.loss_history[i], 1e-12);
  EXPECT_EQ(a.val_accuracy, b.val_accuracy);
}

TEST(TrainOne, BetaOneNoDecayNeverMovesProxies) {
  TextDataset ds = tiny_fixture();
  FoldSplit split = stratified_kfold(ds, 5, 16);
  TrainConfig cfg = tiny_config(LossKind::tripleentropy);
  cfg.hyper.beta = 1.0;
  cfg.weight_decay = 0.0;
  const TrainResult r = train_one(cfg, 16, split.train[1], split.validation[1], ds);
  Rng prng = make_rng(16, "proxy-init");
  const SoftTripleParams init =
      SoftTripleParams::init(2, cfg.hyper.k, cfg.dim, cfg.hyper.gamma, cfg.hyper.lambda, cfg.hyper.delta, prng);
  const auto got = r.model.soft_triple->proxies.data();
  EXPECT_EQ(std::vector<double>(got.begin(), got.end()),
            std::vector<double>(init.proxies.data().begin(), init.proxies.data().end()));
}

TEST(TrainOne, SameArgumentsSameResult) {
  TextDataset ds = tiny_fixture();
  FoldSplit split = stratified_kfold(ds, 5, 128);
  TrainConfig cfg = tiny_config(LossKind::tripleentropy);
  const TrainResult a = train_one(cfg, 128, split.train[2], split.validation[2], ds);
  const TrainResult b = train_one(cfg, 128, split.train[2], split.validation[2], ds);
  EXPECT_EQ(a.val_accuracy, b.val_accuracy);
  EXPECT_EQ(a.loss_history, b.loss_history);
}

TEST(TrainOne, OverlappingSplitsRejected) {
  TextDataset ds = tiny_fixture();
  std::vector<std::size_t> train{0, 1, 2, 3}, val{3, 4};
  EXPECT_THROW(train_one(tiny_config(LossKind::ce), 1, train, val, ds), ContractError);
}

class EveryLoss : public ::testing::TestWithParam<LossKind> {};

TEST_P(EveryLoss, TrainsAndPredicts) {
  TextDataset ds = tiny_fixture(60, 6);
  FoldSplit split = stratified_kfold(ds, 5, 2048);
  const TrainResult r = train_one(tiny_config(GetParam()), 2048, split.train[0], split.validation[0], ds);
  EXPECT_GE(r.epochs_trained, 1u);
  EXPECT_FALSE(r.loss_history.empty());
  for (double v : r.loss_history) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(r.val_accuracy, 0.0);
  EXPECT_LE(r.val_accuracy, 1.0);
  const auto preds = predict(r.model, tokenize_records(ds, split.validation[0], r.model.vocab));
  std::vector<ClassId> truth;
  for (std::size_t i : split.validation[0]) truth.push_back(ds.records[i].label);
  EXPECT_EQ(accuracy(preds, truth), r.val_accuracy);
}

INSTANTIATE_TEST_SUITE_P(Losses, EveryLoss,
                         ::testing::Values(LossKind::ce, LossKind::contrastive, LossKind::triplet, LossKind::proxynca,
                                           LossKind::softtriple, LossKind::tripleentropy),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(TrainOne, SeparableFixtureReachesHighAccuracy) {
  FixtureSpec spec;
  spec.num_classes = 2;
  spec.size = 400;
  spec.seed = 99;
  spec.distractor_rate = 0.0;
  spec.label_noise = 0.0;
  TextDataset ds = make_keyword_fixture(spec);
  FoldSplit split = stratified_kfold(ds, 5, 2);
  const auto& train = split.train[0];
  const auto& val = split.validation[0];

  // Linear probe: a bag-of-words perceptron over the training vocabulary
  // shows that a linear rule separates the validation fold.
  std::map<std::string, double> w;
  std::set<std::string> seen;
  for (std::size_t i : train)
    for (const auto& t : split_words(ds.records[i].text)) seen.insert(t);
  auto score = [&](std::size_t i) {
    double s = 0.0;
    for (const auto& t : split_words(ds.records[i].text))
      if (seen.count(t)) s += w[t];
    return s;
  };
  for (int epoch = 0; epoch < 20; ++epoch)
    for (std::size_t i : train) {
      const double y = ds.records[i].label == 0 ? 1.0 : -1.0;
      if (y * score(i) <= 0.0)
        for (const auto& t : split_words(ds.records[i].text)) w[t] += y;
    }
  std::size_t probe_hits = 0;
  for (std::size_t i : val) probe_hits += (score(i) > 0.0) == (ds.records[i].label == 0) ? 1 : 0;
  ASSERT_GE(static_cast<double>(probe_hits) / static_cast<double>(val.size()), 0.95);

  TrainConfig cfg;
  cfg.loss = LossKind::ce;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  cfg.dim = 32;
  cfg.hidden = 32;
  cfg.base_lr = 3e-2;
  const TrainResult r = train_one(cfg, 2, train, val, ds);
  EXPECT_LE(r.epochs_trained, 10u);
  EXPECT_GE(r.val_accuracy, 0.95);
}

TEST(TrainedModel, SaveLoadPredictsIdentically) {
  TextDataset ds = tiny_fixture(60, 2);
  FoldSplit split = stratified_kfold(ds, 5, 2);
  for (LossKind loss : {LossKind::tripleentropy, LossKind::proxynca, LossKind::triplet}) {
    const TrainResult r = train_one(tiny_config(loss), 2, split.train[0], split.validation[0], ds);
    const auto dir = scratch("model_" + std::string(to_string(loss))).string();
    r.model.save(dir);
    TrainedModel back = TrainedModel::load(dir);
    EXPECT_EQ(back.loss, loss);
    const auto seqs = tokenize_records(ds, split.validation[0], r.model.vocab);
    EXPECT_EQ(predict(back, seqs), predict(r.model, seqs)) << to_string(loss);
  }
}

class Grid : public ::testing::Test {
 protected:
  static ExperimentPlan single_config_plan() {
    ExperimentPlan plan;
    plan.base = tiny_config(LossKind::tripleentropy);
    plan.base.epochs = 1;
    plan.grid = HyperGrid::single(plan.base.hyper);
    return plan;
  }
};

TEST_F(Grid, SingleConfigGivesTwentyRecords) {
  TextDataset ds = tiny_fixture();
  const RunReport rep = run_grid(single_config_plan(), ds);
  ASSERT_EQ(rep.records.size(), 20u);
  std::set<std::pair<std::uint64_t, std::size_t>> jobs;
  for (const auto& r : rep.records) jobs.insert({r.seed, r.fold});
  EXPECT_EQ(jobs.size(), 20u);
  ASSERT_EQ(rep.aggregates.size(), 1u);
  EXPECT_EQ(rep.aggregates[0].n, 20u);
  double mean = 0.0;
  for (const auto& r : rep.records) mean += r.val_accuracy;
  EXPECT_NEAR(rep.aggregates[0].mean, mean / 20.0, 1e-12);
}

TEST_F(Grid, ResultsIndependentOfJobCount) {
  TextDataset ds = tiny_fixture();
  ExperimentPlan plan = single_config_plan();
  plan.grid.betas = {0.3, 0.7};
  plan.seeds = {2, 16};
  plan.fold_count = 3;
  GridOptions serial, parallel;
  parallel.jobs = 3;
  const RunReport a = run_grid(plan, ds, serial), b = run_grid(plan, ds, parallel);
  EXPECT_EQ(without_wall_time(a.records), without_wall_time(b.records));
  EXPECT_EQ(a.aggregates, b.aggregates);
  EXPECT_EQ(a.best_index, b.best_index);
}

TEST_F(Grid, ResumeAfterInterruptReproducesReport) {
  TextDataset ds = tiny_fixture();
  ExperimentPlan plan = single_config_plan();
  plan.seeds = {2, 16};
  plan.fold_count = 3;
  GridOptions opts;
  opts.sink_path = scratch("sink.jsonl").string();
  const RunReport full = run_grid(plan, ds, opts);

  // Keep the first two records and a torn third line, as after a crash.
  std::vector<std::string> lines;
  {
    std::ifstream in(opts.sink_path);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  ASSERT_EQ(lines.size(), 6u);
  {
    std::ofstream out(opts.sink_path, std::ios::trunc);
    out << lines[0] << '\n' << lines[1] << '\n' << lines[2].substr(0, lines[2].size() / 2);
  }
  std::size_t retrained = 0;
  opts.resume = true;
  opts.on_record = [&](const RunRecord&) { ++retrained; };
  const RunReport resumed = run_grid(plan, ds, opts);
  EXPECT_EQ(retrained, 4u);
  EXPECT_EQ(without_wall_time(resumed.records), without_wall_time(full.records));
  EXPECT_EQ(resumed.aggregates, full.aggregates);
  EXPECT_EQ(resumed.best_index, full.best_index);
}

TEST_F(Grid, InvalidPlanRejected) {
  ExperimentPlan plan = single_config_plan();
  plan.seeds.clear();
  EXPECT_THROW(run_grid(plan, tiny_fixture()), ConfigError);
}

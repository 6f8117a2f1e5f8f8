#pragma once

// `tripledml` command line: train, evaluate, gridsearch, gradcheck, report,
// fixtures. Exit codes: 0 ok, 2 configuration error, 3 data error,
// 4 numeric failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tripledml/tripledml.hpp"

namespace tripledml::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

namespace detail {

struct Options {
  std::string dataset;
  std::string format;
  std::string loss = "tripleentropy";
  std::vector<double> beta, gamma, lambda, delta;
  std::vector<std::size_t> k;
  double margin = 1.0;
  double alpha = 0.2;
  std::uint64_t seed = 2;
  std::vector<std::uint64_t> seeds;
  std::size_t folds = 5;
  std::size_t fold = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = kBaseLearningRate;
  double weight_decay = 0.01;
  std::size_t dim = 64;
  std::size_t hidden = 64;
  std::string pooling = "mean";
  std::size_t subsample = 0;
  std::string grid_preset = "desk-small";
  std::size_t jobs = 1;
  std::string out;
  bool resume = false;
  std::string checkpoint;
  std::vector<std::string> baseline, candidate;
  std::string baseline_name = "Baseline";
  std::string candidate_name = "Candidate";
  std::string report_format = "md";
  std::size_t instances = 50;
  std::uint64_t fixture_seed = kFixtureSeed;
};

inline std::string resolve_out(const Options& o) {
  if (const char* env = std::getenv("TRIPLEDML_OUT"); env && *env) return env;
  return o.out;
}

struct Flags {
  CLI::Option* beta = nullptr;
  CLI::Option* k = nullptr;
  CLI::Option* gamma = nullptr;
  CLI::Option* lambda = nullptr;
  CLI::Option* delta = nullptr;
  CLI::Option* margin = nullptr;
  CLI::Option* alpha = nullptr;
};

// Loss-specific hyperparameters are only accepted for the loss they belong to.
inline void check_loss_flags(LossKind loss, const Flags& f) {
  auto reject = [&](CLI::Option* opt, bool allowed, const char* owner) {
    if (opt && opt->count() > 0 && !allowed) {
      throw ConfigError(opt->get_name() + " is only valid with --loss " + owner + " (got --loss " +
                        std::string(to_string(loss)) + ")");
    }
  };
  reject(f.beta, loss == LossKind::tripleentropy, "tripleentropy");
  for (CLI::Option* o : {f.k, f.gamma, f.lambda, f.delta}) reject(o, uses_soft_triple(loss), "softtriple|tripleentropy");
  reject(f.margin, loss == LossKind::contrastive, "contrastive");
  reject(f.alpha, loss == LossKind::triplet, "triplet");
}

inline Flags add_model_flags(CLI::App* app, Options& o, bool lists) {
  Flags f;
  app->add_option("--dataset", o.dataset, "Dataset file (csv, tsv or jsonl)")->required();
  app->add_option("--format", o.format, "Dataset format: csv, tsv, jsonl (default: from extension)");
  app->add_option("--loss", o.loss, "Objective: ce, contrastive, triplet, proxynca, softtriple, tripleentropy")
      ->capture_default_str();
  const char* sfx = lists ? " (comma list)" : "";
  f.beta = app->add_option("--beta", o.beta, std::string("TripleEntropy mixing weight in [0,1]") + sfx)->delimiter(',');
  f.k = app->add_option("--k", o.k, std::string("SoftTriple proxies per class") + sfx)->delimiter(',');
  f.gamma = app->add_option("--gamma", o.gamma, std::string("SoftTriple entropy-regularizer scale") + sfx)->delimiter(',');
  f.lambda = app->add_option("--lambda", o.lambda, std::string("SoftTriple logit scale") + sfx)->delimiter(',');
  f.delta = app->add_option("--delta", o.delta, std::string("SoftTriple margin") + sfx)->delimiter(',');
  f.margin = app->add_option("--margin", o.margin, "Contrastive margin")->capture_default_str();
  f.alpha = app->add_option("--alpha", o.alpha, "Triplet margin")->capture_default_str();
  app->add_option("--folds", o.folds, "Cross-validation folds")->capture_default_str();
  app->add_option("--epochs", o.epochs, "Maximum epochs per run")->capture_default_str();
  app->add_option("--batch-size", o.batch_size, "Minibatch size")->capture_default_str();
  app->add_option("--lr", o.lr, "Peak learning rate")->capture_default_str();
  app->add_option("--weight-decay", o.weight_decay, "Decoupled weight decay")->capture_default_str();
  app->add_option("--dim", o.dim, "Embedding dimension")->capture_default_str();
  app->add_option("--hidden", o.hidden, "Hidden width of the token transform")->capture_default_str();
  app->add_option("--pooling", o.pooling, "Sentence pooling: mean or first")->capture_default_str();
  app->add_option("--subsample", o.subsample, "Stratified subsample size (0 = full dataset)");
  app->add_option("--out", o.out, "Output directory (TRIPLEDML_OUT overrides)");
  return f;
}

inline TextDataset load_input(const Options& o) {
  DataFormat fmt = o.format.empty() ? format_from_path(o.dataset) : parse_format(o.format);
  TextDataset ds = load_dataset(o.dataset, fmt);
  if (o.subsample > 0) ds = subsample(ds, o.subsample, o.seed);
  return ds;
}

inline TrainConfig base_config(const Options& o) {
  TrainConfig cfg;
  cfg.loss = parse_loss(o.loss);
  cfg.margin = o.margin;
  cfg.alpha = o.alpha;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.base_lr = o.lr;
  cfg.weight_decay = o.weight_decay;
  cfg.dim = o.dim;
  cfg.hidden = o.hidden;
  if (o.pooling == "mean") cfg.pooling = Pooling::mean;
  else if (o.pooling == "first") cfg.pooling = Pooling::first_token;
  else throw ConfigError("--pooling must be mean or first");
  if (cfg.batch_size == 0) throw ConfigError("--batch-size must be positive");
  if (cfg.epochs == 0) throw ConfigError("--epochs must be positive");
  if (cfg.dim == 0 || cfg.hidden == 0) throw ConfigError("--dim and --hidden must be positive");
  return cfg;
}

template <typename T>
T single(const std::vector<T>& v, T fallback, const char* flag) {
  if (v.empty()) return fallback;
  if (v.size() > 1) throw ConfigError(std::string(flag) + " takes a single value here");
  return v.front();
}

inline std::filesystem::path require_out(const Options& o) {
  std::string out = resolve_out(o);
  if (out.empty()) throw ConfigError("--out (or TRIPLEDML_OUT) is required");
  std::filesystem::create_directories(out);
  return out;
}

inline int cmd_train(const Options& o, const Flags& flags, std::ostream& out) {
  TrainConfig cfg = base_config(o);
  check_loss_flags(cfg.loss, flags);
  const HyperConfig d;
  cfg.hyper = {single(o.k, d.k, "--k"), single(o.gamma, d.gamma, "--gamma"), single(o.lambda, d.lambda, "--lambda"),
               single(o.delta, d.delta, "--delta"), single(o.beta, d.beta, "--beta")};
  HyperGrid::single(cfg.hyper).validate();
  const auto dir = require_out(o);
  TextDataset ds = load_input(o);
  if (o.fold >= o.folds) throw ConfigError("--fold must be < --folds");
  FoldSplit split = stratified_kfold(ds, o.folds, o.seed);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult tr = train_one(cfg, o.seed, split.train[o.fold], split.validation[o.fold], ds);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  tr.model.save(dir.string());
  RunRecord rec{std::string(to_string(cfg.loss)), cfg.hyper, o.seed, o.fold, tr.val_accuracy, tr.epochs_trained, wall};
  ordered_json j = record_to_json(rec);
  j["loss_history"] = tr.loss_history;
  j["val_history"] = tr.val_history;
  j["dataset"] = ds.provenance;
  write_text((dir / "record.json").string(), j.dump(2) + "\n");
  out << "val_accuracy " << tripledml::detail::fmt_double(tr.val_accuracy) << " epochs " << tr.epochs_trained << " -> "
      << dir.string() << '\n';
  return kExitOk;
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  TrainedModel model = TrainedModel::load(o.checkpoint);
  DataFormat fmt = o.format.empty() ? format_from_path(o.dataset) : parse_format(o.format);
  TextDataset ds = load_dataset(o.dataset, fmt);
  if (ds.num_classes() > model.encoder.config.num_classes) {
    throw DataError("dataset has more classes than the model was trained on");
  }
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const double acc = accuracy(predict(model, tokenize_records(ds, idx, model.vocab)), ds.labels());
  out << "accuracy " << tripledml::detail::fmt_double(acc) << " on " << ds.size() << " records\n";
  if (std::string dir = resolve_out(o); !dir.empty()) {
    std::filesystem::create_directories(dir);
    ordered_json j{{"dataset", o.dataset}, {"records", ds.size()}, {"accuracy", acc}};
    write_text((std::filesystem::path(dir) / "evaluation.json").string(), j.dump(2) + "\n");
  }
  return kExitOk;
}

inline int cmd_gridsearch(const Options& o, const Flags& flags, std::ostream& out) {
  ExperimentPlan plan;
  plan.base = base_config(o);
  check_loss_flags(plan.base.loss, flags);
  plan.grid = HyperGrid::preset(o.grid_preset);
  if (!o.k.empty()) plan.grid.ks = o.k;
  if (!o.gamma.empty()) plan.grid.gammas = o.gamma;
  if (!o.lambda.empty()) plan.grid.lambdas = o.lambda;
  if (!o.delta.empty()) plan.grid.deltas = o.delta;
  if (!o.beta.empty()) plan.grid.betas = o.beta;
  if (!o.seeds.empty()) plan.seeds = o.seeds;
  plan.fold_count = o.folds;
  plan.validate();
  const auto dir = require_out(o);
  TextDataset ds = load_input(o);
  GridOptions go;
  go.jobs = std::max<std::size_t>(1, o.jobs);
  go.sink_path = (dir / "records.jsonl").string();
  go.resume = o.resume;
  RunReport report = run_grid(plan, ds, go);
  emit(report, ReportFormat::json, (dir / "report.json").string());
  emit(report, ReportFormat::csv, (dir / "records.csv").string());
  emit(report, ReportFormat::markdown, (dir / "report.md").string());
  const auto& best = report.best();
  out << report.records.size() << " runs over " << report.aggregates.size() << " configs; best mean "
      << tripledml::detail::fixed2(best.mean * 100.0) << "% (k=" << best.config.k << " gamma=" << best.config.gamma
      << " lambda=" << best.config.lambda << " delta=" << best.config.delta << " beta=" << best.config.beta << ")\n";
  return kExitOk;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  constexpr double kTolerance = 1e-5;
  auto rows = run_gradcheck_suite(o.seed, o.instances);
  bool ok = true;
  out << "| loss | instances | max rel. error | status |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    const bool pass = r.max_error < kTolerance;
    ok = ok && pass;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", r.max_error);
    out << "| " << r.loss << " | " << r.instances << " | " << buf << " | " << (pass ? "pass" : "FAIL") << " |\n";
  }
  return ok ? kExitOk : kExitNumeric;
}

inline int cmd_report(const Options& o, std::ostream& out) {
  const ReportFormat fmt = parse_report_format(o.report_format);
  std::string text;
  std::string name = "report";
  if (o.candidate.empty()) {
    if (o.baseline.size() != 1) throw ConfigError("report: give one --baseline to render, or baselines and candidates to compare");
    text = render(load_report(o.baseline.front()), fmt);
  } else {
    if (o.baseline.size() != o.candidate.size()) throw ConfigError("report: --baseline and --candidate counts differ");
    std::vector<DatasetScore> base, cand;
    for (const auto& p : o.baseline) base.push_back(score_of(load_report(p)));
    for (const auto& p : o.candidate) cand.push_back(score_of(load_report(p)));
    GainTable t = compare(base, cand);
    name = "comparison";
    switch (fmt) {
      case ReportFormat::json: text = gain_table_to_json(t); break;
      case ReportFormat::csv: text = gain_table_to_csv(t); break;
      case ReportFormat::markdown: text = gain_table_to_markdown(t, o.baseline_name, o.candidate_name); break;
    }
    if (std::string dir = resolve_out(o); !dir.empty()) {
      std::filesystem::create_directories(dir);
      write_text((std::filesystem::path(dir) / "gain_vs_size.csv").string(), gain_vs_size_csv(t));
    }
  }
  if (std::string dir = resolve_out(o); !dir.empty()) {
    std::filesystem::create_directories(dir);
    const char* ext = fmt == ReportFormat::json ? ".json" : fmt == ReportFormat::csv ? ".csv" : ".md";
    write_text((std::filesystem::path(dir) / (name + ext)).string(), text);
  }
  out << text;
  return kExitOk;
}

inline int cmd_fixtures(const Options& o, std::ostream& out) {
  const auto dir = require_out(o);
  for (auto& [file, ds] : shipped_fixtures()) {
    if (o.fixture_seed != kFixtureSeed) {
      FixtureSpec spec;
      spec.num_classes = ds.num_classes();
      spec.seed = o.fixture_seed;
      ds = make_keyword_fixture(spec);
    }
    save_dataset(ds, (dir / file).string(), DataFormat::csv);
    out << "wrote " << (dir / file).string() << " (" << ds.size() << " records, " << ds.num_classes()
        << " classes, seed " << o.fixture_seed << ")\n";
  }
  return kExitOk;
}

}  // namespace detail

/// Runs the command line; never throws. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using detail::Options;
  Options o;
  CLI::App app{"Deep-metric-learning toolkit: TripleEntropy and baseline losses", "tripledml"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  app.set_config("--config", "", "Key/value config file; [train] / [gridsearch] sections hold subcommand flags");
  app.fallthrough();

  auto* train = app.add_subcommand("train", "Train one model on one fold and write a checkpoint");
  detail::Flags train_flags = detail::add_model_flags(train, o, false);
  train->add_option("--seed", o.seed, "Seed for split, init and shuffling")->capture_default_str();
  train->add_option("--fold", o.fold, "Validation fold index")->capture_default_str();

  auto* evaluate = app.add_subcommand("evaluate", "Score a trained checkpoint on a dataset");
  evaluate->add_option("--checkpoint", o.checkpoint, "Directory written by train")->required();
  evaluate->add_option("--dataset", o.dataset, "Dataset file")->required();
  evaluate->add_option("--format", o.format, "Dataset format: csv, tsv, jsonl");
  evaluate->add_option("--out", o.out, "Output directory (TRIPLEDML_OUT overrides)");

  auto* grid = app.add_subcommand("gridsearch", "Seeds x folds x hyperparameter grid");
  detail::Flags grid_flags = detail::add_model_flags(grid, o, true);
  grid->add_option("--seeds", o.seeds, "Run seeds (comma list, default 2,16,128,2048)")->delimiter(',');
  grid->add_option("--seed", o.seed, "Seed for --subsample")->capture_default_str();
  grid->add_option("--grid-preset", o.grid_preset, "full (alias paper-full) or desk-small")->capture_default_str();
  grid->add_option("--jobs", o.jobs, "Parallel training jobs")->capture_default_str();
  grid->add_flag("--resume", o.resume, "Skip runs already in <out>/records.jsonl");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  gradcheck->add_option("--seed", o.seed, "Seed of the random instances")->capture_default_str();
  gradcheck->add_option("--instances", o.instances, "Instances per loss")->capture_default_str();

  auto* report = app.add_subcommand("report", "Render a report or compare baseline and candidate reports");
  report->add_option("--baseline", o.baseline, "Baseline report.json (repeatable)")->required();
  report->add_option("--candidate", o.candidate, "Candidate report.json (repeatable, matched by dataset)");
  report->add_option("--baseline-name", o.baseline_name, "Row label of the baseline")->capture_default_str();
  report->add_option("--candidate-name", o.candidate_name, "Row label of the candidate")->capture_default_str();
  report->add_option("--format", o.report_format, "md, csv or json")->capture_default_str();
  report->add_option("--out", o.out, "Output directory (TRIPLEDML_OUT overrides)");

  auto* fixtures = app.add_subcommand("fixtures", "Write the synthetic keyword corpora");
  fixtures->add_option("--out", o.out, "Output directory (TRIPLEDML_OUT overrides)");
  fixtures->add_option("--seed", o.fixture_seed, "Generation seed")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*train) return detail::cmd_train(o, train_flags, out);
    if (*evaluate) return detail::cmd_evaluate(o, out);
    if (*grid) return detail::cmd_gridsearch(o, grid_flags, out);
    if (*gradcheck) return detail::cmd_gradcheck(o, out);
    if (*report) return detail::cmd_report(o, out);
    if (*fixtures) return detail::cmd_fixtures(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ContractError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitConfig;
}

}  // namespace tripledml::cli

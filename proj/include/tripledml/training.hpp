#pragma once

// AdamW + warmup/decay schedule, the per-configuration training loop and the
// seeds x folds x grid experiment runner.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "tripledml/data.hpp"
#include "tripledml/diffcore.hpp"
#include "tripledml/encoder.hpp"
#include "tripledml/hyper.hpp"
#include "tripledml/losses.hpp"
#include "tripledml/reporting.hpp"
#include "tripledml/rng.hpp"

namespace tripledml {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline constexpr double kBaseLearningRate = 1e-5;
inline constexpr double kWarmupFraction = 0.06;

struct OptimizerState {
  std::vector<std::vector<double>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<double>> v;  // second moments
  std::uint64_t step = 0;
  double base_lr = kBaseLearningRate;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerState for_params(std::span<const Tensor> params, double base_lr = kBaseLearningRate,
                                   double weight_decay = 0.01) {
    OptimizerState s;
    s.base_lr = base_lr;
    s.weight_decay = weight_decay;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

/// One AdamW update of every parameter that received a gradient:
///   p <- p - lr * wd * p, then the bias-corrected Adam step.
/// Parameters without a gradient buffer are left untouched.
inline void optimizer_step(std::span<Tensor> params, OptimizerState& state, double lr) {
  if (!(lr >= 0.0)) throw ContractError("learning rate must be >= 0");
  if (state.m.size() != params.size()) throw DimensionError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    for (double g : params[i].grad())
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter " + std::to_string(i) + " (shape " +
                           shape_str(params[i].shape()) + ") at step " + std::to_string(state.step + 1));
      }
    if (state.m[i].size() != params[i].size()) throw DimensionError("optimizer moment shape mismatch");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto p = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= lr * state.weight_decay * p[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup 0 -> base_lr over ceil(warmup_fraction * total) steps, then
/// linear decay to 0 at total_steps.
struct Schedule {
  std::size_t total_steps = 0;
  double warmup_fraction = kWarmupFraction;
  double base_lr = kBaseLearningRate;

  std::size_t warmup_steps() const {
    // The small slack keeps e.g. 0.06 * 50 = 3.0000000000000004 at 3.
    return static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps) - 1e-9));
  }
};

inline double lr_at(std::size_t step, const Schedule& s) {
  if (step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  const std::size_t warm = s.warmup_steps();
  if (step <= warm) {
    return warm == 0 ? s.base_lr : s.base_lr * (static_cast<double>(step) / static_cast<double>(warm));
  }
  return s.base_lr * (static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - warm));
}

// ---------------------------------------------------------------------------
// Hyperparameter grid and experiment plan
// ---------------------------------------------------------------------------

struct HyperGrid {
  std::vector<std::size_t> ks;
  std::vector<double> gammas;
  std::vector<double> lambdas;
  std::vector<double> deltas;
  std::vector<double> betas;

  static HyperGrid full() {
    return {{10, 100, 1000},
            {0.01, 0.03, 0.05, 0.07, 0.1},
            {1, 3, 3.3, 4, 6, 8, 10},
            {0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1},
            {0.1, 0.3, 0.5, 0.7, 0.9}};
  }

  /// Reduced grid that fits a desk-scale budget.
  static HyperGrid desk_small() { return {{10}, {0.1}, {3}, {0.1}, {0.1, 0.3, 0.5, 0.7, 0.9}}; }

  static HyperGrid single(const HyperConfig& c) { return {{c.k}, {c.gamma}, {c.lambda}, {c.delta}, {c.beta}}; }

  static HyperGrid preset(std::string_view name) {
    if (name == "full" || name == "paper-full") return full();
    if (name == "desk-small") return desk_small();
    throw ConfigError("unknown grid preset '" + std::string(name) + "' (expected full or desk-small)");
  }

  std::size_t size() const { return ks.size() * gammas.size() * lambdas.size() * deltas.size() * betas.size(); }

  void validate() const {
    if (size() == 0) throw ConfigError("hyperparameter grid is empty");
    for (auto k : ks)
      if (k < 1) throw ConfigError("grid k values must be >= 1");
    for (auto g : gammas)
      if (!(g > 0)) throw ConfigError("grid gamma values must be > 0");
    for (auto l : lambdas)
      if (!(l > 0)) throw ConfigError("grid lambda values must be > 0");
    for (auto d : deltas)
      if (!(d >= 0)) throw ConfigError("grid delta values must be >= 0");
    for (auto b : betas)
      if (!(b >= 0 && b <= 1)) throw ConfigError("grid beta values must lie in [0, 1]");
  }

  /// Cartesian product in lexicographic (k, gamma, lambda, delta, beta) order
  /// with duplicates removed.
  std::vector<HyperConfig> enumerate() const {
    std::vector<HyperConfig> out;
    out.reserve(size());
    for (auto k : ks)
      for (auto g : gammas)
        for (auto l : lambdas)
          for (auto d : deltas)
            for (auto b : betas) out.push_back({k, g, l, d, b});
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

/// Grid points that actually differ for `loss`: fields a loss ignores are
/// pinned to the defaults so they do not multiply the job count.
inline std::vector<HyperConfig> effective_configs(const HyperGrid& grid, LossKind loss) {
  std::vector<HyperConfig> out;
  const HyperConfig defaults;
  for (HyperConfig c : grid.enumerate()) {
    if (!uses_soft_triple(loss)) {
      c.k = defaults.k;
      c.gamma = defaults.gamma;
      c.lambda = defaults.lambda;
      c.delta = defaults.delta;
    }
    if (loss != LossKind::tripleentropy) c.beta = defaults.beta;
    out.push_back(c);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct TrainConfig {
  LossKind loss = LossKind::tripleentropy;
  HyperConfig hyper;
  double margin = 1.0;  // contrastive
  double alpha = 0.2;   // triplet
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::size_t patience = 3;
  double base_lr = kBaseLearningRate;
  double weight_decay = 0.01;
  double warmup_fraction = kWarmupFraction;
  std::size_t dim = 64;
  std::size_t hidden = 64;
  Pooling pooling = Pooling::mean;
  bool normalize_soft_triple = false;

  std::string describe() const {
    std::ostringstream os;
    os << "loss=" << to_string(loss) << " k=" << hyper.k << " gamma=" << hyper.gamma << " lambda=" << hyper.lambda
       << " delta=" << hyper.delta << " beta=" << hyper.beta << " lr=" << base_lr << " wd=" << weight_decay
       << " epochs=" << epochs << " batch=" << batch_size << " dim=" << dim;
    return os.str();
  }
};

inline const std::vector<std::uint64_t>& protocol_seeds() {
  static const std::vector<std::uint64_t> seeds{2, 16, 128, 2048};
  return seeds;
}

struct ExperimentPlan {
  std::vector<std::uint64_t> seeds = protocol_seeds();
  std::size_t fold_count = 5;
  HyperGrid grid = HyperGrid::desk_small();
  TrainConfig base;  // loss, optimizer and model settings shared by all jobs

  std::vector<HyperConfig> configs() const { return effective_configs(grid, base.loss); }

  void validate() const {
    if (seeds.empty()) throw ConfigError("experiment plan has no seeds");
    if (fold_count < 2) throw ConfigError("experiment plan needs at least 2 folds");
    if (base.batch_size == 0) throw ConfigError("batch size must be positive");
    grid.validate();
  }
};

// ---------------------------------------------------------------------------
// Trained model: encoder plus whatever the loss needs for prediction
// ---------------------------------------------------------------------------

struct TrainedModel {
  LossKind loss = LossKind::ce;
  EncoderModel encoder;
  Vocabulary vocab;
  std::optional<SoftTripleParams> soft_triple;
  std::optional<ProxyNcaParams> proxy_nca;
  Tensor centroids;  // [C x d], nearest-centroid prediction for pair/triplet losses

  TrainedModel clone() const {
    TrainedModel m;
    m.loss = loss;
    m.encoder = encoder.clone();
    m.vocab = vocab;
    if (soft_triple) {
      m.soft_triple = *soft_triple;
      m.soft_triple->proxies = soft_triple->proxies.clone();
    }
    if (proxy_nca) m.proxy_nca = ProxyNcaParams{proxy_nca->proxies.clone()};
    if (centroids.defined()) m.centroids = centroids.clone();
    return m;
  }

  std::vector<Tensor> parameters() const {
    auto p = encoder.parameters();
    if (soft_triple) p.push_back(soft_triple->proxies);
    if (proxy_nca) p.push_back(proxy_nca->proxies);
    return p;
  }

  void save(const std::string& dir) const;
  static TrainedModel load(const std::string& dir);
};

inline std::vector<std::vector<TokenId>> tokenize_records(const TextDataset& ds, std::span<const std::size_t> idx,
                                                          const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    const auto& r = ds.records.at(i);
    out.push_back(r.text2 ? tokenize(r.text, vocab, std::string_view(*r.text2)) : tokenize(r.text, vocab));
  }
  return out;
}

inline Vocabulary build_vocabulary(const TextDataset& ds, std::span<const std::size_t> train_idx) {
  std::vector<std::string> texts;
  for (std::size_t i : train_idx) {
    texts.push_back(ds.records.at(i).text);
    if (ds.records[i].text2) texts.push_back(*ds.records[i].text2);
  }
  return Vocabulary::build(texts);
}

namespace detail {

inline std::vector<double> pooled_rows(const Tensor& pooled) { return {pooled.data().begin(), pooled.data().end()}; }

inline ClassId argmax_row(std::span<const double> row) {
  return static_cast<ClassId>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline Tensor class_centroids(const TrainedModel& model, const std::vector<std::vector<TokenId>>& seqs,
                              std::span<const ClassId> labels, std::size_t classes);

}  // namespace detail

/// Predicted classes for token sequences, evaluated in chunks.
inline std::vector<ClassId> predict(const TrainedModel& model, const std::vector<std::vector<TokenId>>& seqs,
                                    std::size_t chunk = 256) {
  std::vector<ClassId> out;
  out.reserve(seqs.size());
  const std::size_t C = model.encoder.config.num_classes, d = model.encoder.config.dim;
  for (std::size_t start = 0; start < seqs.size(); start += chunk) {
    const std::size_t end = std::min(seqs.size(), start + chunk);
    std::vector<std::vector<TokenId>> part(seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                           seqs.begin() + static_cast<std::ptrdiff_t>(end));
    Batch batch = make_batch(part, std::vector<ClassId>(part.size(), 0));
    EncoderOutput enc = encode(batch, model.encoder);
    const std::size_t B = batch.batch_size;
    if (predicts_with_head(model.loss)) {
      for (std::size_t b = 0; b < B; ++b) out.push_back(detail::argmax_row(enc.probs.data().subspan(b * C, C)));
    } else if (model.loss == LossKind::softtriple) {
      Tensor s = soft_triple_similarities(enc.pooled.detach(), *model.soft_triple);
      for (std::size_t b = 0; b < B; ++b) out.push_back(detail::argmax_row(s.data().subspan(b * C, C)));
    } else if (model.loss == LossKind::proxynca) {
      Tensor dist = proxy_distances(enc.pooled.detach(), model.proxy_nca->proxies.detach());
      for (std::size_t b = 0; b < B; ++b) {
        auto row = dist.data().subspan(b * C, C);
        out.push_back(static_cast<ClassId>(std::min_element(row.begin(), row.end()) - row.begin()));
      }
    } else {
      auto P = enc.pooled.data();
      auto Z = model.centroids.data();
      for (std::size_t b = 0; b < B; ++b) {
        ClassId best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += (P[b * d + j] - Z[c * d + j]) * (P[b * d + j] - Z[c * d + j]);
          if (s < best_d) {
            best_d = s;
            best = c;
          }
        }
        out.push_back(best);
      }
    }
  }
  return out;
}

inline double accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw ContractError("accuracy: size mismatch or empty");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

namespace detail {

inline Tensor class_centroids(const TrainedModel& model, const std::vector<std::vector<TokenId>>& seqs,
                              std::span<const ClassId> labels, std::size_t classes) {
  const std::size_t d = model.encoder.config.dim;
  std::vector<double> sum(classes * d, 0.0);
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t start = 0; start < seqs.size(); start += 256) {
    const std::size_t end = std::min(seqs.size(), start + 256);
    std::vector<std::vector<TokenId>> part(seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                           seqs.begin() + static_cast<std::ptrdiff_t>(end));
    Batch batch = make_batch(part, std::vector<ClassId>(part.size(), 0));
    auto P = encode(batch, model.encoder).pooled.data();
    for (std::size_t b = 0; b < part.size(); ++b) {
      const ClassId c = labels[start + b];
      ++count[c];
      for (std::size_t j = 0; j < d; ++j) sum[c * d + j] += P[b * d + j];
    }
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < d; ++j) sum[c * d + j] /= static_cast<double>(std::max<std::size_t>(1, count[c]));
  return Tensor::matrix(classes, d, std::move(sum));
}

// Loss of one minibatch for the configured objective. Returns an undefined
// tensor when the batch holds no usable pair/triplet.
inline Tensor batch_loss(const TrainConfig& cfg, const TrainedModel& model, const Batch& batch, Rng& pair_rng) {
  EncoderOutput enc = encode(batch, model.encoder);
  const std::size_t B = batch.batch_size;
  switch (cfg.loss) {
    case LossKind::ce:
      return multinomial_cross_entropy(enc.probs, batch.labels);
    case LossKind::softtriple: {
      TokenViews tv = token_views_for_dml(enc.token_embeddings, batch.pad_mask, batch.labels);
      return soft_triple_loss(tv.embeddings, tv.labels, *model.soft_triple);
    }
    case LossKind::tripleentropy: {
      TokenViews tv = token_views_for_dml(enc.token_embeddings, batch.pad_mask, batch.labels);
      TripleEntropyParams p{cfg.hyper.beta, *model.soft_triple};
      return triple_entropy_loss(enc.probs, batch.labels, tv.embeddings, tv.labels, p);
    }
    case LossKind::proxynca:
      return proxy_nca_loss_batch(enc.pooled, batch.labels, *model.proxy_nca);
    case LossKind::contrastive: {
      if (B < 2) return {};
      std::vector<std::size_t> left, right;
      std::vector<int> y;
      for (std::size_t i = 0; i < B; ++i) {
        std::size_t j = uniform_index(pair_rng, B - 1);
        if (j >= i) ++j;
        left.push_back(i);
        right.push_back(j);
        y.push_back(batch.labels[i] == batch.labels[j] ? 0 : 1);
      }
      Tensor l = contrastive_loss_batch(gather_rows(enc.pooled, left), gather_rows(enc.pooled, right), y,
                                        ContrastiveParams{cfg.margin});
      return mul_scalar(l, 1.0 / static_cast<double>(B));
    }
    case LossKind::triplet: {
      std::vector<std::size_t> a, p, n;
      for (std::size_t i = 0; i < B; ++i) {
        std::vector<std::size_t> pos, neg;
        for (std::size_t j = 0; j < B; ++j) {
          if (j == i) continue;
          (batch.labels[j] == batch.labels[i] ? pos : neg).push_back(j);
        }
        if (pos.empty() || neg.empty()) continue;
        a.push_back(i);
        p.push_back(pos[uniform_index(pair_rng, pos.size())]);
        n.push_back(neg[uniform_index(pair_rng, neg.size())]);
      }
      if (a.empty()) return {};
      const double count = static_cast<double>(a.size());
      Tensor l = triplet_loss_batch(gather_rows(enc.pooled, a), gather_rows(enc.pooled, p),
                                    gather_rows(enc.pooled, n), TripletParams{cfg.alpha});
      return mul_scalar(l, 1.0 / count);
    }
  }
  return {};
}

}  // namespace detail

struct TrainResult {
  double val_accuracy = 0.0;  // at the best epoch
  std::size_t epochs_trained = 0;
  TrainedModel model;         // snapshot at the best epoch
  std::vector<double> loss_history;
  std::vector<double> val_history;
};

/// Trains one model on `train_idx` and scores it on `val_idx`. Everything
/// random (init, proxies, shuffling, pair sampling) derives from `seed`.
/// Stops early after `patience` epochs without validation improvement.
inline TrainResult train_one(const TrainConfig& cfg, std::uint64_t seed, std::span<const std::size_t> train_idx,
                             std::span<const std::size_t> val_idx, const TextDataset& ds) {
  if (train_idx.empty() || val_idx.empty()) throw ContractError("train_one: empty train or validation split");
  {
    std::vector<std::size_t> a(train_idx.begin(), train_idx.end()), b(val_idx.begin(), val_idx.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    if (!both.empty()) throw ContractError("train_one: train and validation indices overlap");
  }
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t C = ds.num_classes();

  TrainedModel model;
  model.loss = cfg.loss;
  model.vocab = build_vocabulary(ds, train_idx);
  EncoderConfig ecfg{cfg.dim, cfg.hidden, C, cfg.pooling};
  {
    Rng init = make_rng(seed, "encoder-init");
    model.encoder = EncoderModel::init(model.vocab.size(), ecfg, init);
  }
  if (uses_soft_triple(cfg.loss)) {
    Rng prng = make_rng(seed, "proxy-init");
    model.soft_triple = SoftTripleParams::init(C, cfg.hyper.k, cfg.dim, cfg.hyper.gamma, cfg.hyper.lambda,
                                               cfg.hyper.delta, prng);
    model.soft_triple->normalize = cfg.normalize_soft_triple;
  } else if (cfg.loss == LossKind::proxynca) {
    Rng prng = make_rng(seed, "proxy-init");
    model.proxy_nca = ProxyNcaParams::init(C, cfg.dim, prng);
  }

  const auto train_seqs = tokenize_records(ds, train_idx, model.vocab);
  const auto val_seqs = tokenize_records(ds, val_idx, model.vocab);
  std::vector<ClassId> train_labels, val_labels;
  for (std::size_t i : train_idx) train_labels.push_back(ds.records[i].label);
  for (std::size_t i : val_idx) val_labels.push_back(ds.records[i].label);

  const std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  Schedule schedule{steps_per_epoch * cfg.epochs, cfg.warmup_fraction, cfg.base_lr};
  std::vector<Tensor> params = model.parameters();
  OptimizerState opt = OptimizerState::for_params(params, cfg.base_lr, cfg.weight_decay);
  Rng shuffle_rng = make_rng(seed, "shuffle");
  Rng pair_rng = make_rng(seed, "pairs");

  auto evaluate = [&]() {
    if (cfg.loss == LossKind::contrastive || cfg.loss == LossKind::triplet) {
      model.centroids = detail::class_centroids(model, train_seqs, train_labels, C);
    }
    return accuracy(predict(model, val_seqs), val_labels);
  };

  TrainResult result;
  result.val_accuracy = -1.0;
  std::size_t stagnant = 0, step = 0;
  std::vector<std::size_t> order(train_idx.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::vector<TokenId>> seqs;
      std::vector<ClassId> labels;
      for (std::size_t i = start; i < end; ++i) {
        seqs.push_back(train_seqs[order[i]]);
        labels.push_back(train_labels[order[i]]);
      }
      Batch batch = make_batch(seqs, std::move(labels));
      ++step;
      Tensor loss = detail::batch_loss(cfg, model, batch, pair_rng);
      if (!loss.defined()) continue;
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (" + cfg.describe() +
                           ", seed=" + std::to_string(seed) + ")");
      }
      result.loss_history.push_back(value);
      for (auto& p : params) p.zero_grad();
      backward(loss);
      optimizer_step(params, opt, lr_at(step, schedule));
    }
    const double acc = evaluate();
    result.val_history.push_back(acc);
    result.epochs_trained = epoch + 1;
    if (acc > result.val_accuracy) {
      result.val_accuracy = acc;
      result.model = model.clone();
      stagnant = 0;
    } else if (++stagnant >= cfg.patience) {
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Grid execution
// ---------------------------------------------------------------------------

struct GridOptions {
  std::size_t jobs = 1;
  std::string sink_path;  // append-only JSONL of run records; empty = none
  bool resume = false;
  std::function<void(const RunRecord&)> on_record;
};

namespace detail {

using JobKey = std::tuple<HyperConfig, std::uint64_t, std::size_t>;

inline std::map<JobKey, RunRecord> read_sink(const std::string& path, std::string_view loss) {
  std::map<JobKey, RunRecord> done;
  std::ifstream in(path, std::ios::binary);
  if (!in) return done;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    RunRecord r;
    try {
      r = record_from_json(ordered_json::parse(line));
    } catch (const nlohmann::json::exception&) {
      continue;  // torn final line of an interrupted run
    }
    if (r.loss != loss) continue;
    done.emplace(JobKey{r.config, r.seed, r.fold}, r);
  }
  return done;
}

}  // namespace detail

/// Trains every (config, seed, fold) job of the plan and aggregates the
/// validation accuracies. The fold split for a seed is keyed to that seed.
/// Results do not depend on `jobs`.
inline RunReport run_grid(const ExperimentPlan& plan, const TextDataset& ds, const GridOptions& options = {}) {
  plan.validate();
  const auto configs = plan.configs();
  std::vector<FoldSplit> splits;
  for (auto seed : plan.seeds) splits.push_back(stratified_kfold(ds, plan.fold_count, seed));

  struct Job {
    std::size_t config, seed, fold;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < configs.size(); ++c)
    for (std::size_t s = 0; s < plan.seeds.size(); ++s)
      for (std::size_t f = 0; f < plan.fold_count; ++f) jobs.push_back({c, s, f});

  const std::string loss_name(to_string(plan.base.loss));
  std::vector<std::optional<RunRecord>> results(jobs.size());
  if (options.resume && !options.sink_path.empty()) {
    auto done = detail::read_sink(options.sink_path, loss_name);
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      auto it = done.find({configs[jobs[i].config], plan.seeds[jobs[i].seed], jobs[i].fold});
      if (it != done.end()) results[i] = it->second;
    }
  } else if (!options.sink_path.empty()) {
    std::ofstream truncate(options.sink_path, std::ios::binary | std::ios::trunc);
    if (!truncate) throw DataError("cannot write result stream " + options.sink_path);
  }

  std::mutex sink_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size() || failed.load()) return;
      if (results[i]) continue;
      const Job& job = jobs[i];
      try {
        TrainConfig cfg = plan.base;
        cfg.hyper = configs[job.config];
        const std::uint64_t seed = plan.seeds[job.seed];
        const auto& split = splits[job.seed];
        const auto t0 = std::chrono::steady_clock::now();
        TrainResult tr = train_one(cfg, seed, split.train[job.fold], split.validation[job.fold], ds);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        RunRecord rec{loss_name, cfg.hyper, seed, job.fold, tr.val_accuracy, tr.epochs_trained, wall};
        std::lock_guard lock(sink_mutex);
        results[i] = rec;
        if (!options.sink_path.empty()) {
          std::ofstream out(options.sink_path, std::ios::binary | std::ios::app);
          out << record_to_json(rec).dump() << '\n';
        }
        if (options.on_record) options.on_record(rec);
      } catch (...) {
        std::lock_guard lock(sink_mutex);
        if (!error) error = std::current_exception();
        failed = true;
        return;
      }
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.jobs, jobs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  std::vector<RunRecord> records;
  records.reserve(results.size());
  for (auto& r : results) records.push_back(*r);
  ReportMetadata meta{ds.provenance, ds.size(), loss_name, plan.seeds, plan.fold_count};
  return make_report(std::move(meta), std::move(records));
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

inline void TrainedModel::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  Checkpoint ck = to_checkpoint(encoder);
  ck.meta["loss"] = std::string(to_string(loss));
  if (soft_triple) {
    ck.meta["k"] = std::to_string(soft_triple->k);
    ck.meta["gamma"] = detail::fmt_double(soft_triple->gamma);
    ck.meta["lambda"] = detail::fmt_double(soft_triple->lambda);
    ck.meta["delta"] = detail::fmt_double(soft_triple->delta);
    ck.meta["normalize"] = soft_triple->normalize ? "1" : "0";
    ck.params.emplace_back("soft_triple_proxies", soft_triple->proxies);
  }
  if (proxy_nca) ck.params.emplace_back("proxy_nca_proxies", proxy_nca->proxies);
  if (centroids.defined()) ck.params.emplace_back("centroids", centroids);
  ck.save((std::filesystem::path(dir) / "checkpoint.txt").string());
  vocab.save((std::filesystem::path(dir) / "vocab.txt").string());
}

inline TrainedModel TrainedModel::load(const std::string& dir) {
  Checkpoint ck = Checkpoint::load((std::filesystem::path(dir) / "checkpoint.txt").string());
  TrainedModel m;
  m.encoder = encoder_from_checkpoint(ck);
  m.vocab = Vocabulary::load((std::filesystem::path(dir) / "vocab.txt").string());
  if (m.vocab.size() != m.encoder.vocab_size()) throw DataError("vocabulary size does not match checkpoint");
  auto it = ck.meta.find("loss");
  m.loss = parse_loss(it == ck.meta.end() ? "ce" : it->second);
  if (ck.has_param("soft_triple_proxies")) {
    SoftTripleParams p;
    p.proxies = ck.param("soft_triple_proxies");
    p.k = std::stoul(ck.meta.at("k"));
    p.gamma = std::stod(ck.meta.at("gamma"));
    p.lambda = std::stod(ck.meta.at("lambda"));
    p.delta = std::stod(ck.meta.at("delta"));
    p.normalize = ck.meta.at("normalize") == "1";
    p.validate();
    m.soft_triple = p;
  }
  if (ck.has_param("proxy_nca_proxies")) m.proxy_nca = ProxyNcaParams{ck.param("proxy_nca_proxies")};
  if (ck.has_param("centroids")) m.centroids = ck.param("centroids");
  return m;
}

}  // namespace tripledml

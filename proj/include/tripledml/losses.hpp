#pragma once

// Metric-learning losses: contrastive, triplet, ProxyNCA, SoftTriple,
// multinomial cross-entropy and the TripleEntropy mix of the last two.
// All return scalar tensors wired into the autodiff graph.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tripledml/diffcore.hpp"
#include "tripledml/rng.hpp"

namespace tripledml {

using ClassId = std::size_t;

struct ContrastiveParams {
  double margin = 1.0;

  void validate() const {
    if (!(margin >= 0.0)) throw ContractError("contrastive margin must be >= 0");
  }
};

struct TripletParams {
  double alpha = 0.2;

  void validate() const {
    if (!(alpha >= 0.0)) throw ContractError("triplet alpha must be >= 0");
  }
};

/// One learnable proxy per class, rows of a [C x d] matrix.
struct ProxyNcaParams {
  Tensor proxies;

  std::size_t num_classes() const { return proxies.dim(0); }

  void validate() const {
    if (!proxies.defined() || proxies.rank() != 2 || proxies.dim(0) < 2) {
      throw ContractError("ProxyNCA proxies must be a [C x d] matrix with C >= 2");
    }
    for (double v : proxies.data())
      if (!std::isfinite(v)) throw NumericError("ProxyNCA proxies contain a non-finite value");
  }

  static ProxyNcaParams init(std::size_t classes, std::size_t dim, Rng& rng) {
    std::vector<double> w(classes * dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : w) v = normal_draw(rng) * scale;
    return {Tensor::matrix(classes, dim, std::move(w), true)};
  }
};

/// k proxies per class stored as a [C x k x d] tensor, plus the scales of the
/// relaxed similarity (gamma), of the logits (lambda) and the margin delta.
struct SoftTripleParams {
  Tensor proxies;
  std::size_t k = 10;
  double gamma = 0.1;
  double lambda = 3.0;
  double delta = 0.1;
  /// L2-normalize embeddings and proxies before the inner products.
  bool normalize = false;

  std::size_t num_classes() const { return proxies.dim(0); }
  std::size_t dim() const { return proxies.dim(2); }

  void validate() const {
    if (k < 1) throw ContractError("SoftTriple k must be >= 1");
    if (!(gamma > 0.0)) throw ContractError("SoftTriple gamma must be > 0");
    if (!(lambda > 0.0)) throw ContractError("SoftTriple lambda must be > 0");
    if (!(delta >= 0.0)) throw ContractError("SoftTriple delta must be >= 0");
    if (!proxies.defined() || proxies.rank() != 3 || proxies.dim(1) != k) {
      throw ContractError("SoftTriple proxies must have shape [C x k x d] with k = " + std::to_string(k));
    }
    for (double v : proxies.data())
      if (!std::isfinite(v)) throw NumericError("SoftTriple proxies contain a non-finite value");
  }

  /// Proxies drawn from N(0, 1/d).
  static SoftTripleParams init(std::size_t classes, std::size_t k, std::size_t dim, double gamma,
                               double lambda, double delta, Rng& rng) {
    std::vector<double> w(classes * k * dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : w) v = normal_draw(rng) * scale;
    SoftTripleParams p;
    p.proxies = Tensor::from({classes, k, dim}, std::move(w), true);
    p.k = k;
    p.gamma = gamma;
    p.lambda = lambda;
    p.delta = delta;
    return p;
  }
};

struct TripleEntropyParams {
  double beta = 0.5;
  SoftTripleParams soft_triple;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("TripleEntropy beta must lie in [0, 1]");
  }
};

namespace detail {

inline Tensor as_row_matrix(const Tensor& v) {
  if (v.rank() == 1) return reshape(v, {1, v.dim(0)});
  if (v.rank() == 2) return v;
  throw DimensionError("expected a vector or matrix, got " + shape_str(v.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": dimension mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline Tensor one_hot(std::span<const ClassId> labels, std::size_t classes, double value = 1.0) {
  std::vector<double> y(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) y[i * classes + labels[i]] = value;
  return Tensor::matrix(labels.size(), classes, std::move(y));
}

inline void require_labels(std::span<const ClassId> labels, std::size_t classes) {
  for (ClassId c : labels)
    if (c >= classes) {
      throw ContractError("label " + std::to_string(c) + " out of range for " + std::to_string(classes) +
                          " classes");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

inline constexpr double kProbabilityFloor = 1e-12;

/// -(1/N) sum_i sum_c y_ic log p_ic with p clamped to [1e-12, 1].
inline Tensor multinomial_cross_entropy(const Tensor& probs, const Tensor& targets) {
  if (probs.rank() != 2) throw DimensionError("cross-entropy expects [N x C] probabilities");
  detail::require_same_shape(probs, targets, "multinomial_cross_entropy");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  if (n == 0) throw ContractError("cross-entropy on an empty batch");
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += probs.at(i, j);
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractError("cross-entropy: probability row " + std::to_string(i) + " sums to " +
                          std::to_string(s));
    }
  }
  Tensor logp = log(clamp_min(probs, kProbabilityFloor));
  return mul_scalar(sum(mul(targets, logp)), -1.0 / static_cast<double>(n));
}

inline Tensor multinomial_cross_entropy(const Tensor& probs, std::span<const ClassId> labels) {
  if (probs.rank() != 2) throw DimensionError("cross-entropy expects [N x C] probabilities");
  if (labels.size() != probs.dim(0)) throw DimensionError("cross-entropy: label count mismatch");
  detail::require_labels(labels, probs.dim(1));
  return multinomial_cross_entropy(probs, detail::one_hot(labels, probs.dim(1)));
}

// ---------------------------------------------------------------------------
// Pair / triplet losses
// ---------------------------------------------------------------------------

/// Sum over rows of (1-y) D^2 + y max(0, m - D)^2 with D the Euclidean
/// distance; y = 0 marks similar pairs, y = 1 dissimilar ones.
inline Tensor contrastive_loss_batch(const Tensor& x1, const Tensor& x2, std::span<const int> y,
                                     const ContrastiveParams& params) {
  params.validate();
  detail::require_same_shape(x1, x2, "contrastive_loss");
  Tensor a = detail::as_row_matrix(x1);
  Tensor b = detail::as_row_matrix(x2);
  const std::size_t n = a.dim(0);
  if (y.size() != n) throw DimensionError("contrastive_loss: label count mismatch");
  std::vector<double> similar(n), dissimilar(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 0 && y[i] != 1) throw ContractError("contrastive_loss: pair label must be 0 or 1");
    similar[i] = y[i] == 0 ? 1.0 : 0.0;
    dissimilar[i] = y[i] == 1 ? 1.0 : 0.0;
  }
  Tensor diff = sub(a, b);
  Tensor d2 = sum_rows(square(diff));
  Tensor d = l2_norm_rows(diff);
  Tensor pull = mul(d2, Tensor::vector(similar));
  Tensor push = mul(square(hinge(params.margin - d)), Tensor::vector(dissimilar));
  return sum(add(pull, push));
}

inline Tensor contrastive_loss(const Tensor& x1, const Tensor& x2, int y, const ContrastiveParams& params) {
  if (x1.rank() != 1) throw DimensionError("contrastive_loss expects vectors, got " + shape_str(x1.shape()));
  const int labels[] = {y};
  return contrastive_loss_batch(x1, x2, labels, params);
}

/// Sum over rows of [ |a-p|^2 - |a-n|^2 + alpha ]_+.
inline Tensor triplet_loss_batch(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                                 const TripletParams& params) {
  params.validate();
  detail::require_same_shape(anchor, positive, "triplet_loss");
  detail::require_same_shape(anchor, negative, "triplet_loss");
  Tensor a = detail::as_row_matrix(anchor);
  Tensor p = detail::as_row_matrix(positive);
  Tensor n = detail::as_row_matrix(negative);
  return sum(hinge(sq_dist_rows(a, p) - sq_dist_rows(a, n) + params.alpha));
}

inline Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                           const TripletParams& params) {
  if (anchor.rank() != 1) throw DimensionError("triplet_loss expects vectors, got " + shape_str(anchor.shape()));
  return triplet_loss_batch(anchor, positive, negative, params);
}

// ---------------------------------------------------------------------------
// ProxyNCA
// ---------------------------------------------------------------------------

/// Squared distances between L2-normalized rows of x [n x d] and normalized
/// proxies [C x d], as an [n x C] matrix.
inline Tensor proxy_distances(const Tensor& x, const Tensor& proxies) {
  const std::size_t n = x.dim(0), c = proxies.dim(0);
  if (x.dim(1) != proxies.dim(1)) {
    throw DimensionError("proxy_nca: embedding " + shape_str(x.shape()) + " vs proxies " +
                         shape_str(proxies.shape()));
  }
  Tensor xn = normalize_rows(x);
  Tensor zn = normalize_rows(proxies);
  std::vector<std::size_t> xi(n * c), zi(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xi[i * c + j] = i;
      zi[i * c + j] = j;
    }
  return reshape(sq_dist_rows(gather_rows(xn, std::move(xi)), gather_rows(zn, std::move(zi))), {n, c});
}

/// Mean over rows of d(x, z_y) + log sum_{z != y} exp(-d(x, z)); the
/// denominator runs over the proxies of the other classes only.
inline Tensor proxy_nca_loss_batch(const Tensor& x, std::span<const ClassId> labels,
                                   const ProxyNcaParams& params) {
  params.validate();
  Tensor xm = detail::as_row_matrix(x);
  const std::size_t n = xm.dim(0), c = params.num_classes();
  if (labels.size() != n) throw DimensionError("proxy_nca: label count mismatch");
  if (n == 0) throw ContractError("proxy_nca on an empty batch");
  detail::require_labels(labels, c);
  Tensor dist = proxy_distances(xm, params.proxies);
  Tensor positive = pick(dist, labels);
  std::vector<std::size_t> neg_index;
  neg_index.reserve(n * (c - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      if (j != labels[i]) neg_index.push_back(i * c + j);
  Tensor negatives = reshape(gather_rows(reshape(dist, {n * c}), std::move(neg_index)), {n, c - 1});
  return mean(add(positive, logsumexp_rows(-negatives)));
}

inline Tensor proxy_nca_loss(const Tensor& x, ClassId label, const ProxyNcaParams& params) {
  if (x.rank() != 1) throw DimensionError("proxy_nca_loss expects a vector, got " + shape_str(x.shape()));
  const ClassId labels[] = {label};
  return proxy_nca_loss_batch(x, labels, params);
}

// ---------------------------------------------------------------------------
// SoftTriple
// ---------------------------------------------------------------------------

/// Relaxed similarities S'[i, c] = sum_k softmax_k(e_i.w_c^k / gamma) e_i.w_c^k
/// for embeddings [M x d]; returns [M x C].
inline Tensor soft_triple_similarities(const Tensor& embeddings, const SoftTripleParams& params) {
  params.validate();
  Tensor e = detail::as_row_matrix(embeddings);
  const std::size_t m = e.dim(0), c = params.num_classes(), k = params.k, d = params.dim();
  if (e.dim(1) != d) {
    throw DimensionError("soft_triple: embedding " + shape_str(e.shape()) + " vs proxies " +
                         shape_str(params.proxies.shape()));
  }
  Tensor w = reshape(params.proxies, {c * k, d});
  if (params.normalize) {
    e = normalize_rows(e);
    w = normalize_rows(w);
  }
  Tensor inner = matmul(e, transpose(w));  // [M x C*k]
  for (double v : inner.data())
    if (!std::isfinite(v)) throw NumericError("soft_triple: non-finite inner product");
  Tensor per_class = reshape(inner, {m * c, k});
  Tensor weights = softmax(mul_scalar(per_class, 1.0 / params.gamma));
  return reshape(sum_rows(mul(weights, per_class)), {m, c});
}

inline Tensor soft_triple_similarity(const Tensor& embedding, ClassId class_id, const SoftTripleParams& params) {
  if (embedding.rank() != 1) {
    throw DimensionError("soft_triple_similarity expects a vector, got " + shape_str(embedding.shape()));
  }
  params.validate();
  if (class_id >= params.num_classes()) throw ContractError("soft_triple_similarity: class out of range");
  Tensor s = soft_triple_similarities(embedding, params);
  const std::size_t col[] = {class_id};
  return reshape(pick(s, col), {});
}

/// Mean over embeddings of the margin softmax loss on lambda * S', with the
/// margin delta subtracted from the true-class similarity.
inline Tensor soft_triple_loss(const Tensor& embeddings, std::span<const ClassId> labels,
                               const SoftTripleParams& params) {
  params.validate();
  Tensor e = detail::as_row_matrix(embeddings);
  const std::size_t m = e.dim(0), c = params.num_classes();
  if (c < 2) throw ContractError("soft_triple_loss needs at least 2 classes");
  if (m == 0) throw ContractError("soft_triple_loss on an empty batch");
  if (labels.size() != m) throw DimensionError("soft_triple_loss: label count mismatch");
  detail::require_labels(labels, c);
  Tensor s = soft_triple_similarities(e, params);
  Tensor logits = mul_scalar(sub(s, detail::one_hot(labels, c, params.delta)), params.lambda);
  return mean(sub(logsumexp_rows(logits), pick(logits, labels)));
}

// ---------------------------------------------------------------------------
// TripleEntropy
// ---------------------------------------------------------------------------

/// beta * CE(probs) + (1 - beta) * SoftTriple(token embeddings). At beta = 1
/// or beta = 0 only the surviving term is built.
inline Tensor triple_entropy_loss(const Tensor& probs, std::span<const ClassId> targets,
                                  const Tensor& token_embeddings, std::span<const ClassId> token_labels,
                                  const TripleEntropyParams& params) {
  params.validate();
  if (params.beta == 1.0) return multinomial_cross_entropy(probs, targets);
  if (params.beta == 0.0) return soft_triple_loss(token_embeddings, token_labels, params.soft_triple);
  Tensor ce = multinomial_cross_entropy(probs, targets);
  Tensor st = soft_triple_loss(token_embeddings, token_labels, params.soft_triple);
  return add(mul_scalar(ce, params.beta), mul_scalar(st, 1.0 - params.beta));
}

}  // namespace tripledml

#pragma once

// Finite-difference verification of every loss over seeded random instances.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "tripledml/diffcore.hpp"
#include "tripledml/losses.hpp"
#include "tripledml/rng.hpp"

namespace tripledml {

struct GradCheckRow {
  std::string loss;
  std::size_t instances = 0;
  double max_error = 0.0;
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = lo + (hi - lo) * (static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0));
  return Tensor::from(std::move(shape), std::move(v));
}

inline double uniform_value(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0));
}

inline std::vector<ClassId> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<ClassId> out(n);
  for (auto& c : out) c = uniform_index(rng, classes);
  return out;
}

}  // namespace detail

/// Max relative gradient error per loss over `instances` random draws,
/// checking every differentiable input of each loss.
inline std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 50,
                                                     double h = 1e-5) {
  using detail::uniform_tensor;
  using detail::uniform_value;
  std::vector<GradCheckRow> rows;
  auto run = [&](const std::string& name, auto&& one) {
    GradCheckRow row{name, instances, 0.0};
    Rng rng = make_rng(seed, "gradcheck-" + name);
    for (std::size_t i = 0; i < instances; ++i) row.max_error = std::max(row.max_error, one(rng));
    rows.push_back(row);
  };

  run("contrastive", [&](Rng& rng) {
    Tensor a = uniform_tensor({4}, rng, -3, 3), b = uniform_tensor({4}, rng, -3, 3);
    const int y = static_cast<int>(uniform_index(rng, 2));
    ContrastiveParams p{uniform_value(rng, 0.5, 8.0)};
    double e = grad_check([&](const Tensor& x) { return contrastive_loss(x, b, y, p); }, a, h);
    return std::max(e, grad_check([&](const Tensor& x) { return contrastive_loss(a, x, y, p); }, b, h));
  });

  run("triplet", [&](Rng& rng) {
    Tensor a = uniform_tensor({4}, rng, -3, 3), pos = uniform_tensor({4}, rng, -3, 3),
           neg = uniform_tensor({4}, rng, -3, 3);
    TripletParams p{uniform_value(rng, 0.0, 10.0)};
    double e = grad_check([&](const Tensor& x) { return triplet_loss(x, pos, neg, p); }, a, h);
    e = std::max(e, grad_check([&](const Tensor& x) { return triplet_loss(a, x, neg, p); }, pos, h));
    return std::max(e, grad_check([&](const Tensor& x) { return triplet_loss(a, pos, x, p); }, neg, h));
  });

  run("proxynca", [&](Rng& rng) {
    Tensor x = uniform_tensor({4}, rng, -3, 3);
    Tensor z = uniform_tensor({3, 4}, rng, -3, 3);
    const ClassId label = uniform_index(rng, 3);
    double e = grad_check([&](const Tensor& t) { return proxy_nca_loss(t, label, ProxyNcaParams{z}); }, x, h);
    return std::max(e, grad_check([&](const Tensor& t) { return proxy_nca_loss(x, label, ProxyNcaParams{t}); }, z, h));
  });

  auto soft_triple_draw = [&](Rng& rng, std::size_t classes, std::size_t k, std::size_t d) {
    SoftTripleParams p;
    p.k = k;
    p.proxies = uniform_tensor({classes, k, d}, rng, -1, 1);
    p.gamma = uniform_value(rng, 0.1, 1.0);
    p.lambda = uniform_value(rng, 1.0, 8.0);
    p.delta = uniform_value(rng, 0.0, 1.0);
    return p;
  };

  run("softtriple", [&](Rng& rng) {
    SoftTripleParams p = soft_triple_draw(rng, 3, 2, 4);
    Tensor e = uniform_tensor({3, 4}, rng, -1, 1);
    auto labels = detail::random_labels(rng, 3, 3);
    double err = grad_check([&](const Tensor& t) { return soft_triple_loss(t, labels, p); }, e, h);
    return std::max(err, grad_check(
                             [&](const Tensor& w) {
                               SoftTripleParams q = p;
                               q.proxies = w;
                               return soft_triple_loss(e, labels, q);
                             },
                             p.proxies, h));
  });

  run("ce", [&](Rng& rng) {
    Tensor z = uniform_tensor({4, 3}, rng, -3, 3);
    auto labels = detail::random_labels(rng, 4, 3);
    return grad_check([&](const Tensor& t) { return multinomial_cross_entropy(softmax(t), labels); }, z, h);
  });

  run("tripleentropy", [&](Rng& rng) {
    SoftTripleParams st = soft_triple_draw(rng, 3, 2, 4);
    TripleEntropyParams p{uniform_value(rng, 0.05, 0.95), st};
    Tensor z = uniform_tensor({2, 3}, rng, -3, 3);
    Tensor e = uniform_tensor({5, 4}, rng, -1, 1);
    auto labels = detail::random_labels(rng, 2, 3);
    const std::vector<ClassId> token_labels{labels[0], labels[0], labels[0], labels[1], labels[1]};
    double err = grad_check(
        [&](const Tensor& t) { return triple_entropy_loss(softmax(t), labels, e, token_labels, p); }, z, h);
    err = std::max(err, grad_check(
                            [&](const Tensor& t) { return triple_entropy_loss(softmax(z), labels, t, token_labels, p); },
                            e, h));
    return std::max(err, grad_check(
                             [&](const Tensor& w) {
                               TripleEntropyParams q = p;
                               q.soft_triple.proxies = w;
                               return triple_entropy_loss(softmax(z), labels, e, token_labels, q);
                             },
                             st.proxies, h));
  });
  return rows;
}

}  // namespace tripledml

#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <string_view>

#include "tripledml/errors.hpp"

namespace tripledml {

enum class LossKind { ce, contrastive, triplet, proxynca, softtriple, tripleentropy };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::contrastive: return "contrastive";
    case LossKind::triplet: return "triplet";
    case LossKind::proxynca: return "proxynca";
    case LossKind::softtriple: return "softtriple";
    case LossKind::tripleentropy: return "tripleentropy";
  }
  return "?";
}

inline LossKind parse_loss(std::string_view s) {
  for (LossKind k : {LossKind::ce, LossKind::contrastive, LossKind::triplet, LossKind::proxynca,
                     LossKind::softtriple, LossKind::tripleentropy})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown loss '" + std::string(s) + "'");
}

inline bool uses_soft_triple(LossKind k) { return k == LossKind::softtriple || k == LossKind::tripleentropy; }
inline bool predicts_with_head(LossKind k) { return k == LossKind::ce || k == LossKind::tripleentropy; }

/// One point of the (k, gamma, lambda, delta, beta) search space. Ordering is
/// lexicographic in that field order.
struct HyperConfig {
  std::size_t k = 10;
  double gamma = 0.1;
  double lambda = 3.0;
  double delta = 0.1;
  double beta = 0.5;

  auto operator<=>(const HyperConfig&) const = default;
  bool operator==(const HyperConfig&) const = default;
};

}  // namespace tripledml

#pragma once

// Keyword-planted synthetic corpora. Every sentence is filler words plus
// keywords of its class; optional distractors (a keyword of another class,
// outnumbered by true keywords) and label noise control the difficulty.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tripledml/data.hpp"
#include "tripledml/rng.hpp"

namespace tripledml {

struct FixtureSpec {
  std::size_t num_classes = 2;  // 2 (sentiment style) or 6 (question-type style)
  std::size_t size = 3000;
  std::uint64_t seed = 20211;
  double distractor_rate = 0.3;
  double label_noise = 0.05;
  std::size_t min_filler = 4;
  std::size_t max_filler = 12;
};

/// Generation seed of the shipped fixtures.
inline constexpr std::uint64_t kFixtureSeed = 20211;

namespace detail {

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "the", "a", "an", "this", "that", "it", "was", "is", "with", "and", "of", "to", "in", "on",
      "for", "at", "really", "quite", "very", "some", "movie", "film", "story", "plot", "scene",
      "actor", "ending", "music", "camera", "director", "book", "place", "time", "people", "thing",
      "day", "again", "just", "also", "then", "there", "here", "about", "over", "after", "before",
      "while", "still", "much", "more"};
  return words;
}

inline std::vector<std::vector<std::string>> class_stems(std::size_t classes) {
  if (classes == 2) {
    return {{"good", "great", "excellent", "wonderful", "superb", "delightful", "brilliant", "charming"},
            {"bad", "awful", "terrible", "boring", "dreadful", "poor", "dull", "horrible"}};
  }
  if (classes == 6) {
    return {{"where", "city", "country", "river", "mountain", "capital", "located", "continent"},
            {"who", "person", "president", "writer", "inventor", "singer", "founder", "painter"},
            {"many", "number", "count", "population", "distance", "percent", "total", "amount"},
            {"why", "meaning", "describe", "explain", "reason", "definition", "purpose", "cause"},
            {"animal", "food", "color", "instrument", "sport", "plant", "vehicle", "disease"},
            {"acronym", "abbreviation", "stand", "initials", "short", "expansion", "letters", "abbreviated"}};
  }
  throw ContractError("fixtures support 2 or 6 classes, got " + std::to_string(classes));
}

// 8 stems x 4 forms = 32 keywords per class, ordered from common to rare.
inline std::vector<std::vector<std::string>> class_keywords(std::size_t classes) {
  static constexpr std::array<const char*, 4> kForms = {"", "ish", "est", "ness"};
  auto stems = class_stems(classes);
  std::vector<std::vector<std::string>> out(stems.size());
  for (std::size_t c = 0; c < stems.size(); ++c)
    for (const char* form : kForms)
      for (const auto& s : stems[c]) out[c].push_back(s + form);
  return out;
}

// Zipf-like pick: index i has weight 1 / (i + 1).
inline std::size_t zipf_index(Rng& rng, std::size_t n) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += 1.0 / static_cast<double>(i + 1);
  double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0) * total;
  for (std::size_t i = 0; i < n; ++i) {
    u -= 1.0 / static_cast<double>(i + 1);
    if (u < 0.0) return i;
  }
  return n - 1;
}

inline double unit_draw(Rng& rng) { return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0); }

}  // namespace detail

inline TextDataset make_keyword_fixture(const FixtureSpec& spec) {
  const auto keywords = detail::class_keywords(spec.num_classes);
  const auto& filler = detail::filler_words();
  Rng rng = make_rng(spec.seed, "fixture-" + std::to_string(spec.num_classes));
  TextDataset ds;
  ds.provenance = "synthetic keyword fixture classes=" + std::to_string(spec.num_classes) +
                  " size=" + std::to_string(spec.size) + " seed=" + std::to_string(spec.seed);
  if (spec.num_classes == 2) {
    ds.class_names = {"positive", "negative"};
  } else {
    ds.class_names = {"location", "person", "numeric", "description", "entity", "abbreviation"};
  }
  const std::size_t C = spec.num_classes;
  for (std::size_t i = 0; i < spec.size; ++i) {
    const ClassId label = i % C;  // balanced
    std::vector<std::string> words;
    const std::size_t n_filler = spec.min_filler + uniform_index(rng, spec.max_filler - spec.min_filler + 1);
    for (std::size_t w = 0; w < n_filler; ++w) words.push_back(filler[uniform_index(rng, filler.size())]);
    const bool distract = detail::unit_draw(rng) < spec.distractor_rate;
    const std::size_t n_true = distract ? 2 : 1 + uniform_index(rng, 2);
    auto insert = [&](const std::string& kw) {
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(uniform_index(rng, words.size() + 1)), kw);
    };
    for (std::size_t k = 0; k < n_true; ++k) insert(keywords[label][detail::zipf_index(rng, keywords[label].size())]);
    if (distract) {
      const ClassId other = (label + 1 + uniform_index(rng, C - 1)) % C;
      insert(keywords[other][detail::zipf_index(rng, keywords[other].size())]);
    }
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    ClassId observed = label;
    if (detail::unit_draw(rng) < spec.label_noise) observed = (label + 1 + uniform_index(rng, C - 1)) % C;
    ds.records.push_back({std::move(text), std::nullopt, observed});
  }
  return ds;
}

/// The two shipped corpora: 2-class sentiment style and 6-class question style.
inline std::vector<std::pair<std::string, TextDataset>> shipped_fixtures() {
  FixtureSpec two;
  two.num_classes = 2;
  FixtureSpec six;
  six.num_classes = 6;
  return {{"fixture_2class.csv", make_keyword_fixture(two)}, {"fixture_6class.csv", make_keyword_fixture(six)}};
}

}  // namespace tripledml

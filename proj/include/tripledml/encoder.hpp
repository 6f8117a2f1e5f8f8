#pragma once

// Small trainable text encoder: whitespace/punctuation tokenizer, embedding
// table, residual per-token feed-forward transform, pooled softmax head.
// `encode` exposes both the per-token embeddings and the pooled prediction.

#include <cctype>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tripledml/diffcore.hpp"
#include "tripledml/errors.hpp"
#include "tripledml/losses.hpp"
#include "tripledml/rng.hpp"

namespace tripledml {

using TokenId = std::size_t;

inline constexpr std::size_t kMaxSequenceLength = 512;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kEos = 4;
  static constexpr std::size_t kNumSpecial = 5;

  Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]"} { reindex(); }

  /// Adds every token of `texts` in first-seen order.
  template <typename Range>
  static Vocabulary build(const Range& texts);

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    const std::vector<std::string> specials = v.tokens_;
    if (tokens.size() < kNumSpecial || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
      throw DataError("vocabulary must start with the special tokens [PAD] [UNK] [CLS] [SEP] [EOS]");
    }
    v.tokens_ = std::move(tokens);
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw DataError("vocabulary contains duplicate tokens");
    return v;
  }

  TokenId add(const std::string& token) {
    auto [it, inserted] = index_.emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// UTF-8, one token per line, specials first.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary to " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary " + path);
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) tokens.push_back(line);
    return from_tokens(std::move(tokens));
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Lowercased words; ASCII punctuation characters become single tokens.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  flush();
  return words;
}

template <typename Range>
Vocabulary Vocabulary::build(const Range& texts) {
  Vocabulary v;
  for (const auto& text : texts)
    for (const auto& w : split_words(text)) v.add(w);
  return v;
}

/// [CLS] a... [EOS] or, for pairs, [CLS] a... [SEP] b... [EOS]; at most
/// `max_len` ids, truncating the text tokens and keeping [EOS].
inline std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab,
                                     std::optional<std::string_view> second = std::nullopt,
                                     std::size_t max_len = kMaxSequenceLength) {
  std::vector<TokenId> ids{Vocabulary::kCls};
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  if (second) {
    ids.push_back(Vocabulary::kSep);
    for (const auto& w : split_words(*second)) ids.push_back(vocab.id(w));
  }
  if (ids.size() + 1 > max_len) ids.resize(max_len - 1);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

/// Padded token-id matrix. `pad_mask[b * seq_len + l]` is true on padding.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> token_ids;
  std::vector<bool> pad_mask;
  std::vector<ClassId> labels;

  bool is_pad(std::size_t b, std::size_t l) const { return pad_mask[b * seq_len + l]; }
};

inline Batch make_batch(const std::vector<std::vector<TokenId>>& sequences, std::vector<ClassId> labels) {
  if (sequences.size() != labels.size()) throw DimensionError("make_batch: sequence/label count mismatch");
  Batch b;
  b.batch_size = sequences.size();
  for (const auto& s : sequences) b.seq_len = std::max(b.seq_len, s.size());
  if (b.seq_len > kMaxSequenceLength) throw ContractError("sequence longer than 512 tokens");
  b.token_ids.assign(b.batch_size * b.seq_len, Vocabulary::kPad);
  b.pad_mask.assign(b.batch_size * b.seq_len, true);
  for (std::size_t i = 0; i < sequences.size(); ++i)
    for (std::size_t l = 0; l < sequences[i].size(); ++l) {
      b.token_ids[i * b.seq_len + l] = sequences[i][l];
      b.pad_mask[i * b.seq_len + l] = false;
    }
  b.labels = std::move(labels);
  return b;
}

enum class Pooling { mean, first_token };

struct EncoderConfig {
  std::size_t dim = 64;
  std::size_t hidden = 64;
  std::size_t num_classes = 2;
  Pooling pooling = Pooling::mean;
};

/// Parameters of the encoder. Token transform: t = x + W2 tanh(W1 x + b1) + b2.
struct EncoderModel {
  EncoderConfig config;
  Tensor embedding;  // [V x d]
  Tensor w1;         // [d x h]
  Tensor b1;         // [h]
  Tensor w2;         // [h x d]
  Tensor b2;         // [d]
  Tensor head_w;     // [d x C]
  Tensor head_b;     // [C]

  static EncoderModel init(std::size_t vocab_size, const EncoderConfig& cfg, Rng& rng) {
    auto normal = [&rng](Shape s, double scale) {
      std::vector<double> v(shape_size(s));
      for (double& x : v) x = normal_draw(rng) * scale;
      return Tensor::from(std::move(s), std::move(v), true);
    };
    const double d = static_cast<double>(cfg.dim), h = static_cast<double>(cfg.hidden);
    EncoderModel m;
    m.config = cfg;
    m.embedding = normal({vocab_size, cfg.dim}, 1.0 / std::sqrt(d));
    m.w1 = normal({cfg.dim, cfg.hidden}, 1.0 / std::sqrt(d));
    m.b1 = Tensor::zeros({cfg.hidden}, true);
    m.w2 = normal({cfg.hidden, cfg.dim}, 1.0 / std::sqrt(h));
    m.b2 = Tensor::zeros({cfg.dim}, true);
    m.head_w = normal({cfg.dim, cfg.num_classes}, 1.0 / std::sqrt(d));
    m.head_b = Tensor::zeros({cfg.num_classes}, true);
    return m;
  }

  std::vector<Tensor> parameters() const { return {embedding, w1, b1, w2, b2, head_w, head_b}; }
  static std::vector<std::string> parameter_names() {
    return {"embedding", "w1", "b1", "w2", "b2", "head_w", "head_b"};
  }

  std::size_t vocab_size() const { return embedding.dim(0); }

  /// Deep copy with fresh leaves.
  EncoderModel clone() const {
    EncoderModel m;
    m.config = config;
    m.embedding = embedding.clone();
    m.w1 = w1.clone();
    m.b1 = b1.clone();
    m.w2 = w2.clone();
    m.b2 = b2.clone();
    m.head_w = head_w.clone();
    m.head_b = head_b.clone();
    return m;
  }
};

struct EncoderOutput {
  Tensor token_embeddings;  // [B x L x d]
  Tensor pooled;            // [B x d]
  Tensor probs;             // [B x C]
};

/// Constant [B x B*L] matrix whose product with the flattened token
/// embeddings gives the pooled sentence vectors.
inline Tensor pooling_matrix(const Batch& batch, Pooling pooling) {
  const std::size_t B = batch.batch_size, L = batch.seq_len;
  std::vector<double> p(B * B * L, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (pooling == Pooling::first_token) {
      if (L > 0 && !batch.is_pad(b, 0)) p[b * B * L + b * L] = 1.0;
      continue;
    }
    std::size_t count = 0;
    for (std::size_t l = 0; l < L; ++l) count += batch.is_pad(b, l) ? 0 : 1;
    if (count == 0) continue;
    const double w = 1.0 / static_cast<double>(count);
    for (std::size_t l = 0; l < L; ++l)
      if (!batch.is_pad(b, l)) p[b * B * L + b * L + l] = w;
  }
  return Tensor::matrix(B, B * L, std::move(p));
}

inline EncoderOutput encode(const Batch& batch, const EncoderModel& model) {
  const std::size_t B = batch.batch_size, L = batch.seq_len, d = model.config.dim;
  const std::size_t V = model.vocab_size();
  for (TokenId id : batch.token_ids)
    if (id >= V) throw ContractError("token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(V));
  std::vector<std::size_t> ids(batch.token_ids.begin(), batch.token_ids.end());
  Tensor x = gather_rows(model.embedding, std::move(ids));  // [B*L x d]
  Tensor hidden = tanh(add(matmul(x, model.w1), model.b1));
  Tensor tokens = add(add(matmul(hidden, model.w2), model.b2), x);
  Tensor pooled = matmul(pooling_matrix(batch, model.config.pooling), tokens);
  Tensor logits = add(matmul(pooled, model.head_w), model.head_b);
  return {reshape(tokens, {B, L, d}), pooled, softmax(logits)};
}

struct TokenViews {
  Tensor embeddings;             // [M x d]
  std::vector<ClassId> labels;   // [M]
};

/// Every non-pad token embedding once, labeled with its sentence's class.
inline TokenViews token_views_for_dml(const Tensor& token_embeddings, const std::vector<bool>& pad_mask,
                                      std::span<const ClassId> labels) {
  if (token_embeddings.rank() != 3) {
    throw DimensionError("token_views_for_dml expects [B x L x d], got " + shape_str(token_embeddings.shape()));
  }
  const std::size_t B = token_embeddings.dim(0), L = token_embeddings.dim(1), d = token_embeddings.dim(2);
  if (pad_mask.size() != B * L || labels.size() != B) throw DimensionError("token_views_for_dml: shape mismatch");
  std::vector<std::size_t> keep;
  TokenViews views;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      if (!pad_mask[b * L + l]) {
        keep.push_back(b * L + l);
        views.labels.push_back(labels[b]);
      }
  views.embeddings = gather_rows(reshape(token_embeddings, {B * L, d}), std::move(keep));
  return views;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Text container:
//   tripledml-checkpoint 1
//   meta <key> <value>            (any number)
//   param <name> <rank> <dims...>
//   <values, shortest round-trip decimal, space separated>
//   end

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor& param(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw DataError("checkpoint has no parameter '" + name + "'");
  }

  bool has_param(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return true;
    return false;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out << "tripledml-checkpoint " << kCheckpointVersion << '\n';
    for (const auto& [k, v] : meta) out << "meta " << k << ' ' << v << '\n';
    char buf[64];
    for (const auto& [name, t] : params) {
      out << "param " << name << ' ' << t.rank();
      for (std::size_t d : t.shape()) out << ' ' << d;
      out << '\n';
      auto vals = t.data();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        auto res = std::to_chars(buf, buf + sizeof buf, vals[i]);
        if (i) out << ' ';
        out.write(buf, res.ptr - buf);
      }
      out << '\n';
    }
    out << "end\n";
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint " + path);
    std::string line;
    std::size_t lineno = 1;
    auto fail = [&](const std::string& why) {
      return DataError(path + ":" + std::to_string(lineno) + ": " + why);
    };
    if (!std::getline(in, line)) throw fail("empty checkpoint");
    {
      std::istringstream hs(line);
      std::string magic;
      int version = 0;
      if (!(hs >> magic >> version) || magic != "tripledml-checkpoint") throw fail("not a tripledml checkpoint");
      if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    bool ended = false;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string tag;
      ls >> tag;
      if (tag == "end") {
        ended = true;
        break;
      }
      if (tag == "meta") {
        std::string key, value;
        ls >> key;
        std::getline(ls >> std::ws, value);
        ck.meta[key] = value;
      } else if (tag == "param") {
        std::string name;
        std::size_t rank = 0;
        if (!(ls >> name >> rank)) throw fail("malformed param header");
        Shape shape(rank);
        for (auto& d : shape)
          if (!(ls >> d)) throw fail("malformed param shape");
        std::string values;
        if (!std::getline(in, values)) throw fail("missing values for " + name);
        ++lineno;
        std::vector<double> data;
        data.reserve(shape_size(shape));
        const char* p = values.data();
        const char* e = p + values.size();
        while (p < e) {
          while (p < e && *p == ' ') ++p;
          if (p == e) break;
          double v = 0.0;
          auto res = std::from_chars(p, e, v);
          if (res.ec != std::errc{}) throw fail("bad number in " + name);
          data.push_back(v);
          p = res.ptr;
        }
        if (data.size() != shape_size(shape)) throw fail("value count mismatch for " + name);
        ck.params.emplace_back(name, Tensor::from(std::move(shape), std::move(data), true));
      } else if (!tag.empty()) {
        throw fail("unknown record '" + tag + "'");
      }
    }
    if (!ended) throw fail("truncated checkpoint");
    return ck;
  }
};

inline Checkpoint to_checkpoint(const EncoderModel& model) {
  Checkpoint ck;
  ck.meta["dim"] = std::to_string(model.config.dim);
  ck.meta["hidden"] = std::to_string(model.config.hidden);
  ck.meta["classes"] = std::to_string(model.config.num_classes);
  ck.meta["pooling"] = model.config.pooling == Pooling::mean ? "mean" : "first";
  auto names = EncoderModel::parameter_names();
  auto params = model.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) ck.params.emplace_back(names[i], params[i]);
  return ck;
}

inline EncoderModel encoder_from_checkpoint(const Checkpoint& ck) {
  auto meta = [&](const char* key) -> const std::string& {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw DataError(std::string("checkpoint missing meta '") + key + "'");
    return it->second;
  };
  EncoderModel m;
  m.config.dim = std::stoul(meta("dim"));
  m.config.hidden = std::stoul(meta("hidden"));
  m.config.num_classes = std::stoul(meta("classes"));
  m.config.pooling = meta("pooling") == "first" ? Pooling::first_token : Pooling::mean;
  m.embedding = ck.param("embedding");
  m.w1 = ck.param("w1");
  m.b1 = ck.param("b1");
  m.w2 = ck.param("w2");
  m.b2 = ck.param("b2");
  m.head_w = ck.param("head_w");
  m.head_b = ck.param("head_b");
  const std::size_t d = m.config.dim, h = m.config.hidden, c = m.config.num_classes;
  if (m.embedding.rank() != 2 || m.embedding.dim(1) != d || m.w1.shape() != Shape{d, h} ||
      m.b1.shape() != Shape{h} || m.w2.shape() != Shape{h, d} || m.b2.shape() != Shape{d} ||
      m.head_w.shape() != Shape{d, c} || m.head_b.shape() != Shape{c}) {
    throw DataError("checkpoint parameter shapes do not match its metadata");
  }
  return m;
}

}  // namespace tripledml

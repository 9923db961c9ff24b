#pragma once

// Zero-shot scoring from contrastive embeddings and prompt texts.

#include <cmath>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vila/checkpoint.hpp"
#include "vila/error.hpp"
#include "vila/model.hpp"
#include "vila/prompt_bank.hpp"

namespace vila {

using Embedding = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct PromptPairEmbedding {
  Embedding good;
  Embedding bad;
  std::string good_text;
  std::string bad_text;
};

struct StyleEmbeddings {
  std::string name;
  Embedding single;
  std::vector<Embedding> ensemble;
};

/// Logistic function with sigma(d) + sigma(-d) == 1 exactly in floating point.
inline double symmetric_sigmoid(double d) {
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  return 1.0 - 1.0 / (1.0 + std::exp(d));
}

/// Softmax weight of the "good" prompt: e^{v·p_g} / (e^{v·p_g} + e^{v·p_b}).
inline double zsl_iaa_single(std::span<const double> v, const PromptPairEmbedding& pair) {
  return symmetric_sigmoid(dot(v, pair.good) - dot(v, pair.bad));
}

inline double zsl_iaa_ensemble(std::span<const double> v, std::span<const PromptPairEmbedding> pairs) {
  if (pairs.empty()) throw InvalidArgument("zsl_iaa_ensemble: no prompt pairs");
  double total = 0.0;
  for (const auto& p : pairs) total += zsl_iaa_single(v, p);
  return total / static_cast<double>(pairs.size());
}

enum class StyleMode { single, ensemble };

/// Raw cosine per style (no softmax across styles), in bank order.
inline std::vector<std::pair<std::string, double>> zsl_style_scores(std::span<const double> v,
                                                                    std::span<const StyleEmbeddings> styles,
                                                                    StyleMode mode) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& s : styles) {
    double score;
    if (mode == StyleMode::single) {
      score = dot(v, s.single);
    } else {
      if (s.ensemble.empty()) throw InvalidArgument("zsl_style_scores: style '" + s.name + "' has no prompts");
      double total = 0.0;
      for (const auto& p : s.ensemble) total += dot(v, p);
      score = total / static_cast<double>(s.ensemble.size());
    }
    out.emplace_back(s.name, score);
  }
  return out;
}

inline double style_score(std::span<const double> v, std::span<const StyleEmbeddings> styles,
                          const std::string& name, StyleMode mode) {
  for (const auto& s : styles) {
    if (s.name == name) return zsl_style_scores(v, std::span<const StyleEmbeddings>(&s, 1), mode)[0].second;
  }
  throw InvalidArgument("zsl_style_scores: unknown style '" + name + "'");
}

/// Unit-norm contrastive text embeddings for raw prompt texts (untruncated unless
/// longer than the model's max text length).
template <typename T>
std::vector<Embedding> embed_texts(const CocaModel<T>& model, const Vocabulary& vocab,
                                   const std::vector<std::string>& texts) {
  ad::NoGradGuard guard;
  std::vector<Embedding> out;
  for (const auto& text : texts) {
    auto ids = encode(text, vocab, EncodeMode::contrastive, model.config().max_text_length);
    auto y = ad::l2_normalize(model.text_embedding_raw(TokenBatch::from({ids})));
    out.emplace_back(y.data().begin(), y.data().end());
  }
  return out;
}

/// Prompt text → unit embedding, tagged with the hash of the checkpoint it came from.
struct PromptCache {
  std::string source_hash;
  std::map<std::string, Embedding> embeddings;

  static constexpr const char* kSourceTag = "__source_checkpoint__:";

  const Embedding& at(const std::string& text) const {
    auto it = embeddings.find(text);
    if (it == embeddings.end()) throw InvalidArgument("prompt cache: no embedding for '" + text + "'");
    return it->second;
  }

  ckpt::Records to_records() const {
    ckpt::Records out;
    out.push_back(ckpt::make_record<double>(kSourceTag + source_hash, {1}, {0.0}));
    for (const auto& [text, e] : embeddings) out.push_back(ckpt::make_record(text, {e.size()}, e));
    return out;
  }

  static PromptCache from_records(const ckpt::Records& records) {
    PromptCache cache;
    const std::string tag = kSourceTag;
    for (const auto& r : records) {
      if (r.name.rfind(tag, 0) == 0) {
        cache.source_hash = r.name.substr(tag.size());
      } else {
        cache.embeddings[r.name] = r.as<double>();
      }
    }
    return cache;
  }

  void save(const std::filesystem::path& path) const { ckpt::save(to_records(), path); }
  static PromptCache load(const std::filesystem::path& path) { return from_records(ckpt::load(path)); }
};

template <typename T>
PromptCache build_prompt_cache(const CocaModel<T>& model, const Vocabulary& vocab, const PromptBank& bank,
                               std::string source_hash) {
  PromptCache cache;
  cache.source_hash = std::move(source_hash);
  const auto texts = bank.all_texts();
  const auto embs = embed_texts(model, vocab, texts);
  for (std::size_t i = 0; i < texts.size(); ++i) cache.embeddings[texts[i]] = embs[i];
  return cache;
}

inline std::vector<PromptPairEmbedding> iaa_pairs(const PromptCache& cache, const PromptBank& bank) {
  std::vector<PromptPairEmbedding> out;
  for (const auto& p : bank.iaa_pairs) out.push_back({cache.at(p.good), cache.at(p.bad), p.good, p.bad});
  return out;
}

inline PromptPairEmbedding single_pair(const PromptCache& cache, const PromptBank& bank) {
  const auto& p = bank.single_pair;
  return {cache.at(p.good), cache.at(p.bad), p.good, p.bad};
}

inline std::vector<StyleEmbeddings> style_embeddings(const PromptCache& cache, const PromptBank& bank) {
  std::vector<StyleEmbeddings> out;
  for (const auto& s : bank.styles) {
    StyleEmbeddings e{s.name, cache.at(s.single), {}};
    for (const auto& t : s.ensemble) e.ensemble.push_back(cache.at(t));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace vila

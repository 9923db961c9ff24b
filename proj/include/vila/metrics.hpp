#pragma once

// Evaluation metrics: rank/linear correlation, average precision, and
// caption overlap scores (BLEU, ROUGE-L, CIDEr).

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vila/error.hpp"
#include "vila/tokenizer.hpp"

namespace vila::metrics {

namespace detail {

inline void check_pairs(std::span<const double> pred, std::span<const double> label, const char* what) {
  if (pred.size() != label.size()) throw InvalidArgument(std::string(what) + ": length mismatch");
  if (pred.size() < 2) throw InvalidArgument(std::string(what) + ": need at least two samples");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!std::isfinite(pred[i]) || !std::isfinite(label[i])) {
      throw InvalidArgument(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

inline double pearson(std::span<const double> a, std::span<const double> b, const char* what) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateError(std::string(what) + ": constant input, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace detail

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank-order correlation (Pearson of average-tie ranks).
inline double srcc(std::span<const double> pred, std::span<const double> label) {
  detail::check_pairs(pred, label, "srcc");
  const auto rp = average_ranks(pred);
  const auto rl = average_ranks(label);
  return detail::pearson(rp, rl, "srcc");
}

/// Pearson linear correlation.
inline double plcc(std::span<const double> pred, std::span<const double> label) {
  detail::check_pairs(pred, label, "plcc");
  return detail::pearson(pred, label, "plcc");
}

/// AP over one class: mean, over positives in descending score order (ties in
/// input order), of the precision at that positive.
inline double average_precision(std::span<const double> scores, std::span<const int> positives) {
  if (scores.size() != positives.size()) throw InvalidArgument("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, total = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (positives[order[r]]) {
      hits += 1.0;
      total += hits / static_cast<double>(r + 1);
    }
  }
  if (hits == 0.0) throw InvalidArgument("average_precision: class has no positives");
  return total / hits;
}

struct ClassScores {
  std::string name;
  std::vector<double> scores;
  std::vector<int> positives;
};

struct MapResult {
  double mean = 0.0;
  std::vector<std::pair<std::string, double>> per_class;
};

inline MapResult mean_average_precision(std::span<const ClassScores> classes) {
  if (classes.empty()) throw InvalidArgument("mean_average_precision: no classes");
  MapResult out;
  for (const auto& c : classes) {
    const std::size_t positives = static_cast<std::size_t>(std::count_if(c.positives.begin(), c.positives.end(), [](int v) { return v != 0; }));
    if (positives == 0) throw InvalidArgument("mean_average_precision: class '" + c.name + "' has zero positives");
    const double ap = average_precision(c.scores, c.positives);
    out.per_class.emplace_back(c.name, ap);
    out.mean += ap;
  }
  out.mean /= static_cast<double>(classes.size());
  return out;
}

// ---- caption metrics --------------------------------------------------------

using Words = std::vector<std::string>;
using NgramCounts = std::map<Words, std::size_t>;

inline NgramCounts ngrams(const Words& words, std::size_t n) {
  NgramCounts counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++counts[Words(words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

/// Sentence BLEU-n: geometric mean of clipped k-gram precisions (k ≤ n) times the
/// brevity penalty against the closest reference length (shorter wins ties).
/// An empty candidate scores 0 and logs a warning.
inline double bleu(const std::string& candidate, std::span<const std::string> references, std::size_t n) {
  if (n < 1 || n > 4) throw InvalidArgument("bleu: n must be in 1..4");
  if (references.empty()) throw InvalidArgument("bleu: no references");
  const Words cand = split_words(candidate);
  if (cand.empty()) {
    std::clog << "warning: bleu: empty candidate scores 0\n";
    return 0.0;
  }
  std::vector<Words> refs;
  for (const auto& r : references) refs.push_back(split_words(r));
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const auto cc = ngrams(cand, k);
    std::size_t total = 0, clipped = 0;
    for (const auto& [g, c] : cc) {
      std::size_t max_ref = 0;
      for (const auto& r : refs) {
        const auto rc = ngrams(r, k);
        auto it = rc.find(g);
        if (it != rc.end()) max_ref = std::max(max_ref, it->second);
      }
      total += c;
      clipped += std::min(c, max_ref);
    }
    if (total == 0 || clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double c = static_cast<double>(cand.size());
  double best = -1.0;
  for (const auto& r : refs) {
    const double len = static_cast<double>(r.size());
    if (best < 0.0 || std::abs(len - c) < std::abs(best - c) || (std::abs(len - c) == std::abs(best - c) && len < best)) {
      best = len;
    }
  }
  const double bp = c > best ? 1.0 : std::exp(1.0 - best / c);
  return bp * std::exp(log_sum / static_cast<double>(n));
}

inline std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// ROUGE-L: best LCS F-measure (harmonic mean of precision and recall) over references.
inline double rouge_l(const std::string& candidate, std::span<const std::string> references) {
  if (references.empty()) throw InvalidArgument("rouge_l: no references");
  const Words cand = split_words(candidate);
  if (cand.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : references) {
    const Words ref = split_words(r);
    if (ref.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(cand, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(cand.size());
    const double rc = lcs / static_cast<double>(ref.size());
    best = std::max(best, 2.0 * p * rc / (p + rc));
  }
  return best;
}

struct CaptionItem {
  std::string candidate;
  std::vector<std::string> references;
};

struct CiderResult {
  double score = 0.0;
  std::vector<double> per_image;
  // Set for single-image corpora, where every IDF weight is zero.
  bool degenerate = false;
};

/// CIDEr: TF-IDF n-gram cosine (n = 1..4) with document frequencies over the
/// reference sets of the whole corpus, averaged over references and n, ×10.
inline CiderResult cider(std::span<const CaptionItem> items) {
  if (items.empty()) throw InvalidArgument("cider: empty corpus");
  constexpr std::size_t kMaxN = 4;
  const double log_images = std::log(static_cast<double>(items.size()));
  std::array<NgramCounts, kMaxN> df;
  std::vector<std::vector<Words>> refs(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].references.empty()) throw InvalidArgument("cider: image " + std::to_string(i) + " has no references");
    for (const auto& r : items[i].references) refs[i].push_back(split_words(r));
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      std::map<Words, bool> seen;
      for (const auto& r : refs[i])
        for (const auto& [g, c] : ngrams(r, n)) seen[g] = true;
      for (const auto& [g, unused] : seen) ++df[n - 1][g];
    }
  }
  auto weights = [&](const Words& w, std::size_t n) {
    std::map<Words, double> vec;
    for (const auto& [g, c] : ngrams(w, n)) {
      auto it = df[n - 1].find(g);
      const double d = it == df[n - 1].end() ? 1.0 : static_cast<double>(it->second);
      vec[g] = static_cast<double>(c) * (log_images - std::log(std::max(1.0, d)));
    }
    return vec;
  };
  auto cosine = [](const std::map<Words, double>& a, const std::map<Words, double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, v] : a) {
      na += v * v;
      auto it = b.find(g);
      if (it != b.end()) dot += v * it->second;
    }
    for (const auto& [g, v] : b) nb += v * v;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };
  CiderResult out;
  out.degenerate = items.size() == 1;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Words cand = split_words(items[i].candidate);
    double total = 0.0;
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      const auto cv = weights(cand, n);
      double sum = 0.0;
      for (const auto& r : refs[i]) sum += cosine(cv, weights(r, n));
      total += sum / static_cast<double>(refs[i].size());
    }
    const double s = 10.0 * total / static_cast<double>(kMaxN);
    out.per_image.push_back(s);
    out.score += s;
  }
  out.score /= static_cast<double>(items.size());
  return out;
}

}  // namespace vila::metrics

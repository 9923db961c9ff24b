#pragma once

// Brute-force reference implementations of the evaluation metrics, written
// without sorting or dynamic programming so they share no logic with the library.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "support.hpp"
#include "vila/metrics.hpp"

namespace vila::test {

using metrics::CaptionItem;

inline std::vector<double> counting_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) below += 1;
      if (j != i && x[j] == x[i]) equal += 1;
    }
    r[i] = 1 + below + equal / 2;
  }
  return r;
}

inline double raw_moment_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  long double n = a.size(), sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    sab += static_cast<long double>(a[i]) * b[i];
    saa += static_cast<long double>(a[i]) * a[i];
    sbb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>((n * sab - sa * sb) / std::sqrt((n * saa - sa * sa) * (n * sbb - sb * sb)));
}

inline double position_ap(const std::vector<double>& s, const std::vector<int>& pos) {
  auto position = [&](std::size_t i) {
    std::size_t p = 1;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++p;
    return p;
  };
  double total = 0, count = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    double hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[j] && position(j) <= position(i)) hits += 1;
    total += hits / static_cast<double>(position(i));
    count += 1;
  }
  return total / count;
}

inline std::vector<std::string> words_of(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + " ") {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

inline std::vector<std::string> grams_of(const std::vector<std::string>& w, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) {
    std::string g;
    for (std::size_t k = 0; k < n; ++k) g += w[i + k] + "|";
    out.push_back(g);
  }
  return out;
}

inline std::size_t occurrences(const std::vector<std::string>& v, const std::string& g) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), g));
}

inline double oracle_bleu(const std::string& cand, const std::vector<std::string>& refs, std::size_t n) {
  const auto c = words_of(cand);
  if (c.empty()) return 0;
  double product = 1;
  for (std::size_t k = 1; k <= n; ++k) {
    const auto cg = grams_of(c, k);
    if (cg.empty()) return 0;
    std::set<std::string> distinct(cg.begin(), cg.end());
    double clipped = 0;
    for (const auto& g : distinct) {
      std::size_t max_ref = 0;
      for (const auto& r : refs) max_ref = std::max(max_ref, occurrences(grams_of(words_of(r), k), g));
      clipped += static_cast<double>(std::min(occurrences(cg, g), max_ref));
    }
    if (clipped == 0) return 0;
    product *= clipped / static_cast<double>(cg.size());
  }
  // Closest reference length, shorter on ties.
  double best_len = 1e300, best_gap = 1e300;
  for (const auto& r : refs) {
    const double len = static_cast<double>(words_of(r).size());
    const double gap = std::abs(len - static_cast<double>(c.size()));
    if (gap < best_gap || (gap == best_gap && len < best_len)) {
      best_gap = gap;
      best_len = len;
    }
  }
  const double bp = std::min(1.0, std::exp(1.0 - best_len / static_cast<double>(c.size())));
  return bp * std::pow(product, 1.0 / static_cast<double>(n));
}

// LCS by enumerating every subsequence of the (short) candidate.
inline std::size_t subset_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::size_t best = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << a.size()); ++mask) {
    std::size_t j = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!(mask >> i & 1)) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else ++j, ++len;
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

inline double oracle_rouge(const std::string& cand, const std::vector<std::string>& refs) {
  const auto c = words_of(cand);
  double best = 0;
  for (const auto& r : refs) {
    const auto w = words_of(r);
    const double l = static_cast<double>(subset_lcs(c, w));
    if (l == 0) continue;
    const double p = l / static_cast<double>(c.size()), rc = l / static_cast<double>(w.size());
    best = std::max(best, 2 * p * rc / (p + rc));
  }
  return best;
}

inline double oracle_cider(const std::vector<CaptionItem>& items) {
  const double n_images = static_cast<double>(items.size());
  double corpus = 0;
  for (const auto& item : items) {
    double per_n_total = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      auto vec = [&](const std::string& text) {
        std::map<std::string, double> v;
        const auto g = grams_of(words_of(text), n);
        for (const auto& x : g) {
          double df = 0;
          for (const auto& other : items) {
            bool found = false;
            for (const auto& r : other.references) found = found || occurrences(grams_of(words_of(r), n), x) > 0;
            if (found) df += 1;
          }
          v[x] = static_cast<double>(occurrences(g, x)) * std::log(n_images / std::max(1.0, df));
        }
        return v;
      };
      const auto cv = vec(item.candidate);
      double sum = 0;
      for (const auto& r : item.references) {
        const auto rv = vec(r);
        double dot = 0, na = 0, nb = 0;
        for (const auto& [k, x] : cv) {
          na += x * x;
          if (rv.count(k)) dot += x * rv.at(k);
        }
        for (const auto& [k, x] : rv) nb += x * x;
        sum += (na > 0 && nb > 0) ? dot / std::sqrt(na * nb) : 0.0;
      }
      per_n_total += sum / static_cast<double>(item.references.size());
    }
    corpus += 10 * per_n_total / 4;
  }
  return corpus / n_images;
}

inline std::string random_sentence(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  static const char* words[] = {"the", "cat", "sat", "on", "mat", "a", "dog"};
  std::string s;
  const std::size_t n = random_size(rng, lo, hi);
  for (std::size_t i = 0; i < n; ++i) s += std::string(i ? " " : "") + words[random_size(rng, 0, 6)];
  return s;
}

inline std::vector<double> random_ints(std::size_t n, std::mt19937_64& rng, int hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = static_cast<double>(random_size(rng, 0, static_cast<std::size_t>(hi)));
  return v;
}

inline bool constant(const std::vector<double>& v) { return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; }); }

}  // namespace vila::test

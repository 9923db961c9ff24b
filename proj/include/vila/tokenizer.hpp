#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vila/error.hpp"
#include "vila/io.hpp"

namespace vila {

using TokenId = std::int32_t;

namespace tokens {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kCls = 4;
inline constexpr std::size_t kReserved = 5;
inline constexpr std::array<std::string_view, kReserved> kReservedText = {"<pad>", "<bos>", "<eos>",
                                                                          "<unk>", "<cls>"};
}  // namespace tokens

/// Lowercased word tokens; any byte that is not ASCII alphanumeric and below 0x80 splits words.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (auto t : tokens::kReservedText) push(std::string(t));
  }

  /// Frequency-ordered word vocabulary; ties break lexicographically.
  /// `max_size` counts the reserved tokens.
  static Vocabulary build(std::span<const std::string> corpus, std::size_t max_size) {
    if (corpus.empty()) throw InvalidArgument("build_vocab: empty corpus");
    if (max_size <= tokens::kReserved) {
      throw InvalidArgument("build_vocab: max_size must exceed the " +
                            std::to_string(tokens::kReserved) + " reserved tokens");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus)
      for (auto& w : split_words(text)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary vocab;
    for (const auto& [word, n] : ranked) {
      if (vocab.size() >= max_size) break;
      vocab.push(word);
    }
    return vocab;
  }

  static Vocabulary from_lines(std::string_view text) {
    Vocabulary vocab;
    vocab.tokens_.clear();
    vocab.index_.clear();
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (lineno <= tokens::kReserved) {
        if (line != tokens::kReservedText[lineno - 1]) {
          throw FormatError("vocabulary line " + std::to_string(lineno) + ": expected reserved token " +
                            std::string(tokens::kReservedText[lineno - 1]));
        }
      } else if (line.empty() || vocab.index_.count(line)) {
        throw FormatError("vocabulary line " + std::to_string(lineno) + ": empty or duplicate token");
      }
      vocab.push(line);
    }
    if (vocab.size() < tokens::kReserved) throw FormatError("vocabulary: missing reserved block");
    return vocab;
  }

  static Vocabulary load(const std::filesystem::path& path) { return from_lines(io::read_file(path)); }

  std::string to_lines() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
  }

  void save(const std::filesystem::path& path) const { io::atomic_write(path, to_lines()); }

  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? tokens::kUnk : it->second;
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InvalidArgument("vocabulary: unknown id " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void push(std::string word) {
    index_.emplace(word, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(word));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class EncodeMode { generative, contrastive };

/// Generative: BOS w... EOS. Contrastive: w... CLS. Truncation keeps the
/// word prefix and always preserves the terminal EOS/CLS.
inline std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab, EncodeMode mode,
                                   std::size_t max_length) {
  const std::size_t overhead = mode == EncodeMode::generative ? 2 : 1;
  if (max_length < overhead) throw InvalidArgument("encode: max_length too small for terminal tokens");
  auto words = split_words(text);
  const std::size_t keep = std::min(words.size(), max_length - overhead);
  std::vector<TokenId> ids;
  ids.reserve(keep + overhead);
  if (mode == EncodeMode::generative) ids.push_back(tokens::kBos);
  for (std::size_t i = 0; i < keep; ++i) ids.push_back(vocab.id(words[i]));
  ids.push_back(mode == EncodeMode::generative ? tokens::kEos : tokens::kCls);
  return ids;
}

/// Space-joined words; reserved tokens other than UNK are dropped, UNK renders as "<unk>".
inline std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& word = vocab.token(id);
    if (id < static_cast<TokenId>(tokens::kReserved) && id != tokens::kUnk) continue;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

}  // namespace vila

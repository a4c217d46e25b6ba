#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dapa/error.hpp"

namespace dapa {

using TokenId = int;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstRegular = 4;

inline bool is_reserved(TokenId id) { return id >= 0 && id < kFirstRegular; }

inline constexpr std::size_t kSourceLenCap = 512;
inline constexpr std::size_t kSummaryLenCap = 200;

struct TokenizedDoc {
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenizedDoc&) const = default;
};

inline TokenizedDoc truncated(TokenizedDoc doc, std::size_t cap) {
  if (doc.ids.size() > cap) doc.ids.resize(cap);
  return doc;
}

/// Splits raw text into token strings. Implementations must be
/// deterministic; the vocabulary maps their output to ids.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::string> split(std::string_view text) const = 0;
};

/// Lowercases, splits on whitespace, and emits each ASCII punctuation
/// character as its own token.
class WordTokenizer final : public Tokenizer {
 public:
  std::vector<std::string> split(std::string_view text) const override {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isspace(c)) {
        flush();
      } else if (std::ispunct(c)) {
        flush();
        out.emplace_back(1, ch);
      } else {
        cur.push_back(static_cast<char>(std::tolower(c)));
      }
    }
    flush();
    return out;
  }
};

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} { reindex(); }

  /// Regular tokens in id order starting at id 4. Duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> regular) : Vocabulary() {
    for (auto& t : regular) {
      if (index_.contains(t)) throw DataError("vocabulary: duplicate token '" + t + "'");
      index_.emplace(t, static_cast<TokenId>(tokens_.size()));
      tokens_.push_back(std::move(t));
    }
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId encode(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.contains(token); }

  const std::string& lookup(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("vocabulary: unknown id " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::span<const std::string> regular_tokens() const {
    return std::span<const std::string>(tokens_).subspan(kFirstRegular);
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

  /// One token per line; line number (0-based) is id - 4.
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write vocabulary file " + path);
    for (const auto& t : regular_tokens()) f << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read vocabulary file " + path);
    std::vector<std::string> regular;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      regular.push_back(line);
    }
    return Vocabulary(std::move(regular));
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline const Tokenizer& default_tokenizer() {
  static const WordTokenizer tok;
  return tok;
}

inline TokenizedDoc tokenize(std::string_view text, const Vocabulary& vocab, std::size_t cap = kSourceLenCap,
                             const Tokenizer& tokenizer = default_tokenizer()) {
  TokenizedDoc doc;
  for (const auto& t : tokenizer.split(text)) {
    if (doc.ids.size() == cap) break;
    doc.ids.push_back(vocab.encode(t));
  }
  return doc;
}

/// Keeps the `max_size - 4` most frequent tokens; equal counts are ordered
/// lexicographically.
inline Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t max_size,
                              const Tokenizer& tokenizer = default_tokenizer()) {
  if (max_size < 5) throw ConfigError("build_vocab: max_size must be at least 5");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus)
    for (auto& t : tokenizer.split(text)) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> keep;
  const std::size_t room = max_size - kFirstRegular;
  for (std::size_t i = 0; i < ranked.size() && keep.size() < room; ++i) {
    if (ranked[i].first == "<pad>" || ranked[i].first == "<bos>" || ranked[i].first == "<eos>" ||
        ranked[i].first == "<unk>")
      continue;
    keep.push_back(ranked[i].first);
  }
  return Vocabulary(std::move(keep));
}

/// The `c` most frequent non-reserved ids (count descending, id ascending),
/// cycled when fewer than `c` distinct ids exist.
inline std::vector<TokenId> top_c_tokens(std::span<const TokenizedDoc> docs, std::size_t c) {
  if (c == 0) throw ConfigError("top_c_tokens: c must be at least 1");
  std::map<TokenId, std::size_t> counts;
  for (const auto& d : docs)
    for (TokenId id : d.ids)
      if (!is_reserved(id)) ++counts[id];
  if (counts.empty()) throw DegenerateInputError("top_c_tokens: no regular tokens in the given documents");
  std::vector<std::pair<TokenId, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<TokenId> out;
  out.reserve(c);
  for (std::size_t i = 0; out.size() < c; ++i) out.push_back(ranked[i % ranked.size()].first);
  return out;
}

inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& t = vocab.lookup(id);
    if (is_reserved(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

inline std::string detokenize(const TokenizedDoc& doc, const Vocabulary& vocab) { return detokenize(doc.ids, vocab); }

}  // namespace dapa

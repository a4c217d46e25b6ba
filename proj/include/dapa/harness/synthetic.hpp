#pragma once

// Synthetic summarization domains. Every domain draws documents from a
// shared filler pool plus its own slice of content words, and derives the
// summary with one of four rules; each summary starts with a style marker
// unique to the domain.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapa/error.hpp"
#include "dapa/rng.hpp"
#include "dapa/textproc.hpp"
#include "dapa/training.hpp"

namespace dapa::harness {

enum class Rule { LeadK, TailK, RepeatedKeyword, MarkerTemplate };

inline std::string to_string(Rule r) {
  switch (r) {
    case Rule::LeadK: return "lead-k";
    case Rule::TailK: return "tail-k";
    case Rule::RepeatedKeyword: return "repeated-keyword";
    case Rule::MarkerTemplate: return "marker-template";
  }
  return "?";
}

inline Rule rule_from_string(const std::string& s) {
  for (Rule r : {Rule::LeadK, Rule::TailK, Rule::RepeatedKeyword, Rule::MarkerTemplate})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown summary rule '" + s + "'");
}

// ---------------------------------------------------------------------------
// Lexicon: fixed word inventory shared by every domain.

struct Lexicon {
  static constexpr std::size_t kFiller = 40;
  static constexpr std::size_t kSlices = 6;
  static constexpr std::size_t kSliceSize = 20;
  static constexpr std::size_t kMarkers = 16;
  static constexpr std::size_t kTemplates = 16;

  static std::string numbered(const char* stem, std::size_t i) {
    std::string s = std::to_string(i);
    if (s.size() < 2) s = "0" + s;
    return stem + s;
  }

  static std::string filler(std::size_t i) { return numbered("f", i); }
  static std::string content(std::size_t slice, std::size_t i) {
    return "s" + std::to_string(slice) + numbered("w", i);
  }
  static std::string marker(std::size_t i) { return numbered("mk", i); }
  static std::string templ(std::size_t i) { return numbered("tp", i); }

  static std::vector<std::string> words() {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < kFiller; ++i) out.push_back(filler(i));
    for (std::size_t s = 0; s < kSlices; ++s)
      for (std::size_t i = 0; i < kSliceSize; ++i) out.push_back(content(s, i));
    for (std::size_t i = 0; i < kMarkers; ++i) out.push_back(marker(i));
    for (std::size_t i = 0; i < kTemplates; ++i) out.push_back(templ(i));
    return out;
  }

  static const Vocabulary& vocabulary() {
    static const Vocabulary vocab(words());
    return vocab;
  }

  static TokenId id(const std::string& word) {
    const TokenId t = vocabulary().encode(word);
    if (t == kUnk) throw ConfigError("word '" + word + "' is not in the synthetic lexicon");
    return t;
  }

  static std::vector<TokenId> filler_ids() {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < kFiller; ++i) out.push_back(id(filler(i)));
    return out;
  }

  static std::vector<TokenId> slice_ids(std::size_t slice) {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < kSliceSize; ++i) out.push_back(id(content(slice, i)));
    return out;
  }

  static std::vector<TokenId> all_content_ids() {
    std::vector<TokenId> out;
    for (std::size_t s = 0; s < kSlices; ++s) {
      auto ids = slice_ids(s);
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }

  static bool is_marker(const std::string& w) { return w.size() == 4 && w.rfind("mk", 0) == 0 && vocabulary().encode(w) != kUnk; }
  static bool is_template(const std::string& w) { return w.size() == 4 && w.rfind("tp", 0) == 0 && vocabulary().encode(w) != kUnk; }
};

// ---------------------------------------------------------------------------
// Domain specs

struct SyntheticDomainSpec {
  std::string domain_id;
  Rule rule = Rule::LeadK;
  std::size_t k = 3;                    // lead/tail length, or number of repeated keywords
  std::string marker;
  std::vector<std::string> templ;       // marker-template only
  std::size_t slice = 0;
  std::size_t doc_len_min = 12;
  std::size_t doc_len_max = 24;
  std::size_t n_train = 500;
  std::size_t n_dev = 50;
  std::size_t n_test = 100;

  bool operator==(const SyntheticDomainSpec&) const = default;

  void validate() const {
    const std::string who = "domain '" + domain_id + "': ";
    if (domain_id.empty()) throw ConfigError("domain spec: empty domain id");
    if (!Lexicon::is_marker(marker)) throw ConfigError(who + "marker '" + marker + "' is not a marker word");
    if (slice >= Lexicon::kSlices) throw ConfigError(who + "vocab slice out of range");
    if (doc_len_min == 0 || doc_len_min > doc_len_max) throw ConfigError(who + "invalid document length range");
    if (doc_len_max > Lexicon::kFiller) throw ConfigError(who + "documents longer than the filler pool");
    if (n_train == 0 || n_dev == 0 || n_test == 0) throw ConfigError(who + "pair counts must be at least 1");
    switch (rule) {
      case Rule::LeadK:
      case Rule::TailK:
        if (k == 0 || k >= doc_len_min) throw ConfigError(who + "k must lie in [1, doc_len_min)");
        if (k > Lexicon::kSliceSize) throw ConfigError(who + "k exceeds the vocab slice");
        break;
      case Rule::RepeatedKeyword:
        if (k == 0 || 2 * k > doc_len_min) throw ConfigError(who + "2k must not exceed doc_len_min");
        if (k > Lexicon::kSliceSize) throw ConfigError(who + "k exceeds the vocab slice");
        break;
      case Rule::MarkerTemplate:
        if (templ.empty()) throw ConfigError(who + "marker-template needs template words");
        for (const auto& t : templ)
          if (!Lexicon::is_template(t)) throw ConfigError(who + "'" + t + "' is not a template word");
        break;
    }
  }
};

inline nlohmann::json to_json(const SyntheticDomainSpec& s) {
  nlohmann::json j{{"domain_id", s.domain_id}, {"rule", to_string(s.rule)}, {"k", s.k},
                   {"marker", s.marker},       {"slice", s.slice},          {"doc_len_min", s.doc_len_min},
                   {"doc_len_max", s.doc_len_max}, {"n_train", s.n_train}, {"n_dev", s.n_dev},
                   {"n_test", s.n_test}};
  if (s.rule == Rule::MarkerTemplate) j["template"] = s.templ;
  return j;
}

inline SyntheticDomainSpec domain_spec_from_json(const nlohmann::json& j) {
  SyntheticDomainSpec s;
  try {
    s.domain_id = j.at("domain_id").get<std::string>();
    s.rule = rule_from_string(j.at("rule").get<std::string>());
    s.k = j.value("k", s.k);
    s.marker = j.at("marker").get<std::string>();
    s.templ = j.value("template", std::vector<std::string>{});
    s.slice = j.value("slice", s.slice);
    s.doc_len_min = j.value("doc_len_min", s.doc_len_min);
    s.doc_len_max = j.value("doc_len_max", s.doc_len_max);
    s.n_train = j.value("n_train", s.n_train);
    s.n_dev = j.value("n_dev", s.n_dev);
    s.n_test = j.value("n_test", s.n_test);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("domain spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Rules

/// Summary body (without marker) of `doc` under `rule`.
inline std::vector<TokenId> apply_rule(Rule rule, std::size_t k, std::span<const TokenId> templ,
                                       std::span<const TokenId> doc) {
  std::vector<TokenId> out;
  switch (rule) {
    case Rule::LeadK:
      out.assign(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(std::min(k, doc.size())));
      break;
    case Rule::TailK:
      out.assign(doc.end() - static_cast<std::ptrdiff_t>(std::min(k, doc.size())), doc.end());
      break;
    case Rule::RepeatedKeyword: {
      std::map<TokenId, std::size_t> counts;
      for (TokenId t : doc) ++counts[t];
      std::set<TokenId> emitted;
      for (TokenId t : doc)
        if (counts[t] >= 2 && emitted.insert(t).second) out.push_back(t);
      break;
    }
    case Rule::MarkerTemplate:
      out.assign(templ.begin(), templ.end());
      break;
  }
  return out;
}

inline std::vector<TokenId> summarize(const SyntheticDomainSpec& spec, std::span<const TokenId> doc) {
  std::vector<TokenId> templ;
  for (const auto& t : spec.templ) templ.push_back(Lexicon::id(t));
  std::vector<TokenId> out{Lexicon::id(spec.marker)};
  const auto body = apply_rule(spec.rule, spec.k, templ, doc);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

namespace detail {

inline std::vector<TokenId> draw_distinct(Rng& rng, std::vector<TokenId> pool, std::size_t n) {
  rng.shuffle(pool);
  pool.resize(n);
  return pool;
}

}  // namespace detail

/// Document layout follows the rule so that the summary carries the
/// domain's content words: lead-k puts them first, tail-k last,
/// repeated-keyword plants each twice at random positions.
inline std::vector<TokenId> sample_document(const SyntheticDomainSpec& spec, Rng& rng) {
  const std::size_t len = spec.doc_len_min + rng.below(spec.doc_len_max - spec.doc_len_min + 1);
  const auto fill_pool = Lexicon::filler_ids();
  const auto slice = Lexicon::slice_ids(spec.slice);
  std::vector<TokenId> doc;
  switch (spec.rule) {
    case Rule::LeadK: {
      doc = detail::draw_distinct(rng, slice, spec.k);
      const auto f = detail::draw_distinct(rng, fill_pool, len - spec.k);
      doc.insert(doc.end(), f.begin(), f.end());
      break;
    }
    case Rule::TailK: {
      doc = detail::draw_distinct(rng, fill_pool, len - spec.k);
      const auto c = detail::draw_distinct(rng, slice, spec.k);
      doc.insert(doc.end(), c.begin(), c.end());
      break;
    }
    case Rule::RepeatedKeyword: {
      const auto c = detail::draw_distinct(rng, slice, spec.k);
      doc = detail::draw_distinct(rng, fill_pool, len - 2 * spec.k);
      doc.insert(doc.end(), c.begin(), c.end());
      doc.insert(doc.end(), c.begin(), c.end());
      rng.shuffle(doc);
      break;
    }
    case Rule::MarkerTemplate: {
      doc = detail::draw_distinct(rng, fill_pool, len - 1);
      doc.insert(doc.begin() + static_cast<std::ptrdiff_t>(rng.below(doc.size() + 1)), slice[rng.below(slice.size())]);
      break;
    }
  }
  return doc;
}

inline std::uint64_t domain_tag(const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : id) h = (h ^ c) * 1099511628211ULL;
  return h;
}

/// Disjoint train/dev/test splits; the same (spec, seed) always yields the
/// same corpus.
inline DomainCorpus generate_domain(const SyntheticDomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(mix_seed(seed, domain_tag(spec.domain_id)));
  DomainCorpus corpus;
  corpus.domain_id = spec.domain_id;
  std::set<std::vector<TokenId>> seen;
  auto fill = [&](std::vector<Example>& split, std::size_t n) {
    std::size_t attempts = 0;
    while (split.size() < n) {
      if (++attempts > 100 * n + 1000) throw ConfigError("domain '" + spec.domain_id + "': cannot draw enough distinct documents");
      auto doc = sample_document(spec, rng);
      if (!seen.insert(doc).second) continue;
      Example ex;
      ex.summary.ids = summarize(spec, doc);
      ex.document.ids = std::move(doc);
      split.push_back(std::move(ex));
    }
  };
  fill(corpus.train, spec.n_train);
  fill(corpus.dev, spec.n_dev);
  fill(corpus.test, spec.n_test);
  return corpus;
}

// ---------------------------------------------------------------------------
// Text form: one JSON object per line with "document" and "summary".

inline std::string corpus_split_jsonl(std::span<const Example> split) {
  const Vocabulary& vocab = Lexicon::vocabulary();
  std::string out;
  for (const auto& ex : split) {
    nlohmann::json j{{"document", detokenize(ex.document, vocab)}, {"summary", detokenize(ex.summary, vocab)}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<Example> parse_split_jsonl(const std::string& text, const std::string& what) {
  const Vocabulary& vocab = Lexicon::vocabulary();
  std::vector<Example> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.document = tokenize(j.at("document").get<std::string>(), vocab);
      ex.summary = tokenize(j.at("summary").get<std::string>(), vocab, kSummaryLenCap);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(what + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dapa::harness

#pragma once

// ROUGE-1/2/L over token-id sequences.

#include <algorithm>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "dapa/error.hpp"
#include "dapa/textproc.hpp"

namespace dapa {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const RougeScore&) const = default;
};

struct RougeTriple {
  RougeScore rouge1;
  RougeScore rouge2;
  RougeScore rougeL;

  bool operator==(const RougeTriple&) const = default;
};

inline RougeScore make_rouge(double hits, double cand_total, double ref_total) {
  RougeScore s;
  s.precision = cand_total > 0 ? hits / cand_total : 0.0;
  s.recall = ref_total > 0 ? hits / ref_total : 0.0;
  // Equal to 2PR/(P+R), with a single rounding.
  s.f1 = hits > 0 ? 2.0 * hits / (cand_total + ref_total) : 0.0;
  return s;
}

/// Clipped n-gram overlap, n in {1, 2}.
inline RougeScore rouge_n(std::span<const TokenId> candidate, std::span<const TokenId> reference, int n) {
  if (n != 1 && n != 2) throw UsageError("rouge_n: n must be 1 or 2");
  const std::size_t k = static_cast<std::size_t>(n);
  auto grams = [k](std::span<const TokenId> seq) {
    std::map<std::vector<TokenId>, std::size_t> counts;
    for (std::size_t i = 0; i + k <= seq.size(); ++i) ++counts[std::vector<TokenId>(seq.begin() + i, seq.begin() + i + k)];
    return counts;
  };
  const auto cg = grams(candidate);
  const auto rg = grams(reference);
  std::size_t hits = 0;
  for (const auto& [g, c] : cg) {
    auto it = rg.find(g);
    if (it != rg.end()) hits += std::min(c, it->second);
  }
  const double ct = candidate.size() >= k ? static_cast<double>(candidate.size() - k + 1) : 0.0;
  const double rt = reference.size() >= k ? static_cast<double>(reference.size() - k + 1) : 0.0;
  return make_rouge(static_cast<double>(hits), ct, rt);
}

inline std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline RougeScore rouge_l(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  return make_rouge(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                    static_cast<double>(reference.size()));
}

inline RougeTriple rouge_all(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  return {rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2), rouge_l(candidate, reference)};
}

struct ScoredPair {
  TokenizedDoc candidate;
  TokenizedDoc reference;
};

/// Arithmetic mean of per-pair precision, recall and F1.
inline RougeTriple corpus_rouge(std::span<const ScoredPair> pairs) {
  if (pairs.empty()) throw DegenerateInputError("corpus_rouge: no pairs to score");
  RougeTriple mean;
  auto acc = [](RougeScore& into, const RougeScore& s) {
    into.precision += s.precision;
    into.recall += s.recall;
    into.f1 += s.f1;
  };
  for (const auto& p : pairs) {
    const RougeTriple t = rouge_all(p.candidate.ids, p.reference.ids);
    acc(mean.rouge1, t.rouge1);
    acc(mean.rouge2, t.rouge2);
    acc(mean.rougeL, t.rougeL);
  }
  const double n = static_cast<double>(pairs.size());
  for (RougeScore* s : {&mean.rouge1, &mean.rouge2, &mean.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  return mean;
}

}  // namespace dapa

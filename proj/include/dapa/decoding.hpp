#pragma once

// Greedy and beam-search summary generation with a multiplicative
// repetition penalty and length-normalized hypothesis scores.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <unordered_set>
#include <vector>

#include "dapa/backbone.hpp"
#include "dapa/error.hpp"
#include "dapa/textproc.hpp"

namespace dapa {

struct DecodeConfig {
  std::size_t beam_size = 10;
  double repetition_penalty = 2.5;
  std::size_t max_len = kSummaryLenCap;
  bool length_normalization = true;
  double length_exponent = 1.0;

  void validate() const {
    if (beam_size == 0) throw ConfigError("decode config: beam_size must be at least 1");
    if (!(repetition_penalty >= 1.0)) throw ConfigError("decode config: repetition_penalty must be >= 1");
    if (max_len == 0) throw ConfigError("decode config: max_len must be at least 1");
  }

  static DecodeConfig greedy(std::size_t max_len = kSummaryLenCap, double penalty = 2.5) {
    return DecodeConfig{1, penalty, max_len, true, 1.0};
  }
};

/// Previously generated ids t get l/p for l > 0 and l*p otherwise.
inline std::vector<double> apply_repetition_penalty(std::span<const double> logits, std::span<const TokenId> generated,
                                                    double p) {
  if (!(p >= 1.0)) throw ConfigError("repetition penalty must be >= 1");
  std::vector<double> out(logits.begin(), logits.end());
  if (p == 1.0) return out;
  std::vector<bool> seen(out.size(), false);
  for (TokenId t : generated) {
    if (t < 0 || static_cast<std::size_t>(t) >= out.size() || seen[static_cast<std::size_t>(t)]) continue;
    seen[static_cast<std::size_t>(t)] = true;
    double& l = out[static_cast<std::size_t>(t)];
    l = l > 0 ? l / p : l * p;
  }
  return out;
}

namespace detail {

/// Log-softmax with pad and bos excluded from generation.
inline std::vector<double> generation_log_probs(std::vector<double> logits) {
  const double ninf = -std::numeric_limits<double>::infinity();
  logits[kPad] = ninf;
  logits[kBos] = ninf;
  double mx = ninf;
  for (double l : logits) mx = std::max(mx, l);
  double se = 0.0;
  for (double l : logits) se += std::isinf(l) ? 0.0 : std::exp(l - mx);
  const double lse = mx + std::log(se);
  for (double& l : logits) l = std::isinf(l) ? ninf : l - lse;
  return logits;
}

}  // namespace detail

struct BeamCandidate {
  std::vector<TokenId> tokens;
  double score = 0.0;
};

/// Higher score first; exact ties go to the lexicographically smaller
/// token sequence.
inline bool beam_precedes(const BeamCandidate& a, const BeamCandidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(), b.tokens.end());
}

inline const BeamCandidate& beam_tiebreak(std::span<const BeamCandidate> candidates) {
  if (candidates.empty()) throw UsageError("beam_tiebreak: no candidates");
  return *std::min_element(candidates.begin(), candidates.end(), beam_precedes);
}

struct Generation {
  TokenizedDoc summary;
  double log_prob = 0.0;  // sum over generated tokens, eos included
  double score = 0.0;     // log_prob after length normalization
};

inline double normalized_score(double log_prob, std::size_t length, const DecodeConfig& cfg) {
  if (!cfg.length_normalization || length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), cfg.length_exponent);
}

/// Argmax decoding; ties resolve to the smaller id.
inline Generation greedy_decode(const BackboneWeights& w, const TokenizedDoc& src, const PrefixTensors& prefixes,
                                const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t max_len = std::min(cfg.max_len, w.config().max_tgt_len);
  const EncoderMemory mem = prepare_memory(w, src.ids, prefixes);
  DecoderState st = initial_decoder_state(w, prefixes);
  std::vector<double> logits = advance(w, mem, st, kBos);
  Generation g;
  std::size_t length = 0;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto lp = detail::generation_log_probs(apply_repetition_penalty(logits, g.summary.ids, cfg.repetition_penalty));
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    g.log_prob += lp[static_cast<std::size_t>(best)];
    ++length;
    if (best == kEos) break;
    g.summary.ids.push_back(best);
    if (step + 1 < max_len) logits = advance(w, mem, st, best);
  }
  g.score = normalized_score(g.log_prob, length, cfg);
  return g;
}

/// Beam search. A hypothesis finishes when eos ranks inside the beam;
/// search stops once `beam_size` hypotheses have finished or `max_len`
/// tokens were produced, in which case open beams count as finished.
/// The greedy hypothesis is always among the candidates.
inline Generation generate_scored(const BackboneWeights& w, const TokenizedDoc& src, const PrefixTensors& prefixes,
                                  const DecodeConfig& cfg) {
  cfg.validate();
  if (src.empty()) throw DegenerateInputError("generate: empty source document");
  const std::size_t max_len = std::min(cfg.max_len, w.config().max_tgt_len);
  const EncoderMemory mem = prepare_memory(w, src.ids, prefixes);

  struct Beam {
    std::vector<TokenId> tokens;
    double log_prob = 0.0;
    DecoderState state;
    std::vector<double> logits;
  };
  struct Finished {
    BeamCandidate normalized;
    double log_prob = 0.0;
  };

  std::vector<Beam> live(1);
  live[0].state = initial_decoder_state(w, prefixes);
  live[0].logits = advance(w, mem, live[0].state, kBos);
  std::vector<Finished> finished;

  struct Expansion {
    BeamCandidate cand;  // tokens include the new token; score = cumulative log-prob
    std::size_t parent = 0;
    TokenId token = 0;
  };

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Expansion> expansions;
    expansions.reserve(live.size() * w.config().vocab_size);
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = detail::generation_log_probs(
          apply_repetition_penalty(live[b].logits, live[b].tokens, cfg.repetition_penalty));
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (std::isinf(lp[v])) continue;
        Expansion e;
        e.cand.tokens = live[b].tokens;
        e.cand.tokens.push_back(static_cast<TokenId>(v));
        e.cand.score = live[b].log_prob + lp[v];
        e.parent = b;
        e.token = static_cast<TokenId>(v);
        expansions.push_back(std::move(e));
      }
    }
    const std::size_t keep = std::min(expansions.size(), 2 * cfg.beam_size);
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<std::ptrdiff_t>(keep), expansions.end(),
                      [](const Expansion& a, const Expansion& b) { return beam_precedes(a.cand, b.cand); });

    std::vector<Beam> next;
    for (std::size_t r = 0; r < keep && next.size() < cfg.beam_size; ++r) {
      Expansion& e = expansions[r];
      if (e.token == kEos) {
        if (r >= cfg.beam_size) continue;
        std::vector<TokenId> body(e.cand.tokens.begin(), e.cand.tokens.end() - 1);
        finished.push_back({BeamCandidate{std::move(body), normalized_score(e.cand.score, e.cand.tokens.size(), cfg)},
                            e.cand.score});
        continue;
      }
      Beam nb;
      nb.tokens = std::move(e.cand.tokens);
      nb.log_prob = e.cand.score;
      nb.state = live[e.parent].state;
      next.push_back(std::move(nb));
    }
    if (finished.size() >= cfg.beam_size) {
      live.clear();
      break;
    }
    if (step + 1 == max_len) {
      live = std::move(next);
      break;
    }
    for (Beam& nb : next) nb.logits = advance(w, mem, nb.state, nb.tokens.back());
    live = std::move(next);
  }
  for (const Beam& b : live) {
    finished.push_back({BeamCandidate{b.tokens, normalized_score(b.log_prob, b.tokens.size(), cfg)}, b.log_prob});
  }
  // The greedy hypothesis always competes, so a wider beam never scores
  // below beam 1 (pruning and early stopping can otherwise drop it).
  if (cfg.beam_size > 1) {
    const Generation g = greedy_decode(w, src, prefixes, cfg);
    finished.push_back({BeamCandidate{g.summary.ids, g.score}, g.log_prob});
  }
  if (finished.empty()) return {};
  auto best = std::min_element(finished.begin(), finished.end(),
                               [](const Finished& a, const Finished& b) { return beam_precedes(a.normalized, b.normalized); });
  Generation g;
  g.summary.ids = best->normalized.tokens;
  g.log_prob = best->log_prob;
  g.score = best->normalized.score;
  return g;
}

inline TokenizedDoc generate(const BackboneWeights& w, const TokenizedDoc& src, const PrefixTensors& prefixes,
                             const DecodeConfig& cfg) {
  return generate_scored(w, src, prefixes, cfg).summary;
}

}  // namespace dapa

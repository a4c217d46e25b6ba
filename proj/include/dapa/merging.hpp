#pragma once

// Domain-aligned prefix averaging: score each source prefix by how similar
// its generated summaries are to a small unlabeled target sample, turn the
// scores into simplex weights, and average the source prefixes after
// recomputing them on a target-side embedding.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapa/backbone.hpp"
#include "dapa/decoding.hpp"
#include "dapa/error.hpp"
#include "dapa/numcore.hpp"
#include "dapa/prefixgen.hpp"
#include "dapa/textproc.hpp"

namespace dapa {

/// Unlabeled target documents. Carries no summaries.
struct TargetSample {
  std::vector<TokenizedDoc> docs;
  std::size_t size() const { return docs.size(); }
};

struct TextVector {
  std::vector<double> values;
  bool degenerate = false;  // empty input, all zeros
};

class SentenceEncoder {
 public:
  virtual ~SentenceEncoder() = default;
  virtual std::size_t dims() const = 0;
  /// L2-normalized representation; equal inputs give equal outputs.
  virtual TextVector encode(const TokenizedDoc& doc) const = 0;
};

/// Bag of token counts over regular ids, optionally IDF weighted.
class BagOfTokensEncoder final : public SentenceEncoder {
 public:
  explicit BagOfTokensEncoder(std::size_t vocab_size, std::vector<double> idf = {})
      : vocab_size_(vocab_size), idf_(std::move(idf)) {
    if (!idf_.empty() && idf_.size() != vocab_size_) throw DimensionError("encoder: idf table size differs from vocabulary");
  }

  /// Smoothed IDF, ln((1 + N) / (1 + df)) + 1, from a reference collection.
  static BagOfTokensEncoder with_idf(std::size_t vocab_size, std::span<const TokenizedDoc> docs) {
    std::vector<double> df(vocab_size, 0.0);
    for (const auto& d : docs) {
      std::vector<TokenId> uniq = d.ids;
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      for (TokenId t : uniq)
        if (t >= 0 && static_cast<std::size_t>(t) < vocab_size) df[static_cast<std::size_t>(t)] += 1.0;
    }
    const double n = static_cast<double>(docs.size());
    std::vector<double> idf(vocab_size);
    for (std::size_t t = 0; t < vocab_size; ++t) idf[t] = std::log((1.0 + n) / (1.0 + df[t])) + 1.0;
    return BagOfTokensEncoder(vocab_size, std::move(idf));
  }

  std::size_t dims() const override { return vocab_size_; }
  const std::vector<double>& idf() const { return idf_; }

  TextVector encode(const TokenizedDoc& doc) const override {
    TextVector out;
    out.values.assign(vocab_size_, 0.0);
    for (TokenId t : doc.ids) {
      if (is_reserved(t)) continue;
      if (static_cast<std::size_t>(t) >= vocab_size_) throw IndexError("encoder: token id outside vocabulary");
      out.values[static_cast<std::size_t>(t)] += 1.0;
    }
    if (!idf_.empty())
      for (std::size_t t = 0; t < vocab_size_; ++t) out.values[t] *= idf_[t];
    double norm = 0.0;
    for (double x : out.values) norm += x * x;
    if (norm == 0.0) {
      out.degenerate = true;
      return out;
    }
    norm = std::sqrt(norm);
    for (double& x : out.values) x /= norm;
    return out;
  }

 private:
  std::size_t vocab_size_;
  std::vector<double> idf_;
};

inline TextVector encode_text(const SentenceEncoder& enc, const TokenizedDoc& doc) { return enc.encode(doc); }

/// Cosine of two encoder outputs; zero vectors give 0.
inline double cosine(const TextVector& a, const TextVector& b) {
  if (a.values.size() != b.values.size()) throw DimensionError("cosine: vector sizes differ");
  if (a.degenerate || b.degenerate) return 0.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

struct SimilarityMatrix {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<double> entries;     // row-major m x n
  std::size_t empty_generations = 0;

  double at(std::size_t i, std::size_t j) const { return entries[i * n + j]; }
  double& at(std::size_t i, std::size_t j) { return entries[i * n + j]; }

  static SimilarityMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    SimilarityMatrix s;
    s.m = rows.size();
    s.n = rows.empty() ? 0 : rows[0].size();
    for (const auto& r : rows) {
      if (r.size() != s.n) throw DimensionError("similarity matrix: ragged rows");
      s.entries.insert(s.entries.end(), r.begin(), r.end());
    }
    return s;
  }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> c(m);
    for (std::size_t i = 0; i < m; ++i) c[i] = at(i, j);
    return c;
  }

  void append_column(std::span<const double> col) {
    if (n > 0 && col.size() != m) throw DimensionError("similarity matrix: column length differs from m");
    if (n == 0) m = col.size();
    std::vector<double> e;
    e.reserve(m * (n + 1));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) e.push_back(at(i, j));
      e.push_back(col[i]);
    }
    entries = std::move(e);
    ++n;
  }
};

enum class WeightRule { Dapa, Alt, Uniform, Inst };

inline std::string to_string(WeightRule r) {
  switch (r) {
    case WeightRule::Dapa: return "dapa";
    case WeightRule::Alt: return "alt";
    case WeightRule::Uniform: return "uniform";
    case WeightRule::Inst: return "inst";
  }
  return "?";
}

struct DomainWeights {
  std::vector<double> w;
  WeightRule rule = WeightRule::Dapa;

  std::size_t size() const { return w.size(); }
  std::size_t argmax() const { return static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin()); }
};

namespace detail {

inline std::vector<double> softmax(std::span<const double> s) {
  std::vector<double> out(s.begin(), s.end());
  kernels::softmax_row(out.data(), out.size());
  return out;
}

inline void require_nonempty(const SimilarityMatrix& sim, const char* what) {
  if (sim.m == 0 || sim.n == 0) throw DegenerateInputError(std::string(what) + ": similarity matrix is empty");
}

}  // namespace detail

/// w = softmax(s) with s_j the sum (not mean) of column j.
inline DomainWeights dapa_weights(const SimilarityMatrix& sim) {
  detail::require_nonempty(sim, "dapa_weights");
  std::vector<double> s(sim.n, 0.0);
  for (std::size_t i = 0; i < sim.m; ++i)
    for (std::size_t j = 0; j < sim.n; ++j) s[j] += sim.at(i, j);
  return {detail::softmax(s), WeightRule::Dapa};
}

/// Softmax across sources within each row, then the mean over rows.
inline DomainWeights dapa_alt_weights(const SimilarityMatrix& sim) {
  detail::require_nonempty(sim, "dapa_alt_weights");
  std::vector<double> w(sim.n, 0.0);
  for (std::size_t i = 0; i < sim.m; ++i) {
    const auto row = detail::softmax(std::span<const double>(sim.entries).subspan(i * sim.n, sim.n));
    for (std::size_t j = 0; j < sim.n; ++j) w[j] += row[j];
  }
  for (double& x : w) x /= static_cast<double>(sim.m);
  return {std::move(w), WeightRule::Alt};
}

inline DomainWeights uniform_weights(std::size_t n) {
  if (n == 0) throw DegenerateInputError("uniform_weights: no source domains");
  return {std::vector<double>(n, 1.0 / static_cast<double>(n)), WeightRule::Uniform};
}

/// Cosine between f(generate(x_i; P)) and f(x_i) for every sample document.
inline std::vector<double> similarity_column(const TargetSample& sample, const PrefixGenerator& gen,
                                             const BackboneWeights& backbone, const DecodeConfig& decode_cfg,
                                             const SentenceEncoder& enc, std::size_t* empty_generations = nullptr) {
  const PrefixTensors prefixes = materialize(gen);
  std::vector<double> col;
  col.reserve(sample.size());
  for (const auto& raw : sample.docs) {
    const TokenizedDoc doc = truncated(raw, backbone.config().max_src_len);
    const TokenizedDoc summary = generate(backbone, doc, prefixes, decode_cfg);
    const TextVector r = enc.encode(summary);
    if (r.degenerate && empty_generations) ++*empty_generations;
    col.push_back(cosine(r, enc.encode(doc)));
  }
  return col;
}

inline SimilarityMatrix build_similarity_matrix(const TargetSample& sample, std::span<const PrefixGenerator> gens,
                                                const BackboneWeights& backbone, const DecodeConfig& decode_cfg,
                                                const SentenceEncoder& enc) {
  if (sample.docs.empty()) throw DegenerateInputError("build_similarity_matrix: empty target sample");
  if (gens.empty()) throw DegenerateInputError("build_similarity_matrix: no source prefixes");
  SimilarityMatrix sim;
  for (const auto& g : gens) {
    std::size_t empties = 0;
    sim.append_column(similarity_column(sample, g, backbone, decode_cfg, enc, &empties));
    sim.empty_generations += empties;
  }
  return sim;
}

namespace detail {

inline void require_compatible(std::span<const PrefixGenerator> gens, const char* what) {
  if (gens.empty()) throw DegenerateInputError(std::string(what) + ": no source prefixes");
  for (const auto& g : gens) {
    if (!same_layout(g, gens[0])) {
      throw ConfigError(std::string(what) + ": prefix '" + g.domain_id + "' differs from '" + gens[0].domain_id +
                        "' in prefix length, width, or attention sites");
    }
  }
}

}  // namespace detail

/// Per site: sum_j w_j * materialize(gens[j], e_target).
inline PrefixTensors merge_prefixes(std::span<const PrefixGenerator> gens, const DomainWeights& w,
                                    const Tensor& e_target) {
  detail::require_compatible(gens, "merge_prefixes");
  if (w.size() != gens.size()) {
    throw ConfigError("merge_prefixes: " + std::to_string(w.size()) + " weights for " + std::to_string(gens.size()) +
                      " prefixes");
  }
  PrefixTensors out;
  for (std::size_t j = 0; j < gens.size(); ++j) {
    const PrefixTensors p = materialize(gens[j], e_target);
    for (const auto& [site, kv] : p) {
      if (j == 0) {
        KVTensors acc{kv.key, kv.value};
        for (double& x : acc.key.values()) x *= w.w[0];
        for (double& x : acc.value.values()) x *= w.w[0];
        out.emplace(site, std::move(acc));
        continue;
      }
      KVTensors& acc = out.at(site);
      for (std::size_t i = 0; i < acc.key.size(); ++i) acc.key[i] += w.w[j] * kv.key[i];
      for (std::size_t i = 0; i < acc.value.size(); ++i) acc.value[i] += w.w[j] * kv.value[i];
    }
  }
  return out;
}

struct MaxMerge {
  PrefixTensors prefixes;
  std::vector<double> contribution;  // fraction of elements taken from each source
};

/// Elementwise maximum over recomputed source prefixes; ties go to the
/// lowest source index.
inline MaxMerge merge_prefixes_max(std::span<const PrefixGenerator> gens, const Tensor& e_target) {
  detail::require_compatible(gens, "merge_prefixes_max");
  MaxMerge out;
  std::vector<std::size_t> counts(gens.size(), 0);
  std::size_t total = 0;
  std::vector<PrefixTensors> all;
  for (const auto& g : gens) all.push_back(materialize(g, e_target));
  for (const auto& [site, first] : all[0]) {
    KVTensors merged{first.key, first.value};
    for (auto [merged_t, pick] : {std::pair{&merged.key, &KVTensors::key}, std::pair{&merged.value, &KVTensors::value}}) {
      for (std::size_t i = 0; i < merged_t->size(); ++i) {
        std::size_t arg = 0;
        double best = (all[0].at(site).*pick)[i];
        for (std::size_t j = 1; j < all.size(); ++j) {
          const double x = (all[j].at(site).*pick)[i];
          if (x > best) {
            best = x;
            arg = j;
          }
        }
        (*merged_t)[i] = best;
        ++counts[arg];
        ++total;
      }
    }
    out.prefixes.emplace(site, std::move(merged));
  }
  for (std::size_t c : counts) out.contribution.push_back(total ? static_cast<double>(c) / static_cast<double>(total) : 0.0);
  return out;
}

/// E^T = sum_j w_j E^j.
inline Tensor merge_embed(std::span<const PrefixGenerator> gens, const DomainWeights& w) {
  detail::require_compatible(gens, "merge_embed");
  if (w.size() != gens.size()) throw ConfigError("merge_embed: weight count differs from prefix count");
  Tensor out = gens[0].embedding.value();
  for (double& x : out.values()) x *= w.w[0];
  for (std::size_t j = 1; j < gens.size(); ++j) {
    const Tensor& e = gens[j].embedding.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w.w[j] * e[i];
  }
  return out;
}

/// Backbone embedding rows of the C most frequent tokens in `docs`.
inline Tensor target_embedding(std::span<const TokenizedDoc> docs, std::size_t c, const BackboneWeights& backbone) {
  const auto ids = top_c_tokens(docs, c);
  const Tensor& table = backbone.embedding.value();
  Tensor e(Shape{c, table.cols()});
  for (std::size_t i = 0; i < c; ++i) {
    auto src = table.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), e.row(i).begin());
  }
  return e;
}

struct InstanceMerge {
  DomainWeights weights;
  PrefixTensors prefixes;
};

/// Weights and E^T from the single document being summarized.
inline InstanceMerge dapa_inst(const TokenizedDoc& doc, std::span<const PrefixGenerator> gens,
                               const BackboneWeights& backbone, const DecodeConfig& decode_cfg,
                               const SentenceEncoder& enc) {
  if (doc.empty()) throw DegenerateInputError("dapa_inst: empty document");
  detail::require_compatible(gens, "dapa_inst");
  const TargetSample single{{doc}};
  DomainWeights w = dapa_weights(build_similarity_matrix(single, gens, backbone, decode_cfg, enc));
  w.rule = WeightRule::Inst;
  const Tensor e_target = target_embedding(single.docs, gens[0].prefix_length, backbone);
  PrefixTensors merged = merge_prefixes(gens, w, e_target);
  return {std::move(w), std::move(merged)};
}

// ---------------------------------------------------------------------------
// JSON records

inline nlohmann::json weights_to_json(const DomainWeights& w, std::span<const std::string> domains, std::size_t m) {
  nlohmann::json j;
  j["domains"] = std::vector<std::string>(domains.begin(), domains.end());
  j["m"] = m;
  j["n"] = w.size();
  j["rule"] = to_string(w.rule);
  j["values"] = w.w;
  return j;
}

inline nlohmann::json similarity_to_json(const SimilarityMatrix& s, std::span<const std::string> domains) {
  nlohmann::json j;
  j["domains"] = std::vector<std::string>(domains.begin(), domains.end());
  j["m"] = s.m;
  j["n"] = s.n;
  j["empty_generations"] = s.empty_generations;
  std::vector<std::vector<double>> rows(s.m, std::vector<double>(s.n));
  for (std::size_t i = 0; i < s.m; ++i)
    for (std::size_t k = 0; k < s.n; ++k) rows[i][k] = s.at(i, k);
  j["values"] = rows;
  return j;
}

inline SimilarityMatrix similarity_from_json(const nlohmann::json& j) {
  auto rows = j.at("values").get<std::vector<std::vector<double>>>();
  SimilarityMatrix s = SimilarityMatrix::from_rows(rows);
  if (s.n == 0) s.n = j.at("n").get<std::size_t>();
  s.empty_generations = j.value("empty_generations", std::size_t{0});
  return s;
}

inline WeightRule weight_rule_from_string(const std::string& s) {
  if (s == "dapa") return WeightRule::Dapa;
  if (s == "alt") return WeightRule::Alt;
  if (s == "uniform") return WeightRule::Uniform;
  if (s == "inst") return WeightRule::Inst;
  throw ConfigError("unknown weight rule '" + s + "'");
}

inline DomainWeights weights_from_json(const nlohmann::json& j) {
  return {j.at("values").get<std::vector<double>>(), weight_rule_from_string(j.at("rule").get<std::string>())};
}

}  // namespace dapa

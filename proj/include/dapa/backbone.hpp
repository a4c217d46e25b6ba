#pragma once

// Pre-layer-norm encoder-decoder transformer with tied input/output
// embeddings. Every attention sublayer accepts an optional key/value prefix
// that is prepended to its projected keys and values.

#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dapa/error.hpp"
#include "dapa/numcore.hpp"
#include "dapa/rng.hpp"
#include "dapa/textproc.hpp"

namespace dapa {

struct BackboneConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 0;
  std::size_t max_src_len = kSourceLenCap;
  std::size_t max_tgt_len = kSummaryLenCap;

  bool operator==(const BackboneConfig&) const = default;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_enc_layers == 0 || n_dec_layers == 0 || d_ff == 0 || vocab_size == 0 ||
        max_src_len == 0 || max_tgt_len == 0) {
      throw ConfigError("backbone config: all sizes must be at least 1");
    }
    if (d_model % n_heads != 0) throw ConfigError("backbone config: d_model must be divisible by n_heads");
    if (vocab_size <= static_cast<std::size_t>(kFirstRegular)) {
      throw ConfigError("backbone config: vocabulary must hold more than the reserved tokens");
    }
  }
};

enum class SiteKind { EncoderSelf = 0, DecoderSelf = 1, DecoderCross = 2 };

struct AttentionSite {
  SiteKind kind = SiteKind::EncoderSelf;
  std::size_t layer = 0;

  auto operator<=>(const AttentionSite&) const = default;

  std::string name() const {
    const char* k = kind == SiteKind::EncoderSelf ? "enc-self" : kind == SiteKind::DecoderSelf ? "dec-self" : "dec-cross";
    return std::string(k) + ":" + std::to_string(layer);
  }

  static AttentionSite parse(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw FormatError("bad attention site '" + text + "'");
    const std::string k = text.substr(0, colon);
    AttentionSite s;
    if (k == "enc-self") {
      s.kind = SiteKind::EncoderSelf;
    } else if (k == "dec-self") {
      s.kind = SiteKind::DecoderSelf;
    } else if (k == "dec-cross") {
      s.kind = SiteKind::DecoderCross;
    } else {
      throw FormatError("bad attention site kind '" + k + "'");
    }
    try {
      s.layer = std::stoul(text.substr(colon + 1));
    } catch (const std::exception&) {
      throw FormatError("bad attention site layer in '" + text + "'");
    }
    return s;
  }
};

/// Sites in declaration order: encoder self, decoder self, decoder cross.
inline std::vector<AttentionSite> attention_sites(const BackboneConfig& cfg) {
  std::vector<AttentionSite> sites;
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) sites.push_back({SiteKind::EncoderSelf, l});
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) sites.push_back({SiteKind::DecoderSelf, l});
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) sites.push_back({SiteKind::DecoderCross, l});
  return sites;
}

/// Graph-side prefix for one site.
struct KVPrefix {
  Var key;
  Var value;
};
using SitePrefixes = std::map<AttentionSite, KVPrefix>;

/// Materialized prefix for one site.
struct KVTensors {
  Tensor key;
  Tensor value;
};
using PrefixTensors = std::map<AttentionSite, KVTensors>;

inline SitePrefixes as_site_prefixes(const PrefixTensors& p) {
  SitePrefixes out;
  for (const auto& [site, kv] : p) out.emplace(site, KVPrefix{constant(kv.key), constant(kv.value)});
  return out;
}

struct LayerNormWeights {
  Parameter gain;
  Parameter bias;
};

struct AttentionWeights {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardWeights {
  Parameter w1, b1, w2, b2;
};

struct EncoderLayerWeights {
  LayerNormWeights ln_attn;
  AttentionWeights self_attn;
  LayerNormWeights ln_ff;
  FeedForwardWeights ff;
};

struct DecoderLayerWeights {
  LayerNormWeights ln_self;
  AttentionWeights self_attn;
  LayerNormWeights ln_cross;
  AttentionWeights cross_attn;
  LayerNormWeights ln_ff;
  FeedForwardWeights ff;
};

inline constexpr double kLayerNormEps = 1e-5;

class BackboneWeights {
 public:
  BackboneWeights() = default;

  static BackboneWeights init(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BackboneWeights w;
    w.cfg_ = cfg;
    Rng rng(seed);
    const std::size_t d = cfg.d_model;
    auto uniform = [&](std::size_t rows, std::size_t cols) {
      Tensor t(Shape{rows, cols});
      const double a = 1.0 / std::sqrt(static_cast<double>(rows));
      for (double& x : t.values()) x = rng.uniform(-a, a);
      return Parameter(std::move(t));
    };
    auto zeros = [](std::size_t n) { return Parameter(Tensor(Shape{n})); };
    auto ln = [&] { return LayerNormWeights{Parameter(Tensor(Shape{d}, 1.0)), zeros(d)}; };
    auto attn = [&] {
      return AttentionWeights{uniform(d, d), zeros(d), uniform(d, d), zeros(d),
                              uniform(d, d), zeros(d), uniform(d, d), zeros(d)};
    };
    auto ff = [&] { return FeedForwardWeights{uniform(d, cfg.d_ff), zeros(cfg.d_ff), uniform(cfg.d_ff, d), zeros(d)}; };

    Tensor emb(Shape{cfg.vocab_size, d});
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& x : emb.values()) x = sd * rng.normal();
    w.embedding = Parameter(std::move(emb));
    for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) w.encoder.push_back({ln(), attn(), ln(), ff()});
    w.enc_final = ln();
    for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) w.decoder.push_back({ln(), attn(), ln(), attn(), ln(), ff()});
    w.dec_final = ln();
    w.build_positions();
    return w;
  }

  /// Rebuilds derived state after parameters were assigned directly.
  void finish_load(const BackboneConfig& cfg) {
    cfg_ = cfg;
    build_positions();
  }

  const BackboneConfig& config() const { return cfg_; }

  Parameter embedding;
  std::vector<EncoderLayerWeights> encoder;
  LayerNormWeights enc_final;
  std::vector<DecoderLayerWeights> decoder;
  LayerNormWeights dec_final;

  /// Parameters in canonical order (used by the optimizer and checkpoints).
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embedding};
    auto add_ln = [&](LayerNormWeights& l) { out.insert(out.end(), {&l.gain, &l.bias}); };
    auto add_attn = [&](AttentionWeights& a) {
      out.insert(out.end(), {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo});
    };
    auto add_ff = [&](FeedForwardWeights& f) { out.insert(out.end(), {&f.w1, &f.b1, &f.w2, &f.b2}); };
    for (auto& l : encoder) {
      add_ln(l.ln_attn);
      add_attn(l.self_attn);
      add_ln(l.ln_ff);
      add_ff(l.ff);
    }
    add_ln(enc_final);
    for (auto& l : decoder) {
      add_ln(l.ln_self);
      add_attn(l.self_attn);
      add_ln(l.ln_cross);
      add_attn(l.cross_attn);
      add_ln(l.ln_ff);
      add_ff(l.ff);
    }
    add_ln(dec_final);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto mut = const_cast<BackboneWeights*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  void set_frozen(bool frozen) {
    for (Parameter* p : parameters()) p->set_trainable(!frozen);
  }

  bool frozen() const {
    for (const Parameter* p : parameters())
      if (p->trainable()) return false;
    return true;
  }

  /// Sinusoidal position table covering both source and target lengths.
  const Tensor& positions() const { return positions_; }

 private:
  void build_positions() {
    const std::size_t n = std::max(cfg_.max_src_len, cfg_.max_tgt_len + 1);
    const std::size_t d = cfg_.d_model;
    positions_ = Tensor(Shape{n, d});
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        positions_.at(p, i) = std::sin(static_cast<double>(p) * freq);
        if (i + 1 < d) positions_.at(p, i + 1) = std::cos(static_cast<double>(p) * freq);
      }
  }

  BackboneConfig cfg_;
  Tensor positions_;
};

inline bool bitwise_equal(const BackboneWeights& a, const BackboneWeights& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size() || !(a.config() == b.config())) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!bitwise_equal(pa[i]->value(), pb[i]->value())) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Graph forward pass (training and teacher-forced scoring)

namespace detail {

inline void check_ids(std::span<const TokenId> ids, const BackboneConfig& cfg, const char* what) {
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw IndexError(std::string(what) + ": token id " + std::to_string(id) + " outside vocabulary");
    }
}

inline void check_prefix(const KVPrefix& p, std::size_t d) {
  const Tensor& k = p.key.value();
  const Tensor& v = p.value.value();
  if (k.shape() != v.shape() || k.rank() != 2 || k.cols() != d) {
    throw DimensionError("prefix key " + k.shape_str() + " and value " + v.shape_str() +
                         " must both be [C x " + std::to_string(d) + "]");
  }
}

inline Var embed_positions(const BackboneWeights& w, std::span<const TokenId> ids) {
  const std::size_t d = w.config().d_model;
  Tensor pos(Shape{ids.size(), d});
  std::copy(w.positions().data(), w.positions().data() + ids.size() * d, pos.data());
  return add_constant(embedding(w.embedding.var(), ids, std::sqrt(static_cast<double>(d))), pos);
}

inline Var feed_forward(const FeedForwardWeights& f, const Var& x) {
  return linear(gelu(linear(x, f.w1.var(), f.b1.var())), f.w2.var(), f.b2.var());
}

inline Var norm(const LayerNormWeights& l, const Var& x) {
  return layer_norm(x, l.gain.var(), l.bias.var(), kLayerNormEps);
}

}  // namespace detail

/// softmax(Q K'^T / sqrt(d_head)) V' with K' = [h_K; K], V' = [h_V; V].
inline Var attention_with_prefix(const Var& q, const Var& k, const Var& v, const KVPrefix* prefix,
                                 std::size_t heads, bool causal) {
  if (prefix == nullptr) return attention(q, k, v, heads, 0, causal);
  detail::check_prefix(*prefix, k.value().cols());
  const std::size_t c = prefix->key.value().rows();
  return attention(q, concat_rows(prefix->key, k), concat_rows(prefix->value, v), heads, c, causal);
}

inline const KVPrefix* find_prefix(const SitePrefixes& prefixes, SiteKind kind, std::size_t layer) {
  auto it = prefixes.find(AttentionSite{kind, layer});
  return it == prefixes.end() ? nullptr : &it->second;
}

inline Var encode(const BackboneWeights& w, std::span<const TokenId> src, const SitePrefixes& prefixes = {}) {
  const BackboneConfig& cfg = w.config();
  if (src.empty()) throw DegenerateInputError("encode: empty source document");
  if (src.size() > cfg.max_src_len) throw LengthError("encode: source longer than max_src_len");
  detail::check_ids(src, cfg, "encode");
  Var x = detail::embed_positions(w, src);
  for (std::size_t l = 0; l < w.encoder.size(); ++l) {
    const auto& layer = w.encoder[l];
    const auto& a = layer.self_attn;
    Var h = detail::norm(layer.ln_attn, x);
    Var q = linear(h, a.wq.var(), a.bq.var());
    Var k = linear(h, a.wk.var(), a.bk.var());
    Var v = linear(h, a.wv.var(), a.bv.var());
    Var att = attention_with_prefix(q, k, v, find_prefix(prefixes, SiteKind::EncoderSelf, l), cfg.n_heads, false);
    x = add(x, linear(att, a.wo.var(), a.bo.var()));
    x = add(x, detail::feed_forward(layer.ff, detail::norm(layer.ln_ff, x)));
  }
  return detail::norm(w.enc_final, x);
}

/// Teacher-forced decoder logits [len(dec_in) x V].
inline Var decode(const BackboneWeights& w, const Var& enc, std::span<const TokenId> dec_in,
                  const SitePrefixes& prefixes = {}) {
  const BackboneConfig& cfg = w.config();
  if (dec_in.empty()) throw UsageError("decode: decoder input must start with bos");
  if (dec_in.size() > cfg.max_tgt_len + 1) throw LengthError("decode: target longer than max_tgt_len");
  detail::check_ids(dec_in, cfg, "decode");
  Var y = detail::embed_positions(w, dec_in);
  for (std::size_t l = 0; l < w.decoder.size(); ++l) {
    const auto& layer = w.decoder[l];
    {
      const auto& a = layer.self_attn;
      Var h = detail::norm(layer.ln_self, y);
      Var q = linear(h, a.wq.var(), a.bq.var());
      Var k = linear(h, a.wk.var(), a.bk.var());
      Var v = linear(h, a.wv.var(), a.bv.var());
      Var att = attention_with_prefix(q, k, v, find_prefix(prefixes, SiteKind::DecoderSelf, l), cfg.n_heads, true);
      y = add(y, linear(att, a.wo.var(), a.bo.var()));
    }
    {
      const auto& a = layer.cross_attn;
      Var h = detail::norm(layer.ln_cross, y);
      Var q = linear(h, a.wq.var(), a.bq.var());
      Var k = linear(enc, a.wk.var(), a.bk.var());
      Var v = linear(enc, a.wv.var(), a.bv.var());
      Var att = attention_with_prefix(q, k, v, find_prefix(prefixes, SiteKind::DecoderCross, l), cfg.n_heads, false);
      y = add(y, linear(att, a.wo.var(), a.bo.var()));
    }
    y = add(y, detail::feed_forward(layer.ff, detail::norm(layer.ln_ff, y)));
  }
  return matmul_nt(detail::norm(w.dec_final, y), w.embedding.var());
}

inline Var forward(const BackboneWeights& w, std::span<const TokenId> src, std::span<const TokenId> dec_in,
                   const SitePrefixes& prefixes = {}) {
  return decode(w, encode(w, src, prefixes), dec_in, prefixes);
}

/// Decoder input [bos, y...] and targets [y..., eos] for a summary.
inline std::pair<std::vector<TokenId>, std::vector<TokenId>> teacher_forcing_pair(const TokenizedDoc& summary,
                                                                                  std::size_t max_tgt_len) {
  std::vector<TokenId> body = summary.ids;
  if (body.size() > max_tgt_len) body.resize(max_tgt_len);
  std::vector<TokenId> in{kBos};
  in.insert(in.end(), body.begin(), body.end());
  std::vector<TokenId> out = body;
  out.push_back(kEos);
  return {std::move(in), std::move(out)};
}

// ---------------------------------------------------------------------------
// Incremental inference path (no graph). Shares the numeric kernels with the
// graph path above.

namespace detail {

inline Tensor linear_rows(const Tensor& x, const Parameter& w, const Parameter& b) {
  const std::size_t m = x.rows(), k = x.cols(), n = w.value().cols();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) std::copy(b.value().data(), b.value().data() + n, out.data() + i * n);
  kernels::matmul(x.data(), w.value().data(), out.data(), m, k, n, true);
  return out;
}

inline Tensor norm_rows(const LayerNormWeights& l, const Tensor& x) {
  Tensor out(x.shape());
  kernels::layer_norm(x.data(), l.gain.value().data(), l.bias.value().data(), kLayerNormEps, out.data(), x.rows(),
                      x.cols());
  return out;
}

inline void add_into(Tensor& x, const Tensor& y) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
  if (a.size() == 0) return b;
  Tensor out(Shape{a.rows() + b.rows(), b.cols()});
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
  return out;
}

}  // namespace detail

/// Encoder output plus per-layer cross-attention keys/values (prefix rows
/// first) computed once per source document.
struct EncoderMemory {
  Tensor states;
  std::vector<Tensor> cross_keys;
  std::vector<Tensor> cross_values;
  std::vector<std::size_t> cross_prefix;
};

/// Decoder self-attention cache for one hypothesis.
struct DecoderState {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::vector<std::size_t> prefix;
  std::size_t length = 0;
};

inline EncoderMemory prepare_memory(const BackboneWeights& w, std::span<const TokenId> src,
                                    const PrefixTensors& prefixes = {}) {
  EncoderMemory mem;
  mem.states = encode(w, src, as_site_prefixes(prefixes)).value();
  for (std::size_t l = 0; l < w.decoder.size(); ++l) {
    const auto& a = w.decoder[l].cross_attn;
    Tensor k = detail::linear_rows(mem.states, a.wk, a.bk);
    Tensor v = detail::linear_rows(mem.states, a.wv, a.bv);
    std::size_t c = 0;
    if (auto it = prefixes.find({SiteKind::DecoderCross, l}); it != prefixes.end()) {
      detail::check_prefix(KVPrefix{constant(it->second.key), constant(it->second.value)}, w.config().d_model);
      c = it->second.key.rows();
      k = detail::stack_rows(it->second.key, k);
      v = detail::stack_rows(it->second.value, v);
    }
    mem.cross_keys.push_back(std::move(k));
    mem.cross_values.push_back(std::move(v));
    mem.cross_prefix.push_back(c);
  }
  return mem;
}

inline DecoderState initial_decoder_state(const BackboneWeights& w, const PrefixTensors& prefixes = {}) {
  DecoderState st;
  const std::size_t d = w.config().d_model;
  for (std::size_t l = 0; l < w.decoder.size(); ++l) {
    if (auto it = prefixes.find({SiteKind::DecoderSelf, l}); it != prefixes.end()) {
      st.keys.push_back(it->second.key);
      st.values.push_back(it->second.value);
      st.prefix.push_back(it->second.key.rows());
    } else {
      st.keys.emplace_back(Shape{0, d});
      st.values.emplace_back(Shape{0, d});
      st.prefix.push_back(0);
    }
  }
  return st;
}

/// Feeds one token and returns the next-token logits.
inline std::vector<double> advance(const BackboneWeights& w, const EncoderMemory& mem, DecoderState& st,
                                   TokenId token) {
  const BackboneConfig& cfg = w.config();
  if (st.length >= cfg.max_tgt_len + 1) throw LengthError("decode_step: exceeded max_tgt_len");
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw IndexError("decode_step: token id " + std::to_string(token) + " outside vocabulary");
  }
  const std::size_t d = cfg.d_model;
  const double factor = std::sqrt(static_cast<double>(d));
  Tensor y(Shape{1, d});
  const double* e = w.embedding.value().data() + static_cast<std::size_t>(token) * d;
  const double* p = w.positions().data() + st.length * d;
  for (std::size_t j = 0; j < d; ++j) y[j] = e[j] * factor + p[j];

  for (std::size_t l = 0; l < w.decoder.size(); ++l) {
    const auto& layer = w.decoder[l];
    {
      const auto& a = layer.self_attn;
      Tensor h = detail::norm_rows(layer.ln_self, y);
      Tensor q = detail::linear_rows(h, a.wq, a.bq);
      st.keys[l] = detail::stack_rows(st.keys[l], detail::linear_rows(h, a.wk, a.bk));
      st.values[l] = detail::stack_rows(st.values[l], detail::linear_rows(h, a.wv, a.bv));
      kernels::AttentionShape s{1, st.keys[l].rows(), d, cfg.n_heads, st.prefix[l], true, st.length};
      Tensor att(Shape{1, d});
      kernels::attention(s, q.data(), st.keys[l].data(), st.values[l].data(), att.data());
      detail::add_into(y, detail::linear_rows(att, a.wo, a.bo));
    }
    {
      const auto& a = layer.cross_attn;
      Tensor h = detail::norm_rows(layer.ln_cross, y);
      Tensor q = detail::linear_rows(h, a.wq, a.bq);
      kernels::AttentionShape s{1, mem.cross_keys[l].rows(), d, cfg.n_heads, mem.cross_prefix[l], false, 0};
      Tensor att(Shape{1, d});
      kernels::attention(s, q.data(), mem.cross_keys[l].data(), mem.cross_values[l].data(), att.data());
      detail::add_into(y, detail::linear_rows(att, a.wo, a.bo));
    }
    {
      Tensor h = detail::norm_rows(layer.ln_ff, y);
      Tensor mid = detail::linear_rows(h, layer.ff.w1, layer.ff.b1);
      for (double& x : mid.values()) x = kernels::gelu(x);
      detail::add_into(y, detail::linear_rows(mid, layer.ff.w2, layer.ff.b2));
    }
  }
  Tensor h = detail::norm_rows(w.dec_final, y);
  std::vector<double> logits(cfg.vocab_size);
  kernels::matmul_nt(h.data(), w.embedding.value().data(), logits.data(), 1, d, cfg.vocab_size);
  ++st.length;
  return logits;
}

/// Next-token logits after feeding `generated` (which starts with bos).
inline std::vector<double> decode_step(const BackboneWeights& w, const EncoderMemory& mem,
                                       std::span<const TokenId> generated, const PrefixTensors& prefixes = {}) {
  if (generated.empty()) throw UsageError("decode_step: at least bos must be generated");
  if (generated.size() > w.config().max_tgt_len + 1) throw LengthError("decode_step: exceeded max_tgt_len");
  DecoderState st = initial_decoder_state(w, prefixes);
  std::vector<double> logits;
  for (TokenId t : generated) logits = advance(w, mem, st, t);
  return logits;
}

}  // namespace dapa

#pragma once

// Per-domain prefix parameterization: a trainable C x d embedding E fed
// row-wise through one two-layer tanh MLP per attention site and per
// target (key or value):
//
//   h = tanh(E W1 + b1) W2 + b2

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dapa/backbone.hpp"
#include "dapa/container.hpp"
#include "dapa/error.hpp"
#include "dapa/numcore.hpp"
#include "dapa/rng.hpp"

namespace dapa {

inline constexpr std::string_view kPrefixMagic = "DAPAPFX1";
inline constexpr std::size_t kDefaultPrefixLength = 50;

struct PrefixMlp {
  Parameter w1, b1, w2, b2;
};

struct SitePrefixMlps {
  PrefixMlp key;
  PrefixMlp value;
};

struct PrefixGenerator {
  std::string domain_id;
  std::size_t prefix_length = 0;
  std::size_t d_model = 0;
  std::uint64_t seed = 0;
  std::vector<AttentionSite> sites;
  Parameter embedding;                // E, [C x d]
  std::vector<SitePrefixMlps> mlps;   // parallel to `sites`

  /// E first, then per site the key MLP (W1, b1, W2, b2) and the value MLP.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embedding};
    for (auto& m : mlps) {
      for (PrefixMlp* mlp : {&m.key, &m.value}) out.insert(out.end(), {&mlp->w1, &mlp->b1, &mlp->w2, &mlp->b2});
    }
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto mut = const_cast<PrefixGenerator*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  void validate() const {
    if (prefix_length == 0) throw ConfigError("prefix generator: prefix length must be at least 1");
    if (sites.size() != mlps.size()) throw ConfigError("prefix generator: one MLP pair per site required");
    if (embedding.shape() != Shape{prefix_length, d_model}) {
      throw DimensionError("prefix generator: E has shape " + embedding.value().shape_str());
    }
  }
};

/// Same configuration: C, d and site list.
inline bool same_layout(const PrefixGenerator& a, const PrefixGenerator& b) {
  return a.prefix_length == b.prefix_length && a.d_model == b.d_model && a.sites == b.sites;
}

inline bool bitwise_equal(const PrefixGenerator& a, const PrefixGenerator& b) {
  if (a.domain_id != b.domain_id || a.seed != b.seed || !same_layout(a, b)) return false;
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!bitwise_equal(pa[i]->value(), pb[i]->value())) return false;
  return true;
}

inline PrefixGenerator init_prefix_generator(const BackboneConfig& cfg, std::span<const TokenId> frequent_ids,
                                             const Tensor& embedding_table, std::uint64_t seed,
                                             std::string domain_id = "") {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t c = frequent_ids.size();
  if (c == 0) throw ConfigError("init_prefix_generator: prefix length must be at least 1");
  if (embedding_table.rank() != 2 || embedding_table.cols() != d) {
    throw DimensionError("init_prefix_generator: embedding table " + embedding_table.shape_str() +
                         " does not have width " + std::to_string(d));
  }
  PrefixGenerator g;
  g.domain_id = std::move(domain_id);
  g.prefix_length = c;
  g.d_model = d;
  g.seed = seed;
  g.sites = attention_sites(cfg);

  Tensor e(Shape{c, d});
  for (std::size_t i = 0; i < c; ++i) {
    const TokenId id = frequent_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= embedding_table.rows()) {
      throw IndexError("init_prefix_generator: token id " + std::to_string(id) + " outside the embedding table");
    }
    auto src = embedding_table.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), e.row(i).begin());
  }
  g.embedding = Parameter(std::move(e));

  Rng rng(seed);
  const double a = 1.0 / std::sqrt(static_cast<double>(d));
  auto weight = [&] {
    Tensor t(Shape{d, d});
    for (double& x : t.values()) x = rng.uniform(-a, a);
    return Parameter(std::move(t));
  };
  auto bias = [&] { return Parameter(Tensor(Shape{d})); };
  for (std::size_t s = 0; s < g.sites.size(); ++s) {
    SitePrefixMlps m;
    for (PrefixMlp* mlp : {&m.key, &m.value}) {
      mlp->w1 = weight();
      mlp->b1 = bias();
      mlp->w2 = weight();
      mlp->b2 = bias();
    }
    g.mlps.push_back(std::move(m));
  }
  return g;
}

namespace detail {

inline Var run_prefix_mlp(const PrefixMlp& m, const Var& e) {
  return linear(tanh(linear(e, m.w1.var(), m.b1.var())), m.w2.var(), m.b2.var());
}

}  // namespace detail

/// Graph-side prefixes; gradients flow into E (or the override) and the MLPs.
inline SitePrefixes materialize_vars(const PrefixGenerator& gen, const std::optional<Var>& e_override = std::nullopt) {
  gen.validate();
  Var e = gen.embedding.var();
  if (e_override) {
    if (e_override->shape() != gen.embedding.shape()) {
      throw DimensionError("materialize: override " + e_override->value().shape_str() + " does not match E " +
                           gen.embedding.value().shape_str());
    }
    e = *e_override;
  }
  SitePrefixes out;
  for (std::size_t s = 0; s < gen.sites.size(); ++s) {
    out.emplace(gen.sites[s], KVPrefix{detail::run_prefix_mlp(gen.mlps[s].key, e), detail::run_prefix_mlp(gen.mlps[s].value, e)});
  }
  return out;
}

inline PrefixTensors materialize(const PrefixGenerator& gen, const std::optional<Tensor>& e_override = std::nullopt) {
  std::optional<Var> ov;
  if (e_override) ov = constant(*e_override);
  PrefixTensors out;
  for (const auto& [site, kv] : materialize_vars(gen, ov)) out.emplace(site, KVTensors{kv.key.value(), kv.value.value()});
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Metadata prefix_metadata(const PrefixGenerator& gen) {
  std::string sites;
  for (const auto& s : gen.sites) sites += (sites.empty() ? "" : ",") + s.name();
  return Metadata{{"c", std::to_string(gen.prefix_length)},
                  {"d", std::to_string(gen.d_model)},
                  {"domain_id", gen.domain_id},
                  {"seed", std::to_string(gen.seed)},
                  {"sites", sites}};
}

inline std::string encode_prefix(const PrefixGenerator& gen) {
  gen.validate();
  std::vector<const Tensor*> arrays;
  for (const Parameter* p : gen.parameters()) arrays.push_back(&p->value());
  return encode_container(kPrefixMagic, prefix_metadata(gen), arrays);
}

inline void save_prefix(const PrefixGenerator& gen, const std::filesystem::path& path) {
  write_file_atomic(path, encode_prefix(gen));
}

inline PrefixGenerator decode_prefix(const std::string& bytes, const std::string& what) {
  ContainerContents c = decode_container(bytes, kPrefixMagic, what);
  PrefixGenerator g;
  g.domain_id = metadata_field(c.metadata, "domain_id", what);
  g.prefix_length = metadata_uint(c.metadata, "c", what);
  g.d_model = metadata_uint(c.metadata, "d", what);
  g.seed = metadata_uint(c.metadata, "seed", what);
  const std::string& sites = metadata_field(c.metadata, "sites", what);
  std::size_t start = 0;
  while (start < sites.size()) {
    auto comma = sites.find(',', start);
    if (comma == std::string::npos) comma = sites.size();
    g.sites.push_back(AttentionSite::parse(sites.substr(start, comma - start)));
    start = comma + 1;
  }
  if (g.prefix_length == 0 || g.d_model == 0) throw FormatError(what + ": zero-sized prefix metadata");
  const std::size_t d = g.d_model;
  PayloadReader reader(c.payload, what);
  Tensor e(Shape{g.prefix_length, d});
  reader.fill(e);
  g.embedding = Parameter(std::move(e));
  for (std::size_t s = 0; s < g.sites.size(); ++s) {
    SitePrefixMlps m;
    for (PrefixMlp* mlp : {&m.key, &m.value}) {
      Tensor w1(Shape{d, d}), b1(Shape{d}), w2(Shape{d, d}), b2(Shape{d});
      reader.fill(w1);
      reader.fill(b1);
      reader.fill(w2);
      reader.fill(b2);
      *mlp = PrefixMlp{Parameter(std::move(w1)), Parameter(std::move(b1)), Parameter(std::move(w2)),
                       Parameter(std::move(b2))};
    }
    g.mlps.push_back(std::move(m));
  }
  reader.finish();
  return g;
}

inline PrefixGenerator load_prefix(const std::filesystem::path& path) {
  return decode_prefix(read_file(path), path.string());
}

/// Loads and checks that the checkpoint fits a backbone configuration.
inline PrefixGenerator load_prefix(const std::filesystem::path& path, const BackboneConfig& expected) {
  PrefixGenerator g = load_prefix(path);
  if (g.d_model != expected.d_model) {
    throw ConfigMismatchError(path.string() + ": prefix has d=" + std::to_string(g.d_model) + ", backbone has d=" +
                              std::to_string(expected.d_model));
  }
  if (g.sites != attention_sites(expected)) {
    throw ConfigMismatchError(path.string() + ": prefix attention sites do not match the backbone layers");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Materialized prefixes (for example a merged target prefix)

inline constexpr std::string_view kPrefixTensorsMagic = "DAPAPTS1";

/// Per site in site order: key then value, both C x d.
inline std::string encode_prefix_tensors(const PrefixTensors& p) {
  if (p.empty()) throw UsageError("encode_prefix_tensors: no sites");
  const Shape shape = p.begin()->second.key.shape();
  std::string sites;
  std::vector<const Tensor*> arrays;
  for (const auto& [site, kv] : p) {
    if (kv.key.shape() != shape || kv.value.shape() != shape) {
      throw DimensionError("encode_prefix_tensors: site " + site.name() + " has shape " + kv.key.shape_str());
    }
    sites += (sites.empty() ? "" : ",") + site.name();
    arrays.push_back(&kv.key);
    arrays.push_back(&kv.value);
  }
  const Metadata md{{"c", std::to_string(shape[0])}, {"d", std::to_string(shape[1])}, {"sites", sites}};
  return encode_container(kPrefixTensorsMagic, md, arrays);
}

inline PrefixTensors decode_prefix_tensors(const std::string& bytes, const std::string& what) {
  ContainerContents c = decode_container(bytes, kPrefixTensorsMagic, what);
  const std::size_t rows = metadata_uint(c.metadata, "c", what);
  const std::size_t d = metadata_uint(c.metadata, "d", what);
  const std::string& sites = metadata_field(c.metadata, "sites", what);
  PayloadReader reader(c.payload, what);
  PrefixTensors out;
  std::size_t start = 0;
  while (start < sites.size()) {
    auto comma = sites.find(',', start);
    if (comma == std::string::npos) comma = sites.size();
    KVTensors kv{Tensor(Shape{rows, d}), Tensor(Shape{rows, d})};
    reader.fill(kv.key);
    reader.fill(kv.value);
    out.emplace(AttentionSite::parse(sites.substr(start, comma - start)), std::move(kv));
    start = comma + 1;
  }
  reader.finish();
  return out;
}

inline void save_prefix_tensors(const PrefixTensors& p, const std::filesystem::path& path) {
  write_file_atomic(path, encode_prefix_tensors(p));
}

inline PrefixTensors load_prefix_tensors(const std::filesystem::path& path) {
  return decode_prefix_tensors(read_file(path), path.string());
}

}  // namespace dapa

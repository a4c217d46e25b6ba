#pragma once

#include <filesystem>
#include <string>

#include "dapa/backbone.hpp"
#include "dapa/container.hpp"

namespace dapa {

inline constexpr std::string_view kBackboneMagic = "DAPABKB1";

inline Metadata backbone_metadata(const BackboneConfig& cfg) {
  return Metadata{{"d_ff", std::to_string(cfg.d_ff)},
                  {"d_model", std::to_string(cfg.d_model)},
                  {"max_src_len", std::to_string(cfg.max_src_len)},
                  {"max_tgt_len", std::to_string(cfg.max_tgt_len)},
                  {"n_dec_layers", std::to_string(cfg.n_dec_layers)},
                  {"n_enc_layers", std::to_string(cfg.n_enc_layers)},
                  {"n_heads", std::to_string(cfg.n_heads)},
                  {"vocab_size", std::to_string(cfg.vocab_size)}};
}

inline std::string encode_backbone(const BackboneWeights& w) {
  std::vector<const Tensor*> arrays;
  for (const Parameter* p : w.parameters()) arrays.push_back(&p->value());
  return encode_container(kBackboneMagic, backbone_metadata(w.config()), arrays);
}

inline void save_backbone(const BackboneWeights& w, const std::filesystem::path& path) {
  write_file_atomic(path, encode_backbone(w));
}

/// Loaded weights are frozen; callers unfreeze explicitly for finetuning.
inline BackboneWeights load_backbone(const std::filesystem::path& path) {
  const std::string what = path.string();
  ContainerContents c = decode_container(read_file(path), kBackboneMagic, what);
  BackboneConfig cfg;
  cfg.d_model = metadata_uint(c.metadata, "d_model", what);
  cfg.n_heads = metadata_uint(c.metadata, "n_heads", what);
  cfg.n_enc_layers = metadata_uint(c.metadata, "n_enc_layers", what);
  cfg.n_dec_layers = metadata_uint(c.metadata, "n_dec_layers", what);
  cfg.d_ff = metadata_uint(c.metadata, "d_ff", what);
  cfg.vocab_size = metadata_uint(c.metadata, "vocab_size", what);
  cfg.max_src_len = metadata_uint(c.metadata, "max_src_len", what);
  cfg.max_tgt_len = metadata_uint(c.metadata, "max_tgt_len", what);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  BackboneWeights w = BackboneWeights::init(cfg, 0);
  PayloadReader reader(c.payload, what);
  for (Parameter* p : w.parameters()) reader.fill(p->value());
  reader.finish();
  w.set_frozen(true);
  return w;
}

}  // namespace dapa

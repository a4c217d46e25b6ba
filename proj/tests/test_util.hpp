#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dapa/backbone.hpp"
#include "dapa/rng.hpp"
#include "dapa/textproc.hpp"

namespace dapa::testing {

inline BackboneConfig tiny_config(std::size_t vocab = 24, std::size_t d = 8, std::size_t heads = 2) {
  BackboneConfig c;
  c.d_model = d;
  c.n_heads = heads;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 2 * d;
  c.vocab_size = vocab;
  c.max_src_len = 32;
  c.max_tgt_len = 16;
  return c;
}

inline std::vector<TokenId> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < n; ++i)
    ids.push_back(static_cast<TokenId>(kFirstRegular + rng.below(vocab - kFirstRegular)));
  return ids;
}

inline TokenizedDoc doc_of(std::vector<TokenId> ids) { return TokenizedDoc{std::move(ids)}; }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dapa_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace dapa::testing

#pragma once

// Binary checkpoint container shared by prefix and backbone checkpoints:
//
//   bytes 0..7   magic
//   u32 LE       version (1)
//   u32 LE       metadata length N
//   N bytes      UTF-8 metadata, "key=value\n" lines sorted by key
//   rest         little-endian float32 arrays in the order the writer declares

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dapa/error.hpp"
#include "dapa/numcore.hpp"

namespace dapa {

inline constexpr std::uint32_t kContainerVersion = 1;

using Metadata = std::map<std::string, std::string>;

struct ContainerContents {
  Metadata metadata;
  std::vector<float> payload;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_metadata(const Metadata& md) {
  std::string out;
  for (const auto& [k, v] : md) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("metadata entry '" + k + "' contains a reserved character");
    }
    out += k + "=" + v + "\n";
  }
  return out;
}

/// Writes `contents` to `path` through a temporary file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp.string());
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::string encode_container(std::string_view magic, const Metadata& md, std::span<const Tensor* const> arrays) {
  if (magic.size() != 8) throw UsageError("container magic must be 8 bytes");
  std::string out(magic);
  detail::put_u32(out, kContainerVersion);
  const std::string meta = serialize_metadata(md);
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  for (const Tensor* t : arrays)
    for (double x : t->values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  return out;
}

inline ContainerContents decode_container(const std::string& bytes, std::string_view magic, const std::string& what) {
  if (bytes.size() < 8) throw FormatError(what + ": truncated file (no magic)");
  if (bytes.compare(0, 8, magic) != 0) throw FormatError(what + ": bad magic");
  if (bytes.size() < 16) throw FormatError(what + ": truncated header");
  const std::uint32_t version = detail::get_u32(bytes, 8);
  if (version != kContainerVersion) {
    throw FormatError(what + ": version mismatch (file " + std::to_string(version) + ", expected " +
                      std::to_string(kContainerVersion) + ")");
  }
  const std::uint32_t n = detail::get_u32(bytes, 12);
  if (bytes.size() < 16 + static_cast<std::size_t>(n)) throw FormatError(what + ": truncated metadata");
  ContainerContents c;
  std::istringstream meta(bytes.substr(16, n));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(what + ": malformed metadata line '" + line + "'");
    c.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::size_t body = bytes.size() - 16 - n;
  if (body % 4 != 0) throw FormatError(what + ": truncated payload");
  c.payload.resize(body / 4);
  for (std::size_t i = 0; i < c.payload.size(); ++i) {
    c.payload[i] = std::bit_cast<float>(detail::get_u32(bytes, 16 + n + 4 * i));
  }
  return c;
}

/// Sequential reader that fills tensors from a container payload.
class PayloadReader {
 public:
  PayloadReader(const std::vector<float>& payload, std::string what) : payload_(payload), what_(std::move(what)) {}

  void fill(Tensor& t) {
    if (pos_ + t.size() > payload_.size()) throw FormatError(what_ + ": truncated payload");
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(payload_[pos_ + i]);
    pos_ += t.size();
  }

  void finish() const {
    if (pos_ != payload_.size()) throw FormatError(what_ + ": trailing data after payload");
  }

 private:
  const std::vector<float>& payload_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline const std::string& metadata_field(const Metadata& md, const std::string& key, const std::string& what) {
  auto it = md.find(key);
  if (it == md.end()) throw FormatError(what + ": metadata lacks '" + key + "'");
  return it->second;
}

inline std::uint64_t metadata_uint(const Metadata& md, const std::string& key, const std::string& what) {
  const std::string& v = metadata_field(md, key, what);
  try {
    std::size_t used = 0;
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw FormatError(what + ": metadata '" + key + "' is not an unsigned integer");
  }
}

}  // namespace dapa

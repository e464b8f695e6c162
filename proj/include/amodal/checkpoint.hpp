#pragma once

#include "amodal/layers.hpp"

#include "json.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

// Versioned binary checkpoint: a fixed header carrying {format version, kind,
// codebook size, n_z, downsampling factor, codec content hash}, a JSON config
// blob, then named parameter matrices. Self-describing and independent of the
// producing build.
namespace amodal::ckpt {

inline constexpr char kMagic[4] = {'A', 'M', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

enum class Kind : std::uint32_t { codec = 1, coarse = 2, refine = 3 };

struct Header {
  Kind kind = Kind::codec;
  std::uint32_t codebook_size = 0;
  std::uint32_t n_z = 0;
  std::uint32_t downsample_factor = 0;
  std::uint64_t codec_hash = 0;
  nlohmann::json config;
};

namespace detail {

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return v;
}
inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 26)) throw CheckpointError("checkpoint: absurd string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw CheckpointError("checkpoint: truncated string");
  return s;
}

}  // namespace detail

// FNV-1a over the parameter bytes in registry order; identifies a trained
// codec so downstream checkpoints can be matched to it.
template <typename S>
std::uint64_t content_hash(const nn::ParamRegistry<S>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, var] : params.items) {
    mix(name.data(), name.size());
    mix(var->value.data(), sizeof(S) * var->value.size());
  }
  return h;
}

// written to a temp file first, renamed once complete
template <typename S>
void save(const std::string& path, const Header& header, const nn::ParamRegistry<S>& params) {
  const std::string tmp_path = path + ".tmp";
  std::ofstream out(tmp_path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot open for write: " + tmp_path);
  out.write(kMagic, 4);
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(header.kind));
  detail::put<std::uint32_t>(out, header.codebook_size);
  detail::put<std::uint32_t>(out, header.n_z);
  detail::put<std::uint32_t>(out, header.downsample_factor);
  detail::put<std::uint64_t>(out, header.codec_hash);
  detail::put_string(out, header.config.dump());
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.items.size()));
  for (const auto& [name, var] : params.items) {
    detail::put_string(out, name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(var->value.rows()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(var->value.cols()));
    detail::put<std::uint8_t>(out, sizeof(S) == 4 ? 0 : 1);
    out.write(reinterpret_cast<const char*>(var->value.data()),
              static_cast<std::streamsize>(sizeof(S) * var->value.size()));
  }
  out.close();
  if (!out) throw CheckpointError("checkpoint: write failed: " + tmp_path);
  std::error_code ec;
  std::filesystem::rename(tmp_path, path, ec);
  if (ec) throw CheckpointError("checkpoint: rename failed: " + path);
}

inline Header peek(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path);
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version");
  Header h;
  h.kind = static_cast<Kind>(detail::get<std::uint32_t>(in));
  h.codebook_size = detail::get<std::uint32_t>(in);
  h.n_z = detail::get<std::uint32_t>(in);
  h.downsample_factor = detail::get<std::uint32_t>(in);
  h.codec_hash = detail::get<std::uint64_t>(in);
  h.config = nlohmann::json::parse(detail::get_string(in));
  return h;
}

// Loads parameters by name into an already-constructed registry; every name
// and shape must match the architecture built from the header config.
template <typename S>
Header load(const std::string& path, nn::ParamRegistry<S>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path);
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version");
  Header h;
  h.kind = static_cast<Kind>(detail::get<std::uint32_t>(in));
  h.codebook_size = detail::get<std::uint32_t>(in);
  h.n_z = detail::get<std::uint32_t>(in);
  h.downsample_factor = detail::get<std::uint32_t>(in);
  h.codec_hash = detail::get<std::uint64_t>(in);
  h.config = nlohmann::json::parse(detail::get_string(in));
  const auto n = detail::get<std::uint32_t>(in);
  if (n != params.items.size())
    throw CheckpointError("checkpoint: parameter count mismatch in " + path);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = detail::get_string(in);
    const auto rows = detail::get<std::uint32_t>(in);
    const auto cols = detail::get<std::uint32_t>(in);
    const auto dtype = detail::get<std::uint8_t>(in);
    if (dtype != (sizeof(S) == 4 ? 0 : 1))
      throw CheckpointError("checkpoint: scalar type mismatch for " + name);
    auto var = params.find(name);
    if (var->value.rows() != static_cast<int>(rows) || var->value.cols() != static_cast<int>(cols))
      throw CheckpointError("checkpoint: shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(var->value.data()),
            static_cast<std::streamsize>(sizeof(S) * var->value.size()));
    if (!in) throw CheckpointError("checkpoint: truncated parameter " + name);
  }
  return h;
}

}  // namespace amodal::ckpt

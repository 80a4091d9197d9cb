// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "chunkmoe/config.hpp"
#include "chunkmoe/model.hpp"

namespace chunkmoe {

/// Checkpoint layout (all integers little-endian):
///   magic "CMCK" | u32 version | u64 config length | config text (canonical)
///   u32 tensor count | directory entries | payload
/// Directory entry: u16 name length | name | u64 rows | u64 cols | u64 offset
/// into the payload. Payload: IEEE-754 32-bit row-major arrays.
/// Tensors appear in for_each_param order with sequential offsets, so
/// save -> load -> save round-trips byte-identically.
inline constexpr char kCkptMagic[4] = {'C', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCkptVersion = 1;

namespace detail {

template <typename U>
void write_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U read_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw IoError("checkpoint: truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

inline void write_f32(std::string& out, float f) {
  write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
}

inline float read_f32(const std::string& in, std::size_t& pos) {
  return std::bit_cast<float>(read_le<std::uint32_t>(in, pos));
}

/// Allocates a parameter set with the right shapes, all zeros.
inline ModelParams<float> shaped_params(const ModelConfig& cfg) {
  ModelParams<float> p = ModelParams<float>::init(cfg, 0);
  p.for_each_param([](const std::string&, Tensor<float>& t) { t.fill(0.0f); });
  return p;
}

}  // namespace detail

inline void save_checkpoint(ModelParams<float>& params, const TrainConfig& config,
                            const std::filesystem::path& path) {
  const std::string config_text = serialize_config(config);

  struct Entry {
    std::string name;
    std::uint64_t rows, cols, offset;
  };
  std::vector<Entry> dir;
  std::string payload;
  std::uint64_t offset = 0;
  params.for_each_param([&](const std::string& name, Tensor<float>& t) {
    dir.push_back({name, t.rows(), t.cols(), offset});
    for (const float v : t.flat()) detail::write_f32(payload, v);
    offset += 4ull * t.size();
  });

  std::string out;
  out.append(kCkptMagic, 4);
  detail::write_le<std::uint32_t>(out, kCkptVersion);
  detail::write_le<std::uint64_t>(out, config_text.size());
  out += config_text;
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dir.size()));
  for (const Entry& e : dir) {
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    detail::write_le<std::uint64_t>(out, e.rows);
    detail::write_le<std::uint64_t>(out, e.cols);
    detail::write_le<std::uint64_t>(out, e.offset);
  }
  out += payload;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("checkpoint: write failure: " + path.string());
}

struct LoadedCheckpoint {
  ModelParams<float> params;
  TrainConfig config;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path.string());
  std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  if (in.size() < 8 || std::memcmp(in.data(), kCkptMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  pos = 4;
  const auto version = detail::read_le<std::uint32_t>(in, pos);
  if (version != kCkptVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto cfg_len = detail::read_le<std::uint64_t>(in, pos);
  if (pos + cfg_len > in.size()) throw IoError("checkpoint: truncated config");
  const std::string config_text = in.substr(pos, cfg_len);
  pos += cfg_len;

  const TrainConfig config = parse_config_text(config_text);
  LoadedCheckpoint out{detail::shaped_params(config.model), config};

  const auto count = detail::read_le<std::uint32_t>(in, pos);
  struct Entry {
    std::string name;
    std::uint64_t rows, cols, offset;
  };
  std::vector<Entry> dir(count);
  for (auto& e : dir) {
    const auto name_len = detail::read_le<std::uint16_t>(in, pos);
    if (pos + name_len > in.size()) throw IoError("checkpoint: truncated name");
    e.name = in.substr(pos, name_len);
    pos += name_len;
    e.rows = detail::read_le<std::uint64_t>(in, pos);
    e.cols = detail::read_le<std::uint64_t>(in, pos);
    e.offset = detail::read_le<std::uint64_t>(in, pos);
  }
  const std::size_t payload_start = pos;

  std::size_t idx = 0;
  out.params.for_each_param([&](const std::string& name, Tensor<float>& t) {
    if (idx >= dir.size()) throw IoError("checkpoint: missing tensor " + name);
    const Entry& e = dir[idx++];
    if (e.name != name || e.rows != t.rows() || e.cols != t.cols())
      throw IoError("checkpoint: directory mismatch at " + name);
    std::size_t p = payload_start + e.offset;
    for (auto& v : t.flat()) v = detail::read_f32(in, p);
  });
  if (idx != dir.size()) throw IoError("checkpoint: extra tensors in directory");
  return out;
}

}  // namespace chunkmoe

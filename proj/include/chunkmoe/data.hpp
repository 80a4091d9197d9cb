// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "chunkmoe/error.hpp"
#include "chunkmoe/model.hpp"

namespace chunkmoe {

/// Byte-level tokenization: one token per byte, ids 0..255.
inline std::vector<int> ingest_bytes(std::string_view text) {
  std::vector<int> tokens;
  tokens.reserve(text.size());
  for (const char ch : text) tokens.push_back(static_cast<int>(static_cast<unsigned char>(ch)));
  return tokens;
}

/// Reads a corpus file as raw bytes. Deterministic; empty file -> empty
/// stream.
inline std::vector<int> ingest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("ingest: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("ingest: read failure on " + path.string());
  return ingest_bytes(bytes);
}

}  // namespace chunkmoe

// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0
//
// Raw tensor files: little-endian IEEE-754 float32, row-major, no header.
// A directory of such files is described by a manifest.json whose "tensors"
// object maps name -> {path, shape}.

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccli/error.hpp"
#include "ccli/matrix.hpp"

namespace ccli::tensor_io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline std::uint32_t to_le(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
  }
}

inline void write_f32(const fs::path& file, std::span<const double> values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    words[i] = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) throw IoError("short write to " + file.string());
}

inline std::vector<double> read_f32(const fs::path& file, std::size_t count) {
  std::error_code ec;
  const auto bytes = fs::file_size(file, ec);
  if (ec) throw CorruptBundleError("missing tensor file " + file.string());
  if (bytes != count * sizeof(float)) {
    throw CorruptBundleError(file.filename().string() + " holds " + std::to_string(bytes) +
                             " bytes, manifest implies " + std::to_string(count * sizeof(float)));
  }
  std::vector<std::uint32_t> words(count);
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw CorruptBundleError("short read from " + file.string());
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = static_cast<double>(std::bit_cast<float>(to_le(words[i])));
  }
  return out;
}

/// Writes `<name>.f32` into `dir` and records it under `tensors[name]`.
inline void put(const fs::path& dir, json& tensors, const std::string& name, const Matrix& m,
                bool vector_shape = false) {
  const std::string file = name + ".f32";
  write_f32(dir / file, m.data());
  json shape = vector_shape ? json::array({m.rows()}) : json::array({m.rows(), m.cols()});
  tensors[name] = {{"path", file}, {"shape", shape}};
}

/// Declared shape of a manifest tensor entry, validated against `expected`.
inline void check_shape(const json& tensors, const std::string& name,
                        const std::vector<std::size_t>& expected) {
  if (!tensors.contains(name)) throw CorruptBundleError("manifest lacks tensor '" + name + "'");
  const auto& entry = tensors.at(name);
  std::vector<std::size_t> shape;
  try {
    shape = entry.at("shape").get<std::vector<std::size_t>>();
    (void)entry.at("path").get<std::string>();
  } catch (const json::exception& e) {
    throw CorruptBundleError("tensor '" + name + "' entry malformed: " + e.what());
  }
  if (shape != expected) {
    auto str = [](const std::vector<std::size_t>& s) {
      std::string r = "[";
      for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
      return r + "]";
    };
    throw CorruptBundleError("tensor '" + name + "' has shape " + str(shape) +
                             " but manifest counts imply " + str(expected));
  }
}

/// Confirms the tensor file byte size matches the declared shape without
/// reading its payload.
inline void check_file(const fs::path& dir, const json& tensors, const std::string& name) {
  const auto& entry = tensors.at(name);
  std::size_t count = 1;
  for (auto d : entry.at("shape").get<std::vector<std::size_t>>()) count *= d;
  const fs::path file = dir / entry.at("path").get<std::string>();
  std::error_code ec;
  const auto bytes = fs::file_size(file, ec);
  if (ec) throw CorruptBundleError("missing tensor file " + file.string());
  if (bytes != count * sizeof(float)) {
    throw CorruptBundleError(file.filename().string() + " holds " + std::to_string(bytes) +
                             " bytes, manifest implies " + std::to_string(count * sizeof(float)));
  }
}

inline Matrix get(const fs::path& dir, const json& tensors, const std::string& name) {
  const auto& entry = tensors.at(name);
  const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
  const std::size_t rows = shape.empty() ? 0 : shape[0];
  const std::size_t cols = shape.size() < 2 ? 1 : shape[1];
  return Matrix(rows, cols, read_f32(dir / entry.at("path").get<std::string>(), rows * cols));
}

inline json read_manifest(const fs::path& dir) {
  const fs::path file = dir / "manifest.json";
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("version") || !j.at("version").is_number_integer()) {
    throw FormatError("manifest.json lacks an integer 'version'");
  }
  if (j.at("version").get<int>() != kFormatVersion) {
    throw FormatError("unsupported manifest version " + j.at("version").dump());
  }
  return j;
}

inline void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(file.filename().string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace ccli::tensor_io

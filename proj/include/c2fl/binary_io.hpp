#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "c2fl/errors.hpp"

namespace c2fl::binary_io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T value) {
  static_assert(sizeof(T) == 4);
  if constexpr (std::endian::native == std::endian::big) {
    std::uint32_t bits;
    std::memcpy(&bits, &value, 4);
    bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
    std::memcpy(&value, &bits, 4);
  }
  return value;
}

/// Reads a file of little-endian 4-byte words. Throws FormatError if the
/// byte length is not a multiple of 4.
template <typename T>
std::vector<T> read_words(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0)
    throw FormatError(path.string() + ": truncated payload (" + std::to_string(bytes.size()) +
                      " bytes is not a whole number of 4-byte words)");
  std::vector<T> out(bytes.size() / 4);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  for (auto& v : out) v = to_little(v);
  return out;
}

template <typename T>
void write_words(const std::filesystem::path& path, std::span<const T> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (T v : values) {
    T le = to_little(v);
    out.write(reinterpret_cast<const char*>(&le), 4);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace c2fl::binary_io

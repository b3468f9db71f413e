#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rcbm/tensorcore/tensor.hpp"

namespace rcbm {

// Plain (unmetered) named array: the unit of the on-disk tensor dump.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

// Tensor dump: a JSON manifest listing {name, shape, dtype:"f64"} per tensor
// and a sidecar blob holding the raw little-endian values concatenated in
// manifest order. The manifest names its blob relative to itself.
void write_tensor_dump(const std::filesystem::path& manifest_path,
                       const std::filesystem::path& blob_path, std::span<const NamedArray> arrays);
std::vector<NamedArray> read_tensor_dump(const std::filesystem::path& manifest_path);

/// Little-endian bytes of the arrays in order, exactly as stored in a blob.
std::string encode_blob(std::span<const NamedArray> arrays);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary file in the same directory and renames it in place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view data);

}  // namespace rcbm

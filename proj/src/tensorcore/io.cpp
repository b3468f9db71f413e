#include "rcbm/tensorcore/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "rcbm/tensorcore/error.hpp"

namespace rcbm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void put_le(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  for (int byte = 0; byte < 8; ++byte) out.push_back(static_cast<char>((bits >> (8 * byte)) & 0xff));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int byte = 0; byte < 8; ++byte) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[byte])) << (8 * byte);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string encode_blob(std::span<const NamedArray> arrays) {
  std::string blob;
  for (const NamedArray& a : arrays) {
    if (shape_size(a.shape) != a.values.size()) {
      throw ShapeError("tensor '" + a.name + "' has " + std::to_string(a.values.size()) +
                       " values for shape " + shape_string(a.shape));
    }
    blob.reserve(blob.size() + a.values.size() * 8);
    for (double v : a.values) put_le(blob, v);
  }
  return blob;
}

void write_tensor_dump(const fs::path& manifest_path, const fs::path& blob_path,
                       std::span<const NamedArray> arrays) {
  const std::string blob = encode_blob(arrays);
  json entries = json::array();
  for (const NamedArray& a : arrays) {
    entries.push_back({{"name", a.name}, {"shape", a.shape}, {"dtype", "f64"}});
  }
  const json manifest = {
      {"blob", fs::absolute(blob_path)
                   .lexically_relative(fs::absolute(manifest_path).parent_path())
                   .generic_string()},
      {"blob_bytes", blob.size()},
      {"tensors", entries},
  };
  write_file_atomic(blob_path, blob);
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
}

std::vector<NamedArray> read_tensor_dump(const fs::path& manifest_path) {
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string() + ": malformed tensor manifest (" + e.what() + ")");
  }
  std::vector<NamedArray> arrays;
  std::size_t expected_bytes = 0;
  try {
    for (const json& entry : manifest.at("tensors")) {
      NamedArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      if (entry.at("dtype").get<std::string>() != "f64") {
        throw IoError(manifest_path.string() + ": tensor '" + a.name + "' has unsupported dtype");
      }
      expected_bytes += shape_size(a.shape) * 8;
      arrays.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string() + ": malformed tensor manifest (" + e.what() + ")");
  }
  const fs::path blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  const std::string blob = read_file(blob_path);
  if (blob.size() != expected_bytes) {
    throw IoError(blob_path.string() + ": manifest/blob mismatch (manifest describes " +
                  std::to_string(expected_bytes) + " bytes, blob has " +
                  std::to_string(blob.size()) + ")");
  }
  std::size_t offset = 0;
  for (NamedArray& a : arrays) {
    a.values.resize(shape_size(a.shape));
    for (double& v : a.values) {
      v = get_le(blob.data() + offset);
      offset += 8;
    }
  }
  return arrays;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string() + ": cannot open for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError(tmp.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": rename failed (" + ec.message() + ")");
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

}  // namespace rcbm

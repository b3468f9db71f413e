#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace rcbm::datagen {

// Concepts are laid out group by group (group g owns columns
// [g·group_size, (g+1)·group_size)), followed by the distractors.
struct PlantedConfig {
  std::size_t p = 12;
  std::size_t G = 3;
  std::size_t group_size = 3;
  std::size_t K = 8;
  std::size_t n = 3000;
  std::size_t input_dim = 16;
  double noise_std = 0.05;
  double concept_flip_rate = 0.02;
  std::uint64_t seed = 0;
  double train_fraction = 0.70;
  double val_fraction = 0.15;

  std::size_t distractors() const { return p - G * group_size; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// SHA-256 of the canonical JSON form.
  std::string digest() const;
  bool operator==(const PlantedConfig&) const = default;
};

void to_json(nlohmann::json& j, const PlantedConfig& c);
void from_json(const nlohmann::json& j, PlantedConfig& c);

struct Splits {
  std::vector<std::size_t> train, val, test;
  bool operator==(const Splits&) const = default;
};

struct ConceptDataset {
  PlantedConfig config;
  std::vector<double> X;  // n × input_dim
  std::vector<double> C;  // n × p, entries in {0,1}
  std::vector<int> Y;     // n labels in [0, K)
  Splits splits;
  std::string provenance;  // config digest

  std::size_t size() const { return Y.size(); }
  bool operator==(const ConceptDataset&) const = default;
};

/// Rows gathered into contiguous arrays (the unit a trainer batches over).
struct Subset {
  std::size_t rows = 0;
  std::size_t input_dim = 0;
  std::size_t concepts = 0;
  std::vector<double> X;
  std::vector<double> C;
  std::vector<int> Y;
};

Subset gather(const ConceptDataset& d, std::span<const std::size_t> rows);

/// Class of a latent bit pattern: binary code of the bits, reduced mod K.
int label_of(std::span<const std::uint8_t> bits, std::size_t K);

ConceptDataset generate(const PlantedConfig& cfg);

/// meta.json (config, splits, checksums) plus data.json/data.bin (X, C, Y).
void save(const ConceptDataset& d, const std::filesystem::path& dir);
ConceptDataset load(const std::filesystem::path& dir);

}  // namespace rcbm::datagen

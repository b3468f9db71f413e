#include "rcbm/datagen/planted.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/io.hpp"
#include "rcbm/tensorcore/rng.hpp"

namespace rcbm::datagen {

using nlohmann::json;

namespace {

constexpr std::uint64_t kLatentStream = 1;
constexpr std::uint64_t kEmbeddingStream = 2;
constexpr std::uint64_t kNoiseStream = 3;
constexpr std::uint64_t kSplitStream = 4;

constexpr const char* kBlobName = "data.bin";
constexpr const char* kManifestName = "data.json";

}  // namespace

void PlantedConfig::validate() const {
  if (G == 0) throw ConfigError("G", "need at least one group");
  if (group_size == 0) throw ConfigError("group_size", "must be positive");
  if (p < G * group_size) throw ConfigError("p", "smaller than G·group_size");
  if (K < 2) throw ConfigError("K", "need at least two classes");
  if (G < 63 && K > (std::size_t{1} << G)) throw ConfigError("K", "exceeds 2^G");
  if (n < 3) throw ConfigError("n", "need at least one row per split");
  if (input_dim == 0) throw ConfigError("input_dim", "must be positive");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw ConfigError("noise_std", "must be non-negative");
  }
  if (!(concept_flip_rate >= 0.0 && concept_flip_rate < 0.5)) {
    throw ConfigError("concept_flip_rate", "must lie in [0, 0.5)");
  }
  if (!(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction < 1.0)) {
    throw ConfigError("train_fraction", "train and val fractions must leave a test split");
  }
}

std::string PlantedConfig::digest() const { return sha256_hex(json(*this).dump()); }

void to_json(json& j, const PlantedConfig& c) {
  j = json{{"p", c.p},
           {"G", c.G},
           {"group_size", c.group_size},
           {"K", c.K},
           {"n", c.n},
           {"input_dim", c.input_dim},
           {"noise_std", c.noise_std},
           {"concept_flip_rate", c.concept_flip_rate},
           {"seed", c.seed},
           {"train_fraction", c.train_fraction},
           {"val_fraction", c.val_fraction}};
}

void from_json(const json& j, PlantedConfig& c) {
  auto read = [&j](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  read("p", c.p);
  read("G", c.G);
  read("group_size", c.group_size);
  read("K", c.K);
  read("n", c.n);
  read("input_dim", c.input_dim);
  read("noise_std", c.noise_std);
  read("concept_flip_rate", c.concept_flip_rate);
  read("seed", c.seed);
  read("train_fraction", c.train_fraction);
  read("val_fraction", c.val_fraction);
}

int label_of(std::span<const std::uint8_t> bits, std::size_t K) {
  std::size_t code = 0;
  for (std::size_t g = 0; g < bits.size(); ++g) code |= std::size_t{bits[g] != 0} << g;
  return static_cast<int>(code % K);
}

Subset gather(const ConceptDataset& d, std::span<const std::size_t> rows) {
  const std::size_t dim = d.config.input_dim;
  const std::size_t p = d.config.p;
  Subset s;
  s.rows = rows.size();
  s.input_dim = dim;
  s.concepts = p;
  s.X.reserve(rows.size() * dim);
  s.C.reserve(rows.size() * p);
  s.Y.reserve(rows.size());
  for (std::size_t r : rows) {
    if (r >= d.size()) throw ShapeError("gather: row " + std::to_string(r) + " out of range");
    s.X.insert(s.X.end(), d.X.begin() + r * dim, d.X.begin() + (r + 1) * dim);
    s.C.insert(s.C.end(), d.C.begin() + r * p, d.C.begin() + (r + 1) * p);
    s.Y.push_back(d.Y[r]);
  }
  return s;
}

ConceptDataset generate(const PlantedConfig& cfg) {
  cfg.validate();
  ConceptDataset d;
  d.config = cfg;
  d.provenance = cfg.digest();
  const std::size_t n = cfg.n, p = cfg.p, dim = cfg.input_dim;

  Rng latent_rng(derive_seed(cfg.seed, kLatentStream));
  d.C.assign(n * p, 0.0);
  d.Y.resize(n);
  std::vector<std::uint8_t> bits(cfg.G);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < cfg.G; ++g) {
      bits[g] = latent_rng.bernoulli(0.5);
      for (std::size_t k = 0; k < cfg.group_size; ++k) {
        const bool flip = latent_rng.bernoulli(cfg.concept_flip_rate);
        d.C[i * p + g * cfg.group_size + k] = (bits[g] != 0) != flip ? 1.0 : 0.0;
      }
    }
    for (std::size_t j = cfg.G * cfg.group_size; j < p; ++j) {
      d.C[i * p + j] = latent_rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    d.Y[i] = label_of(bits, cfg.K);
  }

  // X = (2C − 1)·E + noise with a fixed embedding E ~ N(0, 1/p).
  Rng embed_rng(derive_seed(cfg.seed, kEmbeddingStream));
  std::vector<double> E(p * dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(p));
  for (double& e : E) e = embed_rng.normal(0.0, sd);
  Rng noise_rng(derive_seed(cfg.seed, kNoiseStream));
  d.X.assign(n * dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < dim; ++t) {
      double v = 0.0;
      for (std::size_t j = 0; j < p; ++j) v += (2.0 * d.C[i * p + j] - 1.0) * E[j * dim + t];
      d.X[i * dim + t] = v + noise_rng.normal(0.0, cfg.noise_std);
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, kSplitStream));
  split_rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw ConfigError("n", "too small for the requested split fractions");
  }
  d.splits.train.assign(order.begin(), order.begin() + n_train);
  d.splits.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  d.splits.test.assign(order.begin() + n_train + n_val, order.end());
  return d;
}

void save(const ConceptDataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = d.size();
  const std::vector<NamedArray> arrays{
      {"X", {n, d.config.input_dim}, d.X},
      {"C", {n, d.config.p}, d.C},
      {"Y", {n}, std::vector<double>(d.Y.begin(), d.Y.end())},
  };
  write_tensor_dump(dir / kManifestName, dir / kBlobName, arrays);
  const json meta{
      {"config", d.config},
      {"provenance", d.provenance},
      {"splits", {{"train", d.splits.train}, {"val", d.splits.val}, {"test", d.splits.test}}},
      {"data", kManifestName},
      {"checksums",
       {{kBlobName, sha256_hex(encode_blob(arrays))},
        {kManifestName, sha256_hex(read_file(dir / kManifestName))}}},
  };
  write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

ConceptDataset load(const std::filesystem::path& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw IoError("meta.json: " + std::string(e.what()));
  }
  for (const char* key : {"config", "splits", "checksums", "provenance"}) {
    if (!meta.contains(key)) throw IoError(std::string("meta.json: missing ") + key);
  }

  ConceptDataset d;
  d.config = meta.at("config").get<PlantedConfig>();
  d.config.validate();
  d.provenance = meta.at("provenance").get<std::string>();
  try {
    meta.at("splits").at("train").get_to(d.splits.train);
    meta.at("splits").at("val").get_to(d.splits.val);
    meta.at("splits").at("test").get_to(d.splits.test);
  } catch (const json::exception& e) {
    throw IoError("meta.json splits: " + std::string(e.what()));
  }

  // Verify checksums before parsing so a damaged file never half-loads.
  const json& sums = meta.at("checksums");
  for (const char* name : {kManifestName, kBlobName}) {
    if (!sums.contains(name)) throw IoError(std::string("meta.json: no checksum for ") + name);
    if (sha256_hex(read_file(dir / name)) != sums.at(name).get<std::string>()) {
      throw IoError(std::string("checksum mismatch: ") + name);
    }
  }

  const std::vector<NamedArray> arrays = read_tensor_dump(dir / kManifestName);
  auto find = [&arrays](const std::string& name) -> const NamedArray& {
    for (const NamedArray& a : arrays) {
      if (a.name == name) return a;
    }
    throw IoError("dataset: missing tensor " + name);
  };
  const NamedArray& X = find("X");
  const NamedArray& C = find("C");
  const NamedArray& Y = find("Y");
  const std::size_t n = d.config.n;
  if (X.shape != Shape{n, d.config.input_dim}) {
    throw ConfigError(X.shape.size() == 2 && X.shape[0] == n ? "input_dim" : "n",
                      "X has shape " + shape_string(X.shape));
  }
  if (C.shape != Shape{n, d.config.p}) {
    throw ConfigError(C.shape.size() == 2 && C.shape[0] == n ? "p" : "n",
                      "C has shape " + shape_string(C.shape));
  }
  if (Y.shape != Shape{n}) throw ConfigError("n", "Y has shape " + shape_string(Y.shape));
  if (d.config.digest() != d.provenance) throw IoError("meta.json: config does not match provenance");
  d.X = X.values;
  d.C = C.values;
  d.Y.reserve(n);
  for (double v : Y.values) {
    if (v < 0.0 || v >= static_cast<double>(d.config.K) || v != std::floor(v)) {
      throw IoError("dataset: label out of range");
    }
    d.Y.push_back(static_cast<int>(v));
  }

  std::vector<bool> seen(n, false);
  for (const auto* part : {&d.splits.train, &d.splits.val, &d.splits.test}) {
    for (std::size_t r : *part) {
      if (r >= n || seen[r]) throw IoError("meta.json: splits do not partition the rows");
      seen[r] = true;
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw IoError("meta.json: splits do not cover every row");
  }
  return d;
}

}  // namespace rcbm::datagen

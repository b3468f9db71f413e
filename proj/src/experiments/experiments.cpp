#include "rcbm/experiments/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/io.hpp"
#include "rcbm/tensorcore/rng.hpp"

namespace rcbm::experiments {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDataStream = 0x64617461;
constexpr std::uint64_t kModelStream = 0x6d6f646c;
constexpr std::uint64_t kTrainStream = 0x74726e67;

template <class T>
void read_section(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_object()) throw ConfigError(key, "expected an object");
  j.at(key).get_to(into);
}

template <class T>
void read_field(const json& j, const std::string& section, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(into);
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key, e.what());
  }
}

std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string number(const std::optional<double>& v) { return v ? number(*v) : std::string(); }

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::optional<double> off_mean(const metrics::Report& r, const std::string& metric) {
  const metrics::SimilarityMatrix* s = r.matrix(metric);
  return s == nullptr ? std::nullopt : s->off_mean;
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

}  // namespace

RunConfig RunConfig::resolved() const {
  RunConfig c = *this;
  if (seed) {
    c.data.seed = derive_seed(*seed, kDataStream);
    c.slice.seed = derive_seed(*seed, kModelStream);
    c.train.seed = derive_seed(*seed, kTrainStream);
  }
  return c;
}

std::string RunConfig::digest() const { return sha256_hex(json(resolved()).dump()); }

void RunConfig::validate() const {
  data.validate();
  train.validate();
  slice_config(*this).validate();
  if (sweep.models.empty()) throw ConfigError("sweep.models", "need at least one slice size");
  for (std::size_t i = 0; i < sweep.models.size(); ++i) {
    if (sweep.models[i] == 0) throw ConfigError("sweep.models", "slice sizes must be positive");
    if (i > 0 && sweep.models[i] <= sweep.models[i - 1]) {
      throw ConfigError("sweep.models", "must be strictly increasing");
    }
  }
  for (std::size_t l : ablation.layers) {
    if (l >= slice.hidden.size()) throw ConfigError("ablation.layers", "no such backbone layer");
  }
  if (metrics.union_ks.empty()) throw ConfigError("metrics.union_ks", "need at least one k");
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"data", c.data},
           {"slice", c.slice},
           {"train", c.train},
           {"metrics",
            {{"shap_k", c.metrics.shap_k},
             {"union_ks", c.metrics.union_ks},
             {"eigvec_k", c.metrics.eigvec_k}}},
           {"ablation", {{"layers", c.ablation.layers}, {"control", c.ablation.control}}},
           {"sweep", {{"models", c.sweep.models}}}};
  if (c.seed) j["seed"] = *c.seed;
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"seed", "data", "slice", "train", "metrics", "ablation", "sweep"};
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError(key, "unknown config section");
    }
  }
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    read_field(j, "config", "seed", s);
    c.seed = s;
  }
  read_section(j, "data", c.data);
  read_section(j, "slice", c.slice);
  read_section(j, "train", c.train);
  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    read_field(m, "metrics", "shap_k", c.metrics.shap_k);
    read_field(m, "metrics", "union_ks", c.metrics.union_ks);
    read_field(m, "metrics", "eigvec_k", c.metrics.eigvec_k);
  }
  if (j.contains("ablation")) {
    read_field(j.at("ablation"), "ablation", "layers", c.ablation.layers);
    read_field(j.at("ablation"), "ablation", "control", c.ablation.control);
  }
  if (j.contains("sweep")) read_field(j.at("sweep"), "sweep", "models", c.sweep.models);
}

RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

modelzoo::SliceConfig slice_config(const RunConfig& config) {
  const RunConfig r = config.resolved();
  return trainer::slice_config_for(r.train, r.data, r.slice);
}

RunOutcome run_training(const RunConfig& config, const datagen::ConceptDataset& data,
                        const std::optional<fs::path>& dir) {
  config.validate();
  const RunConfig r = config.resolved();
  const std::string digest = config.digest();
  modelzoo::RashomonSlice slice(slice_config(r));
  std::optional<fs::path> log;
  if (dir) {
    fs::create_directories(*dir);
    write_json(*dir / "config.json", json{{"config", r}, {"config_digest", digest},
                                          {"data_provenance", data.provenance}});
    log = *dir / "train_log.jsonl";
  }
  RunOutcome out;
  out.training = trainer::train(slice, data, r.train, log);
  for (const auto& rec : out.training.state.log) out.peak_bytes = std::max(out.peak_bytes, rec.peak_bytes);
  out.trainable_parameters = slice.trainable_count();
  out.report = metrics::evaluate_slice(slice, datagen::gather(data, data.splits.test), digest,
                                       r.metrics);
  if (dir) {
    modelzoo::save_slice(slice, *dir / "checkpoint");
    write_json(*dir / "metrics.json", metrics::to_json(out.report));
  }
  return out;
}

std::size_t measure_step_peak(const RunConfig& config, const datagen::ConceptDataset& data,
                              bool checkpointing) {
  RunConfig r = config.resolved();
  r.train.checkpointing = checkpointing;
  modelzoo::RashomonSlice slice(slice_config(r));
  trainer::Adam optimizer(trainer::trainable_tensors(slice));
  trainer::TrainState state;
  const std::size_t rows = std::min(r.train.batch_size, data.splits.train.size());
  const std::span<const std::size_t> first(data.splits.train.data(), rows);
  trainer::train_step(slice, trainer::make_batch(datagen::gather(data, first)), r.train, state,
                      optimizer);
  return state.peak_bytes;
}

std::vector<AblationRow> run_layer_ablation(const RunConfig& config,
                                            const datagen::ConceptDataset& data,
                                            const std::optional<fs::path>& dir) {
  config.validate();
  if (config.train.mode != trainer::Mode::kRashomon) {
    throw ConfigError("train.mode", "layer ablation needs adapters (rashomon mode)");
  }
  const std::size_t L = config.slice.hidden.size();
  for (std::size_t l : config.ablation.layers) {
    if (std::find(config.slice.attach_layers.begin(), config.slice.attach_layers.end(), l) ==
        config.slice.attach_layers.end()) {
      throw ConfigError("ablation.layers", "layer " + std::to_string(l) + " has no adapters");
    }
  }
  std::vector<std::optional<std::size_t>> points;
  if (config.ablation.control) points.emplace_back(std::nullopt);
  for (std::size_t l : config.ablation.layers) points.emplace_back(l);

  std::vector<AblationRow> rows;
  for (const auto& freed : points) {
    RunConfig c = config;
    c.slice.sharing_mask.assign(L, true);
    if (freed) c.slice.sharing_mask[*freed] = false;
    const std::string name = freed ? "layer_" + std::to_string(*freed) : "control";
    const RunOutcome o = run_training(c, data, dir ? std::optional(*dir / name) : std::nullopt);
    AblationRow row;
    row.freed_layer = freed;
    row.task_accuracy = mean(o.report.task_accuracy);
    row.concept_accuracy = mean(o.report.concept_accuracy);
    row.concept_cosine = off_mean(o.report, "concept_cosine");
    row.concept_cka = off_mean(o.report, "concept_cka");
    row.shap_similarity = off_mean(o.report, "shap");
    row.trainable_parameters = o.trainable_parameters;
    row.config_digest = c.digest();
    rows.push_back(row);
  }
  if (dir) {
    write_json(*dir / "config.json", json{{"config", config.resolved()},
                                          {"config_digest", config.digest()}});
    write_file_atomic(*dir / "ablation.csv", ablation_csv(rows));
  }
  return rows;
}

std::vector<SweepRow> run_m_sweep(const RunConfig& config, const datagen::ConceptDataset& data,
                                  const std::optional<fs::path>& dir) {
  config.validate();
  const std::size_t k = *std::min_element(config.metrics.union_ks.begin(),
                                          config.metrics.union_ks.end());
  std::vector<SweepRow> rows;
  for (std::size_t M : config.sweep.models) {
    RunConfig c = config;
    c.slice.models = M;
    const RunOutcome o =
        run_training(c, data, dir ? std::optional(*dir / ("M_" + std::to_string(M))) : std::nullopt);
    SweepRow row;
    row.models = M;
    row.task_accuracy = mean(o.report.task_accuracy);
    row.hamming = off_mean(o.report, "hamming");
    row.concept_cka = off_mean(o.report, "concept_cka");
    row.concept_cosine = off_mean(o.report, "concept_cosine");
    row.shap_similarity = off_mean(o.report, "shap");
    if (M > 1) row.union_size = o.report.union_at(k);
    row.peak_bytes = o.peak_bytes;
    row.step_peak_checkpointed = measure_step_peak(c, data, true);
    row.step_peak_unchecked = measure_step_peak(c, data, false);
    row.config_digest = c.digest();
    rows.push_back(row);
  }
  if (dir) {
    write_json(*dir / "config.json", json{{"config", config.resolved()},
                                          {"config_digest", config.digest()}});
    write_file_atomic(*dir / "sweep.csv", sweep_csv(rows));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "freed_layer,task_accuracy,concept_accuracy,concept_cosine,concept_cka,shap_similarity,"
         "trainable_parameters,config_digest\n";
  for (const auto& r : rows) {
    out << (r.freed_layer ? std::to_string(*r.freed_layer) : "none") << ','
        << number(r.task_accuracy) << ',' << number(r.concept_accuracy) << ','
        << number(r.concept_cosine) << ',' << number(r.concept_cka) << ','
        << number(r.shap_similarity) << ',' << r.trainable_parameters << ',' << r.config_digest
        << '\n';
  }
  return out.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "models,task_accuracy,hamming,concept_cka,concept_cosine,shap_similarity,union_size,"
         "peak_bytes,step_peak_checkpointed,step_peak_unchecked,config_digest\n";
  for (const auto& r : rows) {
    out << r.models << ',' << number(r.task_accuracy) << ',' << number(r.hamming) << ','
        << number(r.concept_cka) << ',' << number(r.concept_cosine) << ','
        << number(r.shap_similarity) << ','
        << (r.union_size ? std::to_string(*r.union_size) : std::string()) << ','
        << r.peak_bytes << ',' << r.step_peak_checkpointed << ',' << r.step_peak_unchecked << ','
        << r.config_digest << '\n';
  }
  return out.str();
}

json export_heatmap_data(const modelzoo::RashomonSlice& slice, const datagen::ConceptDataset& data,
                         const std::vector<std::size_t>& samples,
                         const std::vector<std::size_t>& concepts) {
  const std::size_t p = data.config.p;
  for (std::size_t s : samples) {
    if (s >= data.size()) throw ConfigError("samples", "unknown sample id " + std::to_string(s));
  }
  for (std::size_t j : concepts) {
    if (j >= p) throw ConfigError("concepts", "unknown concept id " + std::to_string(j));
  }
  if (samples.empty()) throw ConfigError("samples", "need at least one sample");
  if (concepts.empty()) throw ConfigError("concepts", "need at least one concept");

  const metrics::SlicePredictions background =
      metrics::predict_slice(slice, datagen::gather(data, data.splits.test));
  const metrics::SlicePredictions chosen =
      metrics::predict_slice(slice, datagen::gather(data, samples));

  json models = json::array();
  for (std::size_t m = 0; m < slice.models(); ++m) {
    const metrics::Matrix& Zb = background.concept_probs[m];
    std::vector<double> mu(p);
    for (std::size_t j = 0; j < p; ++j) mu[j] = Zb.col(static_cast<Eigen::Index>(j)).mean();
    const modelzoo::Classifier& f = slice.classifier(m);
    const std::size_t K = f.W.rows();
    const auto W = f.W.values();
    json shap = json::array(), belief = json::array(), weight = json::array();
    std::vector<int> predicted;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::vector<double> x(p);
      for (std::size_t j = 0; j < p; ++j) x[j] = chosen.concept_probs[m](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      const int k = chosen.class_preds[m][i];
      predicted.push_back(k);
      const auto phi = metrics::shap_linear(W, K, p, x, mu, static_cast<std::size_t>(k));
      json srow = json::array(), brow = json::array(), wrow = json::array();
      for (std::size_t j : concepts) {
        srow.push_back(phi[j]);
        brow.push_back(x[j]);
        wrow.push_back(W[static_cast<std::size_t>(k) * p + j]);
      }
      shap.push_back(srow);
      belief.push_back(brow);
      weight.push_back(wrow);
    }
    models.push_back({{"model", m},
                      {"predicted_class", predicted},
                      {"shap", shap},
                      {"belief", belief},
                      {"classifier_weight", weight}});
  }
  return json{{"samples", samples},
              {"concepts", concepts},
              {"background", "test split mean concept probability"},
              {"models", models}};
}

}  // namespace rcbm::experiments

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcbm/datagen/planted.hpp"
#include "rcbm/metrics/metrics.hpp"
#include "rcbm/modelzoo/slice.hpp"
#include "rcbm/trainer/trainer.hpp"

namespace rcbm::experiments {

struct AblationPlan {
  std::vector<std::size_t> layers = {0, 1, 2};  // freed one at a time
  bool control = true;                          // also run the all-shared slice
};

struct SweepPlan {
  std::vector<std::size_t> models = {1, 2, 4, 8};
};

// Everything a run depends on. One master seed feeds the data, model and
// training streams unless `seed` is absent, in which case the section seeds
// are used as written.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  datagen::PlantedConfig data;
  modelzoo::SliceConfig slice;
  trainer::TrainConfig train;
  metrics::ReportOptions metrics;
  AblationPlan ablation;
  SweepPlan sweep;

  /// Copy with the master seed spread into the section seeds.
  RunConfig resolved() const;
  /// SHA-256 of the canonical JSON of the resolved config.
  std::string digest() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_config(const std::filesystem::path& path);

/// Slice config for the run's mode and dataset dimensions.
modelzoo::SliceConfig slice_config(const RunConfig& config);

struct RunOutcome {
  metrics::Report report;
  trainer::TrainResult training;
  std::size_t peak_bytes = 0;  // max training-step peak over the run
  std::size_t trainable_parameters = 0;
};

/// Trains one slice and writes config.json, train_log.jsonl, metrics.json and
/// checkpoint/ into `dir` (when given). Metrics use the test split.
RunOutcome run_training(const RunConfig& config, const datagen::ConceptDataset& data,
                        const std::optional<std::filesystem::path>& dir = std::nullopt);

/// Peak meter bytes of one forward+backward step on the first training batch.
std::size_t measure_step_peak(const RunConfig& config, const datagen::ConceptDataset& data,
                              bool checkpointing);

struct AblationRow {
  std::optional<std::size_t> freed_layer;  // nullopt for the control row
  double task_accuracy = 0.0;
  double concept_accuracy = 0.0;
  std::optional<double> concept_cosine;
  std::optional<double> concept_cka;
  std::optional<double> shap_similarity;
  std::size_t trainable_parameters = 0;
  std::string config_digest;
};

std::vector<AblationRow> run_layer_ablation(const RunConfig& config,
                                            const datagen::ConceptDataset& data,
                                            const std::optional<std::filesystem::path>& dir =
                                                std::nullopt);

struct SweepRow {
  std::size_t models = 0;
  double task_accuracy = 0.0;  // mean over members
  std::optional<double> hamming;
  std::optional<double> concept_cka;
  std::optional<double> concept_cosine;
  std::optional<double> shap_similarity;
  std::optional<std::size_t> union_size;  // at the smallest configured k
  std::size_t peak_bytes = 0;             // training, configured checkpointing
  std::size_t step_peak_checkpointed = 0;
  std::size_t step_peak_unchecked = 0;
  std::string config_digest;
};

std::vector<SweepRow> run_m_sweep(const RunConfig& config, const datagen::ConceptDataset& data,
                                  const std::optional<std::filesystem::path>& dir = std::nullopt);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Per model and selected sample: SHAP value, belief and classifier weight
/// (for the predicted class) for each selected concept. The test split's
/// mean concept probability is the SHAP background.
nlohmann::json export_heatmap_data(const modelzoo::RashomonSlice& slice,
                                   const datagen::ConceptDataset& data,
                                   const std::vector<std::size_t>& samples,
                                   const std::vector<std::size_t>& concepts);

}  // namespace rcbm::experiments

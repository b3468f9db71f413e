#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcbm/datagen/planted.hpp"
#include "rcbm/modelzoo/slice.hpp"
#include "rcbm/tensorcore/ops.hpp"
#include "rcbm/tensorcore/tape.hpp"

namespace rcbm::trainer {

enum class Mode { kRashomon, kRandomInit, kX2c, kC2y };

std::string mode_name(Mode mode);
Mode parse_mode(const std::string& name);
modelzoo::Layout layout_for(Mode mode);

struct AlphaUpdate {
  bool fixed = false;  // per_epoch when false
  double value = 0.5;  // the fixed value, or the starting value
};

struct TrainConfig {
  double lambda = 1.0;
  Mode mode = Mode::kRashomon;
  double learning_rate = 1e-4;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 500;
  std::size_t patience = 30;
  bool checkpointing = true;
  std::uint64_t seed = 0;
  AlphaUpdate alpha;
  ops::CosineMode similarity = ops::CosineMode::kRows;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossBreakdown {
  std::vector<double> per_model_pr;
  std::vector<double> per_model_c;
  std::vector<double> per_model_div;
  double alpha = 0.5;
  double lambda = 1.0;
  double total = 0.0;
};

/// max L_pr + λ·(max L_c − (α/M)·Σ L_div), evaluated in the same order as the
/// differentiable version.
double total_loss_value(std::span<const double> pr, std::span<const double> c,
                        std::span<const double> div, double lambda, double alpha);

/// L_div^(m) = 1 − mean over m′≠m of sim(m,m′), sim the batch-mean cosine of
/// per-sample vectors (or the cosine of the flattened batches). M = 1 gives 0.
std::vector<Tensor> diversity_loss(Tape& tape, std::span<const Tensor> vectors,
                                   ops::CosineMode mode = ops::CosineMode::kRows);
std::vector<double> diversity_loss_values(std::span<const Tensor> vectors,
                                          ops::CosineMode mode = ops::CosineMode::kRows);

Tensor total_loss(Tape& tape, std::span<const Tensor> pr, std::span<const Tensor> c,
                  std::span<const Tensor> div, double lambda, double alpha);

/// σ(mean over tensors of mean |grad|). Throws on an empty set.
double alpha_from_grads(std::span<const Tensor> concept_head_params);

/// Trainable tensors of the slice in its stable order.
std::vector<Tensor> trainable_tensors(const modelzoo::RashomonSlice& slice);

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(double learning_rate);
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double alpha = 0.5;
  LossBreakdown train;  // mean over the epoch's batches
  LossBreakdown val;
  std::vector<double> val_task_accuracy;
  std::vector<double> val_concept_accuracy;
  std::size_t peak_bytes = 0;
  std::optional<std::size_t> member;  // set when members train separately
};

nlohmann::json to_json_record(const EpochRecord& r);

struct TrainState {
  std::size_t epoch = 0;
  double alpha = 0.5;
  std::vector<double> alpha_history;
  double best_val_total = 0.0;
  std::size_t epochs_since_improvement = 0;
  std::size_t step = 0;
  std::size_t peak_bytes = 0;
  std::vector<EpochRecord> log;
};

/// A batch laid out as tensors for the forward pass.
struct Batch {
  Tensor X;
  Tensor C;
  std::vector<int> Y;
};
Batch make_batch(const datagen::Subset& subset);

/// Per-member outputs on a batch in eval mode (no dropout).
struct MemberOutputs {
  std::vector<Tensor> concept_probs;  // M × (batch × p)
  std::vector<Tensor> class_probs;    // M × (batch × K)
};
MemberOutputs predict(const modelzoo::RashomonSlice& slice, const Tensor& X);

/// Loss breakdown (eval mode) plus per-member accuracies.
struct Evaluation {
  LossBreakdown losses;
  std::vector<double> task_accuracy;
  std::vector<double> concept_accuracy;
};
Evaluation evaluate(const modelzoo::RashomonSlice& slice, const Batch& batch,
                    const TrainConfig& config, double alpha);

/// One optimizer step for `members` (all members unless training separately).
/// Returns the breakdown computed before the update. The meter peak of the
/// forward+backward pass lands in state.peak_bytes.
LossBreakdown train_step(modelzoo::RashomonSlice& slice, const Batch& batch,
                         const TrainConfig& config, TrainState& state, Adam& optimizer,
                         std::span<const std::size_t> members);
LossBreakdown train_step(modelzoo::RashomonSlice& slice, const Batch& batch,
                         const TrainConfig& config, TrainState& state, Adam& optimizer);

struct TrainResult {
  TrainState state;
  std::vector<TrainState> member_states;  // random_init only
};

/// Full training with early stopping on validation total loss; the best
/// weights are restored. Writes one JSON line per epoch to `log_path` if set.
TrainResult train(modelzoo::RashomonSlice& slice, const datagen::ConceptDataset& data,
                  const TrainConfig& config,
                  const std::optional<std::filesystem::path>& log_path = std::nullopt);

/// Slice configuration matching a training mode.
modelzoo::SliceConfig slice_config_for(const TrainConfig& config,
                                       const datagen::PlantedConfig& data,
                                       modelzoo::SliceConfig base = {});

}  // namespace rcbm::trainer

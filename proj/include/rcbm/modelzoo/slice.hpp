#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcbm/tensorcore/ops.hpp"
#include "rcbm/tensorcore/tape.hpp"
#include "rcbm/tensorcore/tensor.hpp"

namespace rcbm::modelzoo {

// How backbones, heads and adapters are laid out across the M members.
enum class Layout {
  kAdapters,              // one frozen backbone, per-member low-rank adapters
  kIndependentBackbones,  // M trainable backbones, no adapters
  kSharedEncoder,         // one trainable backbone and one head set, M classifiers
};

std::string layout_name(Layout layout);
Layout parse_layout(const std::string& name);

struct SliceConfig {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden = {128, 128, 128};
  std::size_t models = 4;    // M
  std::size_t concepts = 12; // p
  std::size_t classes = 8;   // K
  Layout layout = Layout::kAdapters;

  // Adapter settings (kAdapters only).
  std::vector<std::size_t> attach_layers = {0, 1, 2};
  std::vector<bool> sharing_mask;  // per backbone layer; empty means none shared
  std::size_t rank = 2;
  double lora_alpha = 4.0;  // scale = lora_alpha / rank
  double dropout_rate = 0.1;

  std::uint64_t seed = 0;
  // Independent layouts draw member m from derive_seed(seed, m) unless set.
  bool identical_member_seeds = false;

  double scale() const { return lora_alpha / static_cast<double>(rank); }
  bool shared(std::size_t layer) const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const SliceConfig& c);
void from_json(const nlohmann::json& j, SliceConfig& c);

struct LinearBlock {
  Tensor W;  // d_out × d_in
  Tensor b;  // d_out
};

struct AdapterModule {
  Tensor U;  // d_out × r
  Tensor V;  // r × d_in
  std::size_t rank = 0;
  double scale = 1.0;
  double dropout_rate = 0.0;
  std::size_t layer = 0;
};

struct ConceptHead {
  Tensor W;  // 1 × d
  Tensor b;  // 1
};

struct Classifier {
  Tensor W;  // K × p
  Tensor b;  // K
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool concept_head = false;  // member of P
};

struct ForwardOutputs {
  Tensor concept_logits;  // batch × p
  Tensor class_logits;    // batch × K
  Tensor concept_probs;   // batch × p
};

class RashomonSlice {
 public:
  explicit RashomonSlice(SliceConfig config);

  const SliceConfig& config() const { return config_; }
  std::size_t models() const { return config_.models; }
  std::size_t layers() const { return config_.hidden.size(); }
  std::size_t feature_dim() const { return config_.hidden.back(); }

  const std::vector<LinearBlock>& backbone(std::size_t m) const;
  const AdapterModule* adapter(std::size_t m, std::size_t layer) const;
  const std::vector<ConceptHead>& heads(std::size_t m) const;
  const Classifier& classifier(std::size_t m) const;
  bool backbone_frozen() const { return config_.layout == Layout::kAdapters; }

  /// Trainable tensors in a stable order; shared tensors appear once.
  std::vector<NamedParameter> trainable_parameters() const;
  /// Trainable tensors that member m's forward pass touches.
  std::vector<NamedParameter> member_parameters(std::size_t m) const;
  /// Every tensor, frozen ones included, keyed by unique name.
  std::vector<NamedParameter> all_tensors() const;
  std::size_t trainable_count() const;
  std::size_t member_trainable_count(std::size_t m) const;

  /// SHA-256 over the bytes of every backbone tensor.
  std::string backbone_digest() const;

  /// Copies every tensor value from `other` (same config).
  void copy_weights_from(const RashomonSlice& other);

 private:
  SliceConfig config_;
  std::vector<std::vector<LinearBlock>> backbones_;
  // adapter_index_[m][layer] indexes adapters_; nullopt where nothing attaches.
  std::vector<std::shared_ptr<AdapterModule>> adapters_;
  std::vector<std::vector<std::optional<std::size_t>>> adapter_index_;
  std::vector<std::vector<ConceptHead>> heads_;
  std::vector<Classifier> classifiers_;
};

/// x·Wᵀ + b, plus scale·(dropout(x)·Vᵀ)·Uᵀ when an adapter is given. Dropout
/// runs only in train mode.
Tensor adapted_linear(Tape& tape, const Tensor& x, const LinearBlock& block,
                      const AdapterModule* adapter, bool train_mode, ops::RngStream& stream);

/// Member m's forward pass. Safe to call inside a checkpoint body.
ForwardOutputs slice_forward(Tape& tape, const RashomonSlice& slice, const Tensor& x,
                             std::size_t m, bool train_mode, ops::RngStream& stream);
ForwardOutputs slice_forward(Tape& tape, const RashomonSlice& slice, const Tensor& x,
                             std::size_t m, bool train_mode, std::uint64_t rng_seed);

/// W + scale·U·V for member m at `layer` (no gradient). Layouts without
/// adapters return the member's own W.
Tensor effective_weight(const RashomonSlice& slice, std::size_t m, std::size_t layer);

/// model.json (structure) plus weights.json/weights.bin (tensor dump).
void save_slice(const RashomonSlice& slice, const std::filesystem::path& dir);
RashomonSlice load_slice(const std::filesystem::path& dir);

}  // namespace rcbm::modelzoo

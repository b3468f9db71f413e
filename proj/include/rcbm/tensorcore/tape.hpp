#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "rcbm/tensorcore/rng.hpp"
#include "rcbm/tensorcore/tensor.hpp"

namespace rcbm {

enum class OpKind {
  kMatmul,
  kAdd,
  kMulScalar,
  kRelu,
  kSigmoid,
  kSoftmax,
  kMean,
  kMaxOverModels,
  kCosineSimilarity,
  kBinaryCrossEntropy,
  kSoftmaxCrossEntropy,
  kDropout,
  kConcatCols,
  kCheckpoint,
};

std::string_view op_name(OpKind kind);

// Reads the gradients of `outputs` and accumulates into `inputs`.
using BackwardFn =
    std::function<void(std::span<const Tensor> inputs, std::span<const Tensor> outputs)>;

struct TapeNode {
  OpKind kind;
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
  BackwardFn backward;
};

struct CheckpointRecord {
  std::size_t region_id;
  std::size_t node_index;
  std::size_t input_count;
  std::uint64_t rng_seed;
};

// Reverse-mode tape for one forward/backward pass. Nodes are appended in
// execution order, so the vector is already topologically sorted. backward()
// consumes the tape; reset() makes it reusable.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// With recording off, ops still compute but leave no nodes (inference).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  /// Piecewise ops (relu, max, clamps) fold their branch choices into a
  /// signature when tracking is on. Finite differences use it to detect kinks.
  void track_branches(bool on) { tracking_ = on; }
  bool tracking_branches() const { return tracking_; }
  void note_branch(std::uint64_t choice) { signature_ = mix64(signature_ ^ (choice + 1)); }
  std::uint64_t branch_signature() const { return signature_; }

  /// True when an op over `inputs` must be recorded.
  bool should_record(std::span<const Tensor> inputs) const;

  std::size_t record(OpKind kind, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                     BackwardFn backward);
  std::size_t add_checkpoint(std::size_t node_index, std::size_t input_count,
                             std::uint64_t rng_seed);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  void backward(const Tensor& loss);
  /// Propagates from roots whose gradients the caller has already seeded.
  void backward_from_seeded();

  std::size_t size() const { return nodes_.size(); }
  std::span<const TapeNode> nodes() const { return nodes_; }
  std::span<const CheckpointRecord> checkpoint_regions() const { return regions_; }
  bool consumed() const { return consumed_; }

  void reset();

 private:
  void run_backward();

  std::vector<TapeNode> nodes_;
  std::vector<CheckpointRecord> regions_;
  bool recording_ = true;
  bool consumed_ = false;
  bool tracking_ = false;
  std::uint64_t signature_ = 0;
};

}  // namespace rcbm

#include "rcbm/tensorcore/tape.hpp"

#include <algorithm>

#include "rcbm/tensorcore/error.hpp"

namespace rcbm {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMulScalar: return "mul_scalar";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kMean: return "mean";
    case OpKind::kMaxOverModels: return "max_over_models";
    case OpKind::kCosineSimilarity: return "cosine_similarity";
    case OpKind::kBinaryCrossEntropy: return "binary_cross_entropy";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kDropout: return "dropout";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kCheckpoint: return "checkpoint";
  }
  return "unknown";
}

bool Tape::should_record(std::span<const Tensor> inputs) const {
  if (!recording_) return false;
  if (consumed_) throw TapeError("tape already consumed by backward(); call reset()");
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

std::size_t Tape::record(OpKind kind, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                         BackwardFn backward) {
  nodes_.push_back({kind, std::move(inputs), std::move(outputs), std::move(backward)});
  return nodes_.size() - 1;
}

std::size_t Tape::add_checkpoint(std::size_t node_index, std::size_t input_count,
                                 std::uint64_t rng_seed) {
  regions_.push_back({regions_.size(), node_index, input_count, rng_seed});
  return regions_.back().region_id;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("tape already consumed by backward()");
  if (!loss.defined() || loss.size() != 1) {
    throw TapeError("backward() needs a scalar loss, got shape " +
                    (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    consumed_ = true;
    return;
  }
  Tensor seed = loss;
  const double one = 1.0;
  seed.accumulate_grad(std::span<const double>(&one, 1));
  run_backward();
}

void Tape::backward_from_seeded() {
  if (consumed_) throw TapeError("tape already consumed by backward()");
  run_backward();
}

void Tape::run_backward() {
  consumed_ = true;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    TapeNode& node = nodes_[i];
    const bool reached = std::any_of(node.outputs.begin(), node.outputs.end(),
                                     [](const Tensor& t) { return t.has_grad(); });
    if (reached) {
      for (const Tensor& out : node.outputs) {
        if (!all_finite(out.grad())) {
          throw NumericError(std::string("non-finite gradient reaching ") +
                             std::string(op_name(node.kind)));
        }
      }
      node.backward(node.inputs, node.outputs);
    }
    // Intermediates are dead once their node has propagated.
    for (Tensor& out : node.outputs) out.clear_grad();
    node.inputs.clear();
    node.outputs.clear();
    node.backward = nullptr;
  }
}

void Tape::reset() {
  nodes_.clear();
  regions_.clear();
  consumed_ = false;
}

}  // namespace rcbm

#pragma once

#include <cstdint>
#include <span>

#include "rcbm/tensorcore/tape.hpp"
#include "rcbm/tensorcore/tensor.hpp"

// Differentiable primitives. Every op validates shapes and rejects
// non-finite inputs; when any input requires grad (and the tape is
// recording) the op appends a node to `tape`.
namespace rcbm::ops {

/// Counter-based randomness for dropout. The n-th draw of a stream depends
/// only on (seed, n), so replaying a computation with the same stream seed
/// reproduces every mask.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_index() { return counter_++; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// a[m×k] · b[k×n], or a · bᵀ with b[n×k] when `transpose_b`.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Elementwise a + b. `b` may also be a row vector broadcast over the rows
/// of a 2-D `a`, or a single-element tensor broadcast everywhere.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// Sum of same-shaped tensors, added left to right.
Tensor add(Tape& tape, std::span<const Tensor> terms);

Tensor mul_scalar(Tape& tape, const Tensor& a, double factor);

Tensor relu(Tape& tape, const Tensor& a);
Tensor sigmoid(Tape& tape, const Tensor& a);
/// Row-wise softmax of a 2-D tensor.
Tensor softmax(Tape& tape, const Tensor& a);

/// Mean of all entries, as a 1-element tensor.
Tensor mean(Tape& tape, const Tensor& a);

/// Elementwise max across same-shaped inputs. The gradient goes only to the
/// input holding the max; ties go to the lowest index.
Tensor max_over_models(Tape& tape, std::span<const Tensor> inputs);

enum class CosineMode {
  kRows,  ///< one cosine per row → [rows]
  kFlat,  ///< one cosine of the flattened tensors → [1]
};

/// Cosine similarity with the denominator guarded as max(‖a‖‖b‖, epsilon).
Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b,
                         CosineMode mode = CosineMode::kRows, double epsilon = 1e-12);

/// Mean binary cross-entropy of probabilities `pred` against constant
/// targets in [0,1]. Probabilities are clamped to [1e-12, 1-1e-12].
Tensor binary_cross_entropy(Tape& tape, const Tensor& pred, const Tensor& target);

/// Mean softmax cross-entropy of logits[n×K] against class indices.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

/// Inverted dropout. rate must lie in [0,1); rate 0 returns `a` unchanged.
Tensor dropout(Tape& tape, const Tensor& a, double rate, RngStream& stream);

/// Column-wise concatenation of 2-D tensors with equal row counts.
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);

}  // namespace rcbm::ops

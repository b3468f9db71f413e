#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rcbm/datagen/planted.hpp"
#include "rcbm/modelzoo/slice.hpp"

namespace rcbm::metrics {

using Matrix = Eigen::MatrixXd;

/// Fraction of positions where the two label sequences differ.
double hamming(std::span<const int> a, std::span<const int> b);
double accuracy(std::span<const int> preds, std::span<const int> labels);
/// Mean agreement of thresholded probabilities with binary concepts.
double concept_accuracy(std::span<const double> probs, std::span<const double> concepts,
                        double threshold = 0.5);

/// Cosine of the doubly centered Gram matrices Z1·Z1ᵀ and Z2·Z2ᵀ.
/// Throws DegenerateError when either centered Gram is zero.
double linear_cka(const Matrix& Z1, const Matrix& Z2);

/// Exact Shapley values of a linear classifier's class-k logit against a
/// background μ: φ_j = w_kj·(x_j − μ_j). W is K×p row-major.
std::vector<double> shap_linear(std::span<const double> W, std::size_t K, std::size_t p,
                                std::span<const double> x, std::span<const double> mu,
                                std::size_t k);

/// Indices of the k largest entries, ties to the lower index.
std::vector<std::size_t> top_k(std::span<const double> phi, std::size_t k);

struct AttributionVector {
  std::size_t model = 0;
  std::vector<double> phi;
  std::vector<std::size_t> top_k_set;
};

/// Mean |φ| over the rows of Z at each row's predicted class, with the row
/// mean of Z as background. Z is n×p concept probabilities.
AttributionVector attribution_vector(const modelzoo::Classifier& classifier, const Matrix& Z,
                                     std::size_t model, std::size_t k = 10);

struct SimilarityMatrix {
  std::string metric;
  Matrix values;
  std::optional<double> off_mean;  // undefined for M = 1

  double operator()(std::size_t a, std::size_t b) const { return values(a, b); }
};

/// (2/(M(M−1)))·Σ_{a<b} S_ab, or nullopt when M < 2.
std::optional<double> off_diagonal_mean(const Matrix& values);

/// Symmetric matrix from a pairwise function evaluated for a < b.
template <class Pairwise>
SimilarityMatrix pairwise_matrix(std::string metric, std::size_t M, double diagonal, Pairwise f) {
  SimilarityMatrix s{std::move(metric), Matrix::Constant(M, M, diagonal), std::nullopt};
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = a + 1; b < M; ++b) {
      const double v = f(a, b);
      s.values(a, b) = v;
      s.values(b, a) = v;
    }
  }
  s.off_mean = off_diagonal_mean(s.values);
  return s;
}

/// Cosine of φ vectors; throws DegenerateError on a zero vector.
SimilarityMatrix shap_similarity(std::span<const AttributionVector> vectors);
/// |∪ top-k sets| with each set recomputed at k.
std::size_t union_size(std::span<const AttributionVector> vectors, std::size_t k);

struct EigvecSimilarity {
  std::size_t layer = 0;
  SimilarityMatrix similarity;
  // Members whose top-k (or k-th vs k+1-th) singular values repeat, making
  // index pairing ambiguous.
  std::vector<std::size_t> degenerate_models;
};

/// Mean |cos| of index-paired top-k right singular vectors of the effective
/// weights at `layer`.
EigvecSimilarity eigvec_similarity(const modelzoo::RashomonSlice& slice, std::size_t layer,
                                   std::size_t k = 16);
/// True when any of the top k+1 singular values repeat (relative 1e-8).
bool repeated_singular_values(const Matrix& A, std::size_t k);
/// Same measure on two explicit matrices.
double eigvec_pair_similarity(const Matrix& A, const Matrix& B, std::size_t k);

/// Per-member predictions of a slice on fixed inputs (eval mode).
struct SlicePredictions {
  std::vector<Matrix> concept_probs;           // n × p
  std::vector<std::vector<int>> class_preds;   // n
};
SlicePredictions predict_slice(const modelzoo::RashomonSlice& slice, const datagen::Subset& eval);

/// Mean per-sample cosine of two members' concept-probability rows.
double concept_cosine(const Matrix& Z1, const Matrix& Z2);

struct ReportOptions {
  std::size_t shap_k = 10;
  std::vector<std::size_t> union_ks = {3, 10};
  std::size_t eigvec_k = 16;
};

struct Report {
  std::string config_digest;
  std::vector<double> task_accuracy;
  std::vector<double> concept_accuracy;
  std::vector<AttributionVector> attributions;
  std::vector<SimilarityMatrix> matrices;  // hamming, concept_cka, concept_cosine, shap
  std::vector<std::pair<std::size_t, std::size_t>> union_sizes;  // (k, size)
  std::vector<EigvecSimilarity> eigvec;
  std::vector<std::string> notes;  // metrics skipped as undefined

  const SimilarityMatrix* matrix(const std::string& metric) const;
  std::optional<std::size_t> union_at(std::size_t k) const;
};

Report evaluate_slice(const modelzoo::RashomonSlice& slice, const datagen::Subset& eval,
                      const std::string& config_digest, const ReportOptions& options = {});

nlohmann::json to_json(const SimilarityMatrix& s);
nlohmann::json to_json(const Report& r);

}  // namespace rcbm::metrics

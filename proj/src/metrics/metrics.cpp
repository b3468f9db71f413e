#include "rcbm/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rcbm/tensorcore/error.hpp"

namespace rcbm::metrics {

using nlohmann::json;

namespace {

constexpr double kDegenerateTol = 1e-12;
constexpr double kSpectrumTol = 1e-8;

Matrix to_matrix(const Tensor& t) {
  Matrix out(t.rows(), t.cols());
  const auto v = t.values();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out(i, j) = v[i * t.cols() + j];
  }
  return out;
}

Matrix centered_gram(const Matrix& Z) {
  const Matrix K = Z * Z.transpose();
  const Eigen::Index n = K.rows();
  const Matrix H = Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
  return H * K * H;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateError("cosine of a zero vector");
  return dot / std::sqrt(na * nb);
}

}  // namespace

double hamming(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ShapeError("hamming: length mismatch");
  if (a.empty()) throw ShapeError("hamming: empty input");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (preds.empty()) throw ShapeError("accuracy: empty input");
  return 1.0 - hamming(preds, labels);
}

double concept_accuracy(std::span<const double> probs, std::span<const double> concepts,
                        double threshold) {
  if (probs.size() != concepts.size()) throw ShapeError("concept_accuracy: length mismatch");
  if (probs.empty()) throw ShapeError("concept_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    hits += (probs[i] >= threshold) == (concepts[i] >= 0.5);
  }
  return static_cast<double>(hits) / static_cast<double>(probs.size());
}

double linear_cka(const Matrix& Z1, const Matrix& Z2) {
  if (Z1.rows() != Z2.rows()) throw ShapeError("linear_cka: row counts differ");
  if (Z1.rows() < 2) throw ShapeError("linear_cka: need at least two samples");
  const Matrix A = centered_gram(Z1);
  const Matrix B = centered_gram(Z2);
  const double aa = (A.array() * A.array()).sum();
  const double bb = (B.array() * B.array()).sum();
  const double raw1 = (Z1 * Z1.transpose()).norm();
  const double raw2 = (Z2 * Z2.transpose()).norm();
  if (std::sqrt(aa) <= kDegenerateTol * std::max(raw1, 1.0) ||
      std::sqrt(bb) <= kDegenerateTol * std::max(raw2, 1.0)) {
    throw DegenerateError("linear_cka: constant representation");
  }
  const double ab = (A.array() * B.array()).sum();
  return std::clamp(ab / std::sqrt(aa * bb), 0.0, 1.0);
}

std::vector<double> shap_linear(std::span<const double> W, std::size_t K, std::size_t p,
                                std::span<const double> x, std::span<const double> mu,
                                std::size_t k) {
  if (W.size() != K * p || x.size() != p || mu.size() != p) {
    throw ShapeError("shap_linear: dimension mismatch");
  }
  if (k >= K) throw ShapeError("shap_linear: class index out of range");
  std::vector<double> phi(p);
  for (std::size_t j = 0; j < p; ++j) phi[j] = W[k * p + j] * (x[j] - mu[j]);
  return phi;
}

std::vector<std::size_t> top_k(std::span<const double> phi, std::size_t k) {
  std::vector<std::size_t> idx(phi.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&phi](std::size_t a, std::size_t b) { return phi[a] > phi[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

AttributionVector attribution_vector(const modelzoo::Classifier& classifier, const Matrix& Z,
                                     std::size_t model, std::size_t k) {
  const std::size_t n = static_cast<std::size_t>(Z.rows());
  const std::size_t p = static_cast<std::size_t>(Z.cols());
  const std::size_t K = classifier.W.rows();
  if (n == 0) throw ShapeError("attribution_vector: empty evaluation set");
  if (classifier.W.cols() != p) throw ShapeError("attribution_vector: concept count mismatch");
  const auto W = classifier.W.values();
  const auto b = classifier.b.values();

  std::vector<double> mu(p, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) mu[j] += Z(i, j);
  }
  for (double& v : mu) v /= static_cast<double>(n);

  AttributionVector out;
  out.model = model;
  out.phi.assign(p, 0.0);
  std::vector<double> x(p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) x[j] = Z(i, j);
    std::size_t pred = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < K; ++c) {
      double logit = b[c];
      for (std::size_t j = 0; j < p; ++j) logit += W[c * p + j] * x[j];
      if (logit > best) best = logit, pred = c;
    }
    const auto phi = shap_linear(W, K, p, x, mu, pred);
    for (std::size_t j = 0; j < p; ++j) out.phi[j] += std::abs(phi[j]);
  }
  for (double& v : out.phi) v /= static_cast<double>(n);
  out.top_k_set = top_k(out.phi, k);
  return out;
}

std::optional<double> off_diagonal_mean(const Matrix& values) {
  const auto M = static_cast<std::size_t>(values.rows());
  if (M < 2) return std::nullopt;
  double sum = 0.0;
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = a + 1; b < M; ++b) sum += values(a, b);
  }
  return 2.0 * sum / static_cast<double>(M * (M - 1));
}

SimilarityMatrix shap_similarity(std::span<const AttributionVector> vectors) {
  return pairwise_matrix("shap", vectors.size(), 1.0, [&](std::size_t a, std::size_t b) {
    if (vectors[a].phi.size() != vectors[b].phi.size()) {
      throw ShapeError("shap_similarity: concept spaces differ");
    }
    return cosine(vectors[a].phi, vectors[b].phi);
  });
}

std::size_t union_size(std::span<const AttributionVector> vectors, std::size_t k) {
  std::set<std::size_t> all;
  for (const auto& v : vectors) {
    for (std::size_t j : top_k(v.phi, k)) all.insert(j);
  }
  return all.size();
}

double eigvec_pair_similarity(const Matrix& A, const Matrix& B, std::size_t k) {
  if (A.cols() != B.cols()) throw ShapeError("eigvec_similarity: input dimensions differ");
  const auto limit = static_cast<std::size_t>(std::min({A.rows(), A.cols(), B.rows()}));
  if (k == 0 || k > limit) throw DegenerateError("eigvec_similarity: k exceeds matrix rank");
  const Eigen::JacobiSVD<Matrix> sa(A, Eigen::ComputeFullV);
  const Eigen::JacobiSVD<Matrix> sb(B, Eigen::ComputeFullV);
  for (const auto* s : {&sa, &sb}) {
    const auto& sv = s->singularValues();
    if (sv(static_cast<Eigen::Index>(k) - 1) <= kSpectrumTol * std::max(sv(0), 1e-300)) {
      throw DegenerateError("eigvec_similarity: k exceeds matrix rank");
    }
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    const double c = sa.matrixV().col(idx).dot(sb.matrixV().col(idx));
    sum += std::min(1.0, std::abs(c));
  }
  return sum / static_cast<double>(k);
}

bool repeated_singular_values(const Matrix& A, std::size_t k) {
  const Eigen::JacobiSVD<Matrix> svd(A);
  const auto& sv = svd.singularValues();
  const auto top = std::min<Eigen::Index>(static_cast<Eigen::Index>(k) + 1, sv.size());
  for (Eigen::Index i = 0; i + 1 < top; ++i) {
    if (sv(i) - sv(i + 1) <= kSpectrumTol * sv(0)) return true;
  }
  return false;
}

EigvecSimilarity eigvec_similarity(const modelzoo::RashomonSlice& slice, std::size_t layer,
                                   std::size_t k) {
  if (layer >= slice.layers()) throw ConfigError("layer", "no such backbone layer");
  std::vector<Matrix> weights;
  EigvecSimilarity out;
  out.layer = layer;
  for (std::size_t m = 0; m < slice.models(); ++m) {
    weights.push_back(to_matrix(modelzoo::effective_weight(slice, m, layer)));
    if (repeated_singular_values(weights.back(), k)) out.degenerate_models.push_back(m);
  }
  out.similarity = pairwise_matrix(
      "eigvec_layer" + std::to_string(layer), slice.models(), 1.0,
      [&](std::size_t a, std::size_t b) { return eigvec_pair_similarity(weights[a], weights[b], k); });
  return out;
}

double concept_cosine(const Matrix& Z1, const Matrix& Z2) {
  if (Z1.rows() != Z2.rows() || Z1.cols() != Z2.cols()) {
    throw ShapeError("concept_cosine: shape mismatch");
  }
  if (Z1.rows() == 0) throw ShapeError("concept_cosine: empty input");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < Z1.rows(); ++i) {
    const double na = Z1.row(i).squaredNorm();
    const double nb = Z2.row(i).squaredNorm();
    if (na == 0.0 || nb == 0.0) throw DegenerateError("concept_cosine: zero concept vector");
    sum += Z1.row(i).dot(Z2.row(i)) / std::sqrt(na * nb);
  }
  return sum / static_cast<double>(Z1.rows());
}

SlicePredictions predict_slice(const modelzoo::RashomonSlice& slice, const datagen::Subset& eval) {
  if (eval.rows == 0) throw ShapeError("predict_slice: empty evaluation set");
  const Tensor X = Tensor::from({eval.rows, eval.input_dim}, eval.X);
  Tape tape;
  tape.set_recording(false);
  SlicePredictions out;
  for (std::size_t m = 0; m < slice.models(); ++m) {
    const auto f = modelzoo::slice_forward(tape, slice, X, m, false, 0);
    out.concept_probs.push_back(to_matrix(f.concept_probs));
    const std::size_t K = f.class_logits.cols();
    const auto logits = f.class_logits.values();
    std::vector<int> preds(eval.rows);
    for (std::size_t i = 0; i < eval.rows; ++i) {
      const auto row = logits.subspan(i * K, K);
      preds[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    out.class_preds.push_back(std::move(preds));
  }
  return out;
}

const SimilarityMatrix* Report::matrix(const std::string& metric) const {
  for (const auto& s : matrices) {
    if (s.metric == metric) return &s;
  }
  return nullptr;
}

std::optional<std::size_t> Report::union_at(std::size_t k) const {
  for (const auto& [kk, size] : union_sizes) {
    if (kk == k) return size;
  }
  return std::nullopt;
}

Report evaluate_slice(const modelzoo::RashomonSlice& slice, const datagen::Subset& eval,
                      const std::string& config_digest, const ReportOptions& options) {
  if (slice.config().concepts != eval.concepts || slice.config().input_dim != eval.input_dim) {
    throw ShapeError("evaluate_slice: slice and data dimensions differ");
  }
  const std::size_t M = slice.models();
  const SlicePredictions pred = predict_slice(slice, eval);
  Report r;
  r.config_digest = config_digest;
  for (std::size_t m = 0; m < M; ++m) {
    r.task_accuracy.push_back(accuracy(pred.class_preds[m], eval.Y));
    const Matrix& Z = pred.concept_probs[m];
    std::vector<double> flat(eval.rows * eval.concepts);
    for (std::size_t i = 0; i < eval.rows; ++i) {
      for (std::size_t j = 0; j < eval.concepts; ++j) flat[i * eval.concepts + j] = Z(i, j);
    }
    r.concept_accuracy.push_back(concept_accuracy(flat, eval.C));
    r.attributions.push_back(attribution_vector(slice.classifier(m), Z, m, options.shap_k));
  }

  // Undefined pairwise metrics are recorded as notes instead of aborting the report.
  auto guarded = [&r](const std::string& name, auto&& build) {
    try {
      r.matrices.push_back(build());
    } catch (const DegenerateError& e) {
      r.notes.push_back(name + ": " + e.what());
    }
  };
  r.matrices.push_back(pairwise_matrix("hamming", M, 0.0, [&](std::size_t a, std::size_t b) {
    return hamming(pred.class_preds[a], pred.class_preds[b]);
  }));
  guarded("concept_cka", [&] {
    return pairwise_matrix("concept_cka", M, 1.0, [&](std::size_t a, std::size_t b) {
      return linear_cka(pred.concept_probs[a], pred.concept_probs[b]);
    });
  });
  guarded("concept_cosine", [&] {
    return pairwise_matrix("concept_cosine", M, 1.0, [&](std::size_t a, std::size_t b) {
      return concept_cosine(pred.concept_probs[a], pred.concept_probs[b]);
    });
  });
  guarded("shap", [&] { return shap_similarity(r.attributions); });
  for (std::size_t k : options.union_ks) r.union_sizes.emplace_back(k, union_size(r.attributions, k));
  for (std::size_t layer = 0; layer < slice.layers(); ++layer) {
    try {
      r.eigvec.push_back(eigvec_similarity(slice, layer, options.eigvec_k));
    } catch (const DegenerateError& e) {
      r.notes.push_back("eigvec layer " + std::to_string(layer) + ": " + e.what());
    }
  }
  return r;
}

json to_json(const SimilarityMatrix& s) {
  json rows = json::array();
  for (Eigen::Index a = 0; a < s.values.rows(); ++a) {
    json row = json::array();
    for (Eigen::Index b = 0; b < s.values.cols(); ++b) row.push_back(s.values(a, b));
    rows.push_back(row);
  }
  return json{{"metric", s.metric},
              {"values", rows},
              {"off_mean", s.off_mean ? json(*s.off_mean) : json(nullptr)}};
}

json to_json(const Report& r) {
  json matrices = json::object();
  for (const auto& s : r.matrices) matrices[s.metric] = to_json(s);
  json unions = json::object();
  for (const auto& [k, size] : r.union_sizes) unions[std::to_string(k)] = size;
  json attributions = json::array();
  for (const auto& a : r.attributions) {
    attributions.push_back({{"model", a.model}, {"phi", a.phi}, {"top_k", a.top_k_set}});
  }
  json eigvec = json::array();
  for (const auto& e : r.eigvec) {
    eigvec.push_back({{"layer", e.layer},
                      {"similarity", to_json(e.similarity)},
                      {"degenerate_models", e.degenerate_models}});
  }
  return json{{"config_digest", r.config_digest},
              {"models", r.task_accuracy.size()},
              {"task_accuracy", r.task_accuracy},
              {"concept_accuracy", r.concept_accuracy},
              {"similarity", matrices},
              {"union_size", unions},
              {"eigvec", eigvec},
              {"attributions", attributions},
              {"notes", r.notes}};
}

}  // namespace rcbm::metrics

#include "rcbm/tensorcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/kernels.hpp"
#include "rcbm/tensorcore/rng.hpp"

namespace rcbm::ops {

namespace {

void require_finite(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined input tensor");
  if (!all_finite(t.values())) throw NumericError(std::string(op) + ": non-finite input");
}

void require_2d(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
  }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

constexpr double kProbabilityClamp = 1e-12;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b) {
  require_finite("matmul", a);
  require_finite("matmul", b);
  require_2d("matmul", a);
  require_2d("matmul", b);
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  if ((transpose_b ? b.cols() : b.rows()) != k) mismatch("matmul", a, b);

  const bool record = tape.should_record(std::vector<Tensor>{a, b});
  Tensor out = Tensor::intermediate({m, n}, record);
  if (transpose_b) {
    kernels::gemm_nt(m, k, n, a.values().data(), b.values().data(), out.mutable_values().data());
  } else {
    kernels::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.mutable_values().data());
  }
  if (!record) return out;

  tape.record(OpKind::kMatmul, {a, b}, {out},
              [m, k, n, transpose_b](std::span<const Tensor> in, std::span<const Tensor> outs) {
                Tensor lhs = in[0];
                Tensor rhs = in[1];
                const double* g = outs[0].grad().data();
                if (lhs.requires_grad()) {
                  std::vector<double> d(m * k);
                  if (transpose_b) {
                    kernels::gemm_nn(m, n, k, g, rhs.values().data(), d.data());
                  } else {
                    kernels::gemm_nt(m, n, k, g, rhs.values().data(), d.data());
                  }
                  lhs.accumulate_grad(d);
                }
                if (rhs.requires_grad()) {
                  std::vector<double> d(k * n);
                  if (transpose_b) {
                    kernels::gemm_tn(n, m, k, g, lhs.values().data(), d.data());
                  } else {
                    kernels::gemm_tn(k, m, n, lhs.values().data(), g, d.data());
                  }
                  rhs.accumulate_grad(d);
                }
              });
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_finite("add", a);
  require_finite("add", b);
  enum class Broadcast { kNone, kRow, kScalar };
  Broadcast mode;
  if (a.shape() == b.shape()) {
    mode = Broadcast::kNone;
  } else if (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols()) {
    mode = Broadcast::kRow;
  } else if (b.size() == 1) {
    mode = Broadcast::kScalar;
  } else {
    mismatch("add", a, b);
  }

  const bool record = tape.should_record(std::vector<Tensor>{a, b});
  Tensor out = Tensor::intermediate(a.shape(), record);
  const double* x = a.values().data();
  const double* y = b.values().data();
  double* o = out.mutable_values().data();
  const std::size_t size = a.size();
  switch (mode) {
    case Broadcast::kNone:
      for (std::size_t i = 0; i < size; ++i) o[i] = x[i] + y[i];
      break;
    case Broadcast::kRow:
      kernels::add_row(a.rows(), a.cols(), x, y, o);
      break;
    case Broadcast::kScalar:
      for (std::size_t i = 0; i < size; ++i) o[i] = x[i] + y[0];
      break;
  }
  if (!record) return out;

  tape.record(OpKind::kAdd, {a, b}, {out},
              [mode](std::span<const Tensor> in, std::span<const Tensor> outs) {
                Tensor lhs = in[0];
                Tensor rhs = in[1];
                const auto g = outs[0].grad();
                if (lhs.requires_grad()) lhs.accumulate_grad(g);
                if (!rhs.requires_grad()) return;
                switch (mode) {
                  case Broadcast::kNone:
                    rhs.accumulate_grad(g);
                    break;
                  case Broadcast::kRow: {
                    std::vector<double> d(lhs.cols());
                    kernels::column_sums(lhs.rows(), lhs.cols(), g.data(), d.data());
                    rhs.accumulate_grad(d);
                    break;
                  }
                  case Broadcast::kScalar: {
                    double total = 0.0;
                    for (double v : g) total += v;
                    rhs.accumulate_grad(std::span<const double>(&total, 1));
                    break;
                  }
                }
              });
  return out;
}

Tensor add(Tape& tape, std::span<const Tensor> terms) {
  if (terms.empty()) throw ShapeError("add: no terms");
  for (const Tensor& t : terms) {
    require_finite("add", t);
    if (t.shape() != terms[0].shape()) mismatch("add", terms[0], t);
  }
  const bool record = tape.should_record(terms);
  Tensor out = Tensor::intermediate(terms[0].shape(), record);
  auto o = out.mutable_values();
  std::copy(terms[0].values().begin(), terms[0].values().end(), o.begin());
  for (std::size_t t = 1; t < terms.size(); ++t) {
    const auto v = terms[t].values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
  }
  if (!record) return out;

  tape.record(OpKind::kAdd, {terms.begin(), terms.end()}, {out},
              [](std::span<const Tensor> in, std::span<const Tensor> outs) {
                for (Tensor term : in) {
                  if (term.requires_grad()) term.accumulate_grad(outs[0].grad());
                }
              });
  return out;
}

Tensor mul_scalar(Tape& tape, const Tensor& a, double factor) {
  require_finite("mul_scalar", a);
  if (!std::isfinite(factor)) throw NumericError("mul_scalar: non-finite factor");
  const bool record = tape.should_record(std::span<const Tensor>(&a, 1));
  Tensor out = Tensor::intermediate(a.shape(), record);
  auto o = out.mutable_values();
  const auto x = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (!record) return out;

  tape.record(OpKind::kMulScalar, {a}, {out},
              [factor](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                std::vector<double> d(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * factor;
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor relu(Tape& tape, const Tensor& a) {
  require_finite("relu", a);
  const bool record = tape.should_record(std::span<const Tensor>(&a, 1));
  Tensor out = Tensor::intermediate(a.shape(), record);
  auto o = out.mutable_values();
  const auto x = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (tape.tracking_branches()) {
    for (std::size_t i = 0; i < o.size(); ++i) tape.note_branch(x[i] > 0.0);
  }
  if (!record) return out;

  tape.record(OpKind::kRelu, {a}, {out},
              [](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                const auto y = outs[0].values();
                std::vector<double> d(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) d[i] = y[i] > 0.0 ? g[i] : 0.0;
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
  require_finite("sigmoid", a);
  const bool record = tape.should_record(std::span<const Tensor>(&a, 1));
  Tensor out = Tensor::intermediate(a.shape(), record);
  auto o = out.mutable_values();
  const auto x = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = stable_sigmoid(x[i]);
  if (!record) return out;

  tape.record(OpKind::kSigmoid, {a}, {out},
              [](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                const auto y = outs[0].values();
                std::vector<double> d(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * y[i] * (1.0 - y[i]);
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor softmax(Tape& tape, const Tensor& a) {
  require_finite("softmax", a);
  require_2d("softmax", a);
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  const bool record = tape.should_record(std::span<const Tensor>(&a, 1));
  Tensor out = Tensor::intermediate(a.shape(), record);
  auto o = out.mutable_values();
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * cols;
    const double top = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[r * cols + j] = std::exp(row[j] - top);
      total += o[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] /= total;
  }
  if (!record) return out;

  tape.record(OpKind::kSoftmax, {a}, {out},
              [rows, cols](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                const auto y = outs[0].values();
                std::vector<double> d(g.size());
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
                  for (std::size_t j = 0; j < cols; ++j) {
                    d[r * cols + j] = y[r * cols + j] * (g[r * cols + j] - dot);
                  }
                }
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor mean(Tape& tape, const Tensor& a) {
  require_finite("mean", a);
  const bool record = tape.should_record(std::span<const Tensor>(&a, 1));
  Tensor out = Tensor::intermediate({1}, record);
  double total = 0.0;
  for (double v : a.values()) total += v;
  const double count = static_cast<double>(a.size());
  out.mutable_values()[0] = total / count;
  if (!record) return out;

  tape.record(OpKind::kMean, {a}, {out},
              [count](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const double g = outs[0].grad()[0] / count;
                Tensor(in[0]).accumulate_grad(std::vector<double>(in[0].size(), g));
              });
  return out;
}

Tensor max_over_models(Tape& tape, std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("max_over_models: no inputs");
  for (const Tensor& t : inputs) {
    require_finite("max_over_models", t);
    if (t.shape() != inputs[0].shape()) mismatch("max_over_models", inputs[0], t);
  }
  const std::size_t size = inputs[0].size();
  const bool record = tape.should_record(inputs);
  Tensor out = Tensor::intermediate(inputs[0].shape(), record);
  auto o = out.mutable_values();
  auto winner = std::make_shared<std::vector<std::size_t>>(size, 0);
  for (std::size_t e = 0; e < size; ++e) {
    double best = inputs[0].values()[e];
    for (std::size_t m = 1; m < inputs.size(); ++m) {
      // Strict comparison keeps the lowest index on ties.
      if (inputs[m].values()[e] > best) {
        best = inputs[m].values()[e];
        (*winner)[e] = m;
      }
    }
    o[e] = best;
  }
  if (tape.tracking_branches()) {
    for (std::size_t e = 0; e < size; ++e) tape.note_branch((*winner)[e]);
  }
  if (!record) return out;

  tape.record(OpKind::kMaxOverModels, {inputs.begin(), inputs.end()}, {out},
              [winner](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                for (std::size_t m = 0; m < in.size(); ++m) {
                  if (!in[m].requires_grad()) continue;
                  std::vector<double> d(g.size(), 0.0);
                  bool any = false;
                  for (std::size_t e = 0; e < g.size(); ++e) {
                    if ((*winner)[e] == m) {
                      d[e] = g[e];
                      any = true;
                    }
                  }
                  if (any) Tensor(in[m]).accumulate_grad(d);
                }
              });
  return out;
}

Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b, CosineMode mode,
                         double epsilon) {
  require_finite("cosine_similarity", a);
  require_finite("cosine_similarity", b);
  if (a.shape() != b.shape()) mismatch("cosine_similarity", a, b);
  if (mode == CosineMode::kRows) require_2d("cosine_similarity", a);

  const std::size_t groups = mode == CosineMode::kRows ? a.rows() : 1;
  const std::size_t width = a.size() / groups;
  struct Stats {
    std::vector<double> norm_a, norm_b, denom, cosine;
  };
  auto stats = std::make_shared<Stats>();
  stats->norm_a.resize(groups);
  stats->norm_b.resize(groups);
  stats->denom.resize(groups);
  stats->cosine.resize(groups);

  const auto x = a.values();
  const auto y = b.values();
  for (std::size_t r = 0; r < groups; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double u = x[r * width + j];
      const double v = y[r * width + j];
      dot += u * v;
      aa += u * u;
      bb += v * v;
    }
    stats->norm_a[r] = std::sqrt(aa);
    stats->norm_b[r] = std::sqrt(bb);
    stats->denom[r] = std::max(stats->norm_a[r] * stats->norm_b[r], epsilon);
    if (tape.tracking_branches()) tape.note_branch(stats->norm_a[r] * stats->norm_b[r] <= epsilon);
    stats->cosine[r] = dot / stats->denom[r];
  }

  const bool record = tape.should_record(std::vector<Tensor>{a, b});
  Tensor out = Tensor::intermediate({groups}, record);
  std::copy(stats->cosine.begin(), stats->cosine.end(), out.mutable_values().begin());
  if (!record) return out;

  tape.record(
      OpKind::kCosineSimilarity, {a, b}, {out},
      [stats, groups, width, epsilon](std::span<const Tensor> in, std::span<const Tensor> outs) {
        const auto g = outs[0].grad();
        const auto x = in[0].values();
        const auto y = in[1].values();
        std::vector<double> da(x.size()), db(y.size());
        for (std::size_t r = 0; r < groups; ++r) {
          const double na = stats->norm_a[r];
          const double nb = stats->norm_b[r];
          const double denom = stats->denom[r];
          const double c = stats->cosine[r];
          const bool guarded = na * nb <= epsilon;
          for (std::size_t j = 0; j < width; ++j) {
            const std::size_t i = r * width + j;
            if (guarded) {
              da[i] = g[r] * y[i] / denom;
              db[i] = g[r] * x[i] / denom;
            } else {
              da[i] = g[r] * (y[i] / denom - c * x[i] / (na * na));
              db[i] = g[r] * (x[i] / denom - c * y[i] / (nb * nb));
            }
          }
        }
        if (in[0].requires_grad()) Tensor(in[0]).accumulate_grad(da);
        if (in[1].requires_grad()) Tensor(in[1]).accumulate_grad(db);
      });
  return out;
}

Tensor binary_cross_entropy(Tape& tape, const Tensor& pred, const Tensor& target) {
  require_finite("binary_cross_entropy", pred);
  require_finite("binary_cross_entropy", target);
  if (pred.shape() != target.shape()) mismatch("binary_cross_entropy", pred, target);
  for (double t : target.values()) {
    if (t < 0.0 || t > 1.0) throw ShapeError("binary_cross_entropy: targets must lie in [0,1]");
  }
  for (double p : pred.values()) {
    if (p < 0.0 || p > 1.0) {
      throw ShapeError("binary_cross_entropy: predictions must be probabilities in [0,1]");
    }
  }
  const auto p = pred.values();
  const auto t = target.values();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    if (tape.tracking_branches()) tape.note_branch(q != p[i]);
    total -= t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q);
  }
  const double count = static_cast<double>(p.size());

  const bool record = tape.should_record(std::vector<Tensor>{pred, target});
  Tensor out = Tensor::intermediate({1}, record);
  out.mutable_values()[0] = total / count;
  if (!record) return out;

  tape.record(OpKind::kBinaryCrossEntropy, {pred, target}, {out},
              [count](std::span<const Tensor> in, std::span<const Tensor> outs) {
                if (!in[0].requires_grad()) return;
                const double g = outs[0].grad()[0] / count;
                const auto p = in[0].values();
                const auto t = in[1].values();
                std::vector<double> d(p.size());
                for (std::size_t i = 0; i < p.size(); ++i) {
                  const double q = std::clamp(p[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
                  d[i] = g * (q - t[i]) / (q * (1.0 - q));
                }
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  require_finite("softmax_cross_entropy", logits);
  require_2d("softmax_cross_entropy", logits);
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.cols();
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(cols) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(rows * cols);
  const auto x = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * cols;
    const double top = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(row[j] - top);
    const double log_norm = top + std::log(sum);
    for (std::size_t j = 0; j < cols; ++j) (*probs)[r * cols + j] = std::exp(row[j] - log_norm);
    total += log_norm - row[labels[r]];
  }
  const double count = static_cast<double>(rows);

  const bool record = tape.should_record(std::span<const Tensor>(&logits, 1));
  Tensor out = Tensor::intermediate({1}, record);
  out.mutable_values()[0] = total / count;
  if (!record) return out;

  std::vector<int> targets(labels.begin(), labels.end());
  tape.record(OpKind::kSoftmaxCrossEntropy, {logits}, {out},
              [probs, targets = std::move(targets), cols, count](std::span<const Tensor> in,
                                                                 std::span<const Tensor> outs) {
                const double g = outs[0].grad()[0] / count;
                std::vector<double> d(*probs);
                for (std::size_t r = 0; r < targets.size(); ++r) d[r * cols + targets[r]] -= 1.0;
                for (double& v : d) v *= g;
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor dropout(Tape& tape, const Tensor& a, double rate, RngStream& stream) {
  require_finite("dropout", a);
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ShapeError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;

  const std::uint64_t key = derive_seed(stream.seed(), stream.next_index());
  const double keep_scale = 1.0 / (1.0 - rate);
  const bool record = tape.should_record(std::span<const Tensor>(&a, 1));
  // The mask is activation memory, so it lives in a metered buffer.
  auto mask = std::make_shared<Buffer>(a.size());
  for (std::size_t e = 0; e < a.size(); ++e) {
    (*mask)[e] = unit_from_bits(mix64(key + e)) >= rate ? keep_scale : 0.0;
  }
  Tensor out = Tensor::intermediate(a.shape(), record);
  auto o = out.mutable_values();
  const auto x = a.values();
  for (std::size_t e = 0; e < o.size(); ++e) o[e] = x[e] * (*mask)[e];
  if (!record) return out;

  tape.record(OpKind::kDropout, {a}, {out},
              [mask](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                std::vector<double> d(g.size());
                for (std::size_t e = 0; e < g.size(); ++e) d[e] = g[e] * (*mask)[e];
                Tensor(in[0]).accumulate_grad(d);
              });
  return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  std::size_t total_cols = 0;
  for (const Tensor& t : parts) {
    require_finite("concat_cols", t);
    require_2d("concat_cols", t);
    if (t.rows() != parts[0].rows()) mismatch("concat_cols", parts[0], t);
    total_cols += t.cols();
  }
  const std::size_t rows = parts[0].rows();
  const bool record = tape.should_record(parts);
  Tensor out = Tensor::intermediate({rows, total_cols}, record);
  auto o = out.mutable_values();
  std::size_t offset = 0;
  for (const Tensor& t : parts) {
    const auto v = t.values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * t.cols(), t.cols(), o.data() + r * total_cols + offset);
    }
    offset += t.cols();
  }
  if (!record) return out;

  tape.record(OpKind::kConcatCols, {parts.begin(), parts.end()}, {out},
              [rows, total_cols](std::span<const Tensor> in, std::span<const Tensor> outs) {
                const auto g = outs[0].grad();
                std::size_t offset = 0;
                for (Tensor part : in) {
                  const std::size_t c = part.cols();
                  if (part.requires_grad()) {
                    std::vector<double> d(rows * c);
                    for (std::size_t r = 0; r < rows; ++r) {
                      std::copy_n(g.data() + r * total_cols + offset, c, d.data() + r * c);
                    }
                    part.accumulate_grad(d);
                  }
                  offset += c;
                }
              });
  return out;
}

}  // namespace rcbm::ops

#include "rcbm/tensorcore/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>

#include "rcbm/tensorcore/checkpoint.hpp"
#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/ops.hpp"
#include "rcbm/tensorcore/rng.hpp"

namespace rcbm {

std::size_t RandomGraph::parameter_count() const {
  std::size_t total = 0;
  for (const Tensor& p : params) total += p.size();
  return total;
}

namespace {

enum class Activation { kNone, kRelu, kSigmoid };

struct DenseLayer {
  Tensor weight;  // out×in when transposed, in×out otherwise
  Tensor bias;
  bool transposed;
  Activation activation;
};

struct GraphSpec {
  Tensor input;
  std::vector<DenseLayer> layers;
  int dropout_after = -1;
  double dropout_rate = 0.25;
  std::uint64_t dropout_seed = 0;

  // Loss terms; an undefined tensor means the term is absent.
  Tensor ce_head;
  std::vector<int> labels;
  Tensor bce_head;
  Tensor bce_target;
  Tensor cos_head_a;
  Tensor cos_head_b;
  ops::CosineMode cos_mode = ops::CosineMode::kRows;
  std::vector<Tensor> max_heads;
  Tensor softmax_head;
  std::vector<double> weights;
};

Tensor random_tensor(Rng& rng, Shape shape, double stddev, bool requires_grad) {
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), values, requires_grad);
}

Tensor apply(Tape& tape, const DenseLayer& layer, const Tensor& x) {
  Tensor h = ops::matmul(tape, x, layer.weight, layer.transposed);
  h = ops::add(tape, h, layer.bias);
  switch (layer.activation) {
    case Activation::kRelu: return ops::relu(tape, h);
    case Activation::kSigmoid: return ops::sigmoid(tape, h);
    case Activation::kNone: return h;
  }
  return h;
}

Tensor build_graph(Tape& tape, const GraphSpec& spec) {
  ops::RngStream stream(spec.dropout_seed);
  Tensor h = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    h = apply(tape, spec.layers[i], h);
    if (static_cast<int>(i) == spec.dropout_after) {
      h = ops::dropout(tape, h, spec.dropout_rate, stream);
    }
  }

  std::vector<Tensor> terms;
  if (spec.ce_head.defined()) {
    terms.push_back(ops::softmax_cross_entropy(tape, ops::matmul(tape, h, spec.ce_head), spec.labels));
  }
  if (spec.bce_head.defined()) {
    Tensor probs = ops::sigmoid(tape, ops::matmul(tape, h, spec.bce_head, true));
    terms.push_back(ops::binary_cross_entropy(tape, probs, spec.bce_target));
  }
  if (spec.cos_head_a.defined()) {
    Tensor a = ops::matmul(tape, h, spec.cos_head_a);
    Tensor b = ops::sigmoid(tape, ops::matmul(tape, h, spec.cos_head_b));
    terms.push_back(ops::mean(tape, ops::cosine_similarity(tape, a, b, spec.cos_mode)));
  }
  if (!spec.max_heads.empty()) {
    std::vector<Tensor> branches;
    for (const Tensor& head : spec.max_heads) {
      branches.push_back(ops::mean(tape, ops::sigmoid(tape, ops::matmul(tape, h, head))));
    }
    terms.push_back(ops::max_over_models(tape, branches));
  }
  if (spec.softmax_head.defined()) {
    Tensor s = ops::softmax(tape, ops::matmul(tape, h, spec.softmax_head));
    Tensor joined = ops::concat_cols(tape, std::vector<Tensor>{s, h});
    terms.push_back(ops::mean(tape, ops::mul_scalar(tape, joined, 1.5)));
  }

  std::vector<Tensor> scaled;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    scaled.push_back(ops::mul_scalar(tape, terms[i], spec.weights[i]));
  }
  return scaled.size() == 1 ? scaled[0] : ops::add(tape, scaled);
}

}  // namespace

RandomGraph make_random_graph(std::uint64_t seed, std::size_t max_params) {
  Rng rng(derive_seed(seed, 0x67726164ULL));
  auto spec = std::make_shared<GraphSpec>();
  RandomGraph graph;
  std::ostringstream desc;

  const std::size_t batch = 2 + rng.below(5);
  std::size_t width = 2 + rng.below(7);
  const bool input_trainable = rng.bernoulli(0.3);
  spec->input = random_tensor(rng, {batch, width}, 1.0, input_trainable);
  if (input_trainable) graph.params.push_back(spec->input);
  desc << "batch=" << batch << " in=" << width << (input_trainable ? " (trainable)" : "");

  const std::size_t depth = 1 + rng.below(3);
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t out = 2 + rng.below(11);
    DenseLayer layer;
    layer.transposed = rng.bernoulli(0.5);
    const double scale = 1.0 / std::sqrt(static_cast<double>(width));
    layer.weight = layer.transposed ? random_tensor(rng, {out, width}, scale, true)
                                    : random_tensor(rng, {width, out}, scale, true);
    layer.bias = random_tensor(rng, {out}, 0.3, true);
    layer.activation = static_cast<Activation>(rng.below(3));
    graph.params.push_back(layer.weight);
    graph.params.push_back(layer.bias);
    desc << " -> " << out << "[" << "nrs"[static_cast<int>(layer.activation)] << "]";
    spec->layers.push_back(layer);
    width = out;
  }
  if (rng.bernoulli(0.4)) {
    spec->dropout_after = static_cast<int>(rng.below(depth));
    spec->dropout_seed = rng.below(1u << 30);
    desc << " dropout@" << spec->dropout_after;
  }

  const double head_scale = 1.0 / std::sqrt(static_cast<double>(width));
  // Each loss family is included with probability 1/2; at least one is forced.
  unsigned mask = static_cast<unsigned>(rng.below(32));
  if (mask == 0) mask = 1u << rng.below(5);
  if (mask & 1u) {
    const std::size_t classes = 2 + rng.below(4);
    spec->ce_head = random_tensor(rng, {width, classes}, head_scale, true);
    for (std::size_t i = 0; i < batch; ++i) spec->labels.push_back(static_cast<int>(rng.below(classes)));
    graph.params.push_back(spec->ce_head);
    desc << " +ce";
  }
  if (mask & 2u) {
    const std::size_t outputs = 1 + rng.below(4);
    spec->bce_head = random_tensor(rng, {outputs, width}, head_scale, true);
    std::vector<double> target(batch * outputs);
    for (double& t : target) t = rng.uniform();
    spec->bce_target = Tensor::from({batch, outputs}, target);
    graph.params.push_back(spec->bce_head);
    desc << " +bce";
  }
  if (mask & 4u) {
    const std::size_t q = 2 + rng.below(4);
    spec->cos_head_a = random_tensor(rng, {width, q}, head_scale, true);
    spec->cos_head_b = random_tensor(rng, {width, q}, head_scale, true);
    spec->cos_mode = rng.bernoulli(0.5) ? ops::CosineMode::kRows : ops::CosineMode::kFlat;
    graph.params.push_back(spec->cos_head_a);
    graph.params.push_back(spec->cos_head_b);
    desc << " +cos";
  }
  if (mask & 8u) {
    const std::size_t models = 2 + rng.below(3);
    for (std::size_t m = 0; m < models; ++m) {
      spec->max_heads.push_back(random_tensor(rng, {width, 2}, head_scale, true));
      graph.params.push_back(spec->max_heads.back());
    }
    desc << " +max" << models;
  }
  if (mask & 16u) {
    spec->softmax_head = random_tensor(rng, {width, 3}, head_scale, true);
    graph.params.push_back(spec->softmax_head);
    desc << " +softmax";
  }
  const std::size_t terms = static_cast<std::size_t>(std::popcount(mask));
  for (std::size_t i = 0; i < terms; ++i) spec->weights.push_back(0.5 + rng.uniform());

  graph.description = desc.str();
  graph.build = [spec](Tape& tape) { return build_graph(tape, *spec); };
  if (graph.parameter_count() > max_params) {
    throw ShapeError("random graph exceeds parameter budget");
  }
  return graph;
}

constexpr double kMinStep = 1e-4;

struct Extrapolated {
  double value;
  double error;
};

// Ridders' extrapolation of central differences toward h = 0. Returns the
// table entry with the smallest error estimate.
template <class Central>
Extrapolated ridders(Central&& central, double h0) {
  constexpr int kTable = 10;
  constexpr double kShrink = 1.4;
  constexpr double kShrink2 = kShrink * kShrink;
  double a[kTable][kTable];
  double h = h0;
  a[0][0] = central(h);
  double best = a[0][0];
  double best_error = std::numeric_limits<double>::infinity();
  for (int i = 1; i < kTable; ++i) {
    h /= kShrink;
    a[0][i] = central(h);
    double factor = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * factor - a[j - 1][i - 1]) / (factor - 1.0);
      factor *= kShrink2;
      const double error =
          std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (error <= best_error) {
        best_error = error;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= 2.0 * best_error) break;
  }
  return {best, best_error};
}

FiniteDifferenceResult finite_difference_check(const RandomGraph& graph, double step,
                                               double small_threshold) {
  for (Tensor p : graph.params) p.clear_grad();
  {
    Tape tape;
    const Tensor loss = graph.build(tape);
    tape.backward(loss);
  }

  struct Sample {
    double value;
    std::uint64_t signature;
  };
  auto evaluate = [&graph] {
    Tape tape;
    tape.set_recording(false);
    tape.track_branches(true);
    const double value = graph.build(tape).item();
    return Sample{value, tape.branch_signature()};
  };

  FiniteDifferenceResult result;
  for (Tensor param : graph.params) {
    const std::vector<double> analytic = param.grad_or_zero();
    auto values = param.mutable_values();
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double original = values[e];
      const std::uint64_t base = evaluate().signature;
      // Keep the smooth start with the smallest extrapolation error.
      std::optional<Extrapolated> fd;
      for (double h0 = step; h0 >= kMinStep; h0 *= 0.1) {
        bool smooth = true;
        auto central = [&](double h) {
          values[e] = original + h;
          const Sample up = evaluate();
          values[e] = original - h;
          const Sample down = evaluate();
          smooth = smooth && up.signature == base && down.signature == base;
          return (up.value - down.value) / (2.0 * h);
        };
        const Extrapolated estimate = ridders(central, h0);
        if (smooth && (!fd || estimate.error < fd->error)) fd = estimate;
      }
      values[e] = original;
      ++result.entries;
      if (!fd) {
        ++result.kink_entries;
        continue;
      }
      const double diff = std::abs(analytic[e] - fd->value);
      if (std::abs(fd->value) < small_threshold) {
        result.max_small_abs_error = std::max(result.max_small_abs_error, diff);
      } else {
        result.max_relative_error =
            std::max(result.max_relative_error, diff / std::abs(fd->value));
      }
    }
  }
  return result;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  GradcheckReport report;
  for (std::size_t g = 0; g < options.graphs; ++g) {
    const RandomGraph graph = make_random_graph(derive_seed(options.seed, g), options.max_params);
    const FiniteDifferenceResult fd =
        finite_difference_check(graph, options.step, options.small_threshold);
    ++report.graphs;
    report.entries += fd.entries;
    report.kink_entries += fd.kink_entries;
    report.max_relative_error = std::max(report.max_relative_error, fd.max_relative_error);
    report.max_small_abs_error = std::max(report.max_small_abs_error, fd.max_small_abs_error);
    if (fd.max_relative_error >= options.relative_tolerance ||
        fd.max_small_abs_error >= options.small_threshold) {
      std::ostringstream msg;
      msg << "graph " << g << " (" << graph.description << "): relative error "
          << fd.max_relative_error << ", small-entry abs error " << fd.max_small_abs_error;
      report.failures.push_back(msg.str());
    }
  }
  return report;
}

namespace {

struct EquivalenceCase {
  std::string name;
  std::vector<Tensor> params;
  std::function<Tensor(Tape&, bool checkpointed)> build;
};

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<EquivalenceCase> equivalence_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x636b7074ULL));
  std::vector<EquivalenceCase> cases;

  // Two linear+relu layers, optionally with dropout, per region.
  auto two_layer_case = [&rng](std::string name, std::size_t regions, double rate,
                               std::uint64_t dropout_seed) {
    const Tensor x = random_tensor(rng, {4, 5}, 1.0, false);
    std::vector<Tensor> params;
    for (std::size_t r = 0; r < regions; ++r) {
      params.push_back(random_tensor(rng, {6, 5}, 0.5, true));
      params.push_back(random_tensor(rng, {6}, 0.2, true));
      params.push_back(random_tensor(rng, {3, 6}, 0.5, true));
      params.push_back(random_tensor(rng, {3}, 0.2, true));
    }
    auto body = [rate](Tape& tape, std::span<const Tensor> in, ops::RngStream& rng_stream) {
      Tensor h = ops::relu(tape, ops::add(tape, ops::matmul(tape, in[0], in[1], true), in[2]));
      h = ops::dropout(tape, h, rate, rng_stream);
      h = ops::relu(tape, ops::add(tape, ops::matmul(tape, h, in[3], true), in[4]));
      return std::vector<Tensor>{h};
    };
    EquivalenceCase c;
    c.name = std::move(name);
    c.params = params;
    c.build = [x, params, regions, body, dropout_seed](Tape& tape, bool checkpointed) {
      std::vector<Tensor> outs;
      for (std::size_t r = 0; r < regions; ++r) {
        std::vector<Tensor> inputs{x, params[4 * r], params[4 * r + 1], params[4 * r + 2],
                                   params[4 * r + 3]};
        const std::uint64_t region_seed = derive_seed(dropout_seed, r);
        if (checkpointed) {
          outs.push_back(checkpoint_region(tape, inputs, region_seed, body)[0]);
        } else {
          ops::RngStream stream(region_seed);
          outs.push_back(body(tape, inputs, stream)[0]);
        }
      }
      std::vector<Tensor> scores;
      for (const Tensor& o : outs) scores.push_back(ops::mean(tape, ops::sigmoid(tape, o)));
      Tensor loss = ops::max_over_models(tape, scores);
      if (outs.size() >= 2) {
        loss = ops::add(tape, loss,
                        ops::mean(tape, ops::cosine_similarity(tape, outs[0], outs[1])));
      }
      return loss;
    };
    return c;
  };

  cases.push_back(two_layer_case("two-layer linear+relu", 1, 0.0, 0));
  cases.push_back(two_layer_case("dropout 0.1 seed 7", 1, 0.1, 7));
  cases.push_back(two_layer_case("three regions with dropout", 3, 0.2, rng.below(1u << 30)));
  return cases;
}

}  // namespace

void run_checkpoint_equivalence(const GradcheckOptions& options, GradcheckReport& report) {
  for (const EquivalenceCase& c : equivalence_cases(options.seed)) {
    std::vector<std::vector<double>> values(2);
    std::vector<std::vector<std::vector<double>>> grads(2);
    for (int mode = 0; mode < 2; ++mode) {
      for (Tensor p : c.params) p.clear_grad();
      Tape tape;
      const Tensor loss = c.build(tape, mode == 1);
      values[mode] = {loss.item()};
      tape.backward(loss);
      for (const Tensor& p : c.params) grads[mode].push_back(p.grad_or_zero());
    }
    double worst = max_abs_diff(values[0], values[1]);
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      worst = std::max(worst, max_abs_diff(grads[0][i], grads[1][i]));
    }
    report.checkpoint_max_diff = std::max(report.checkpoint_max_diff, worst);
    if (worst > options.checkpoint_tolerance) {
      std::ostringstream msg;
      msg << "checkpoint case '" << c.name << "': max difference " << worst;
      report.failures.push_back(msg.str());
    }
  }
}

}  // namespace rcbm

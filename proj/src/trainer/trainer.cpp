#include "rcbm/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "rcbm/tensorcore/checkpoint.hpp"
#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/memory_meter.hpp"
#include "rcbm/tensorcore/rng.hpp"

namespace rcbm::trainer {

using nlohmann::json;
using modelzoo::RashomonSlice;

namespace {

constexpr std::uint64_t kDropoutStream = 0x64726f70;
constexpr std::uint64_t kShuffleStream = 0x73687566;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<std::size_t> all_members(const RashomonSlice& slice) {
  std::vector<std::size_t> m(slice.models());
  std::iota(m.begin(), m.end(), 0);
  return m;
}

std::vector<Tensor> tensors_of(const std::vector<modelzoo::NamedParameter>& params,
                               bool heads_only = false) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    if (!heads_only || p.concept_head) out.push_back(p.tensor);
  }
  return out;
}

std::vector<double> values_of(std::span<const Tensor> scalars) {
  std::vector<double> out;
  for (const Tensor& t : scalars) out.push_back(t.item());
  return out;
}

}  // namespace

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::kRashomon: return "rashomon";
    case Mode::kRandomInit: return "random_init";
    case Mode::kX2c: return "x2c";
    case Mode::kC2y: return "c2y";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::kRashomon, Mode::kRandomInit, Mode::kX2c, Mode::kC2y}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("mode", "unknown mode '" + name + "'");
}

modelzoo::Layout layout_for(Mode mode) {
  switch (mode) {
    case Mode::kRashomon: return modelzoo::Layout::kAdapters;
    case Mode::kRandomInit:
    case Mode::kX2c: return modelzoo::Layout::kIndependentBackbones;
    case Mode::kC2y: return modelzoo::Layout::kSharedEncoder;
  }
  throw ConfigError("mode", "unknown mode");
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda", "must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate", "must be non-negative");
  }
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs", "must be positive");
  if (patience == 0) throw ConfigError("patience", "must be positive");
  if (!(alpha.value > 0.0 && alpha.value < 1.0) && !(alpha.fixed && alpha.value == 0.0)) {
    throw ConfigError("alpha", "must lie in (0,1); only a fixed alpha may be 0");
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lambda", c.lambda},
           {"mode", mode_name(c.mode)},
           {"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"patience", c.patience},
           {"checkpointing", c.checkpointing},
           {"seed", c.seed},
           {"alpha_update", c.alpha.fixed ? "fixed" : "per_epoch"},
           {"alpha", c.alpha.value},
           {"similarity", c.similarity == ops::CosineMode::kRows ? "per_sample" : "flattened"}};
}

void from_json(const json& j, TrainConfig& c) {
  auto read = [&j](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  read("lambda", c.lambda);
  if (j.contains("mode")) {
    std::string name;
    read("mode", name);
    c.mode = parse_mode(name);
  }
  read("learning_rate", c.learning_rate);
  read("batch_size", c.batch_size);
  read("max_epochs", c.max_epochs);
  read("patience", c.patience);
  read("checkpointing", c.checkpointing);
  read("seed", c.seed);
  if (j.contains("alpha_update")) {
    std::string kind;
    read("alpha_update", kind);
    if (kind != "fixed" && kind != "per_epoch") {
      throw ConfigError("alpha_update", "expected 'per_epoch' or 'fixed'");
    }
    c.alpha.fixed = kind == "fixed";
  }
  read("alpha", c.alpha.value);
  if (j.contains("similarity")) {
    std::string kind;
    read("similarity", kind);
    if (kind == "per_sample") {
      c.similarity = ops::CosineMode::kRows;
    } else if (kind == "flattened") {
      c.similarity = ops::CosineMode::kFlat;
    } else {
      throw ConfigError("similarity", "expected 'per_sample' or 'flattened'");
    }
  }
}

double total_loss_value(std::span<const double> pr, std::span<const double> c,
                        std::span<const double> div, double lambda, double alpha) {
  if (pr.empty() || pr.size() != c.size() || pr.size() != div.size()) {
    throw ShapeError("total_loss: need M matching components");
  }
  // Mirrors the tape: strict-greater max, left-to-right sum.
  auto max_of = [](std::span<const double> v) {
    double best = v[0];
    for (double x : v.subspan(1)) {
      if (x > best) best = x;
    }
    return best;
  };
  double sum = 0.0;
  for (double d : div) sum += d;
  const double M = static_cast<double>(pr.size());
  const double value = max_of(pr) + (max_of(c) + sum * -(alpha / M)) * lambda;
  if (!std::isfinite(value)) throw NumericError("total_loss: non-finite result");
  return value;
}

std::vector<Tensor> diversity_loss(Tape& tape, std::span<const Tensor> vectors,
                                   ops::CosineMode mode) {
  const std::size_t M = vectors.size();
  if (M == 0) throw ShapeError("diversity_loss: no models");
  if (M == 1) return {Tensor::scalar(0.0)};
  for (const Tensor& v : vectors) {
    if (v.shape() != vectors[0].shape()) {
      throw ShapeError("diversity_loss: members disagree on batch shape");
    }
  }
  std::vector<std::vector<Tensor>> sims(M, std::vector<Tensor>(M));
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = a + 1; b < M; ++b) {
      const Tensor s = ops::mean(tape, ops::cosine_similarity(tape, vectors[a], vectors[b], mode));
      sims[a][b] = s;
      sims[b][a] = s;
    }
  }
  const Tensor one = Tensor::scalar(1.0);
  const double weight = -1.0 / static_cast<double>(M - 1);
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<Tensor> others;
    for (std::size_t o = 0; o < M; ++o) {
      if (o != m) others.push_back(sims[m][o]);
    }
    out.push_back(ops::add(tape, one, ops::mul_scalar(tape, ops::add(tape, others), weight)));
  }
  return out;
}

std::vector<double> diversity_loss_values(std::span<const Tensor> vectors,
                                          ops::CosineMode mode) {
  Tape tape;
  tape.set_recording(false);
  return values_of(diversity_loss(tape, vectors, mode));
}

Tensor total_loss(Tape& tape, std::span<const Tensor> pr, std::span<const Tensor> c,
                  std::span<const Tensor> div, double lambda, double alpha) {
  const std::size_t M = pr.size();
  if (M == 0 || c.size() != M || div.size() != M) {
    throw ShapeError("total_loss: need M matching components");
  }
  for (auto group : {pr, c, div}) {
    for (const Tensor& t : group) {
      if (!std::isfinite(t.item())) throw NumericError("total_loss: non-finite component");
    }
  }
  const Tensor max_pr = ops::max_over_models(tape, pr);
  const Tensor max_c = ops::max_over_models(tape, c);
  const Tensor div_sum = ops::add(tape, div);
  const Tensor concept_part =
      ops::add(tape, max_c, ops::mul_scalar(tape, div_sum, -(alpha / static_cast<double>(M))));
  return ops::add(tape, max_pr, ops::mul_scalar(tape, concept_part, lambda));
}

double alpha_from_grads(std::span<const Tensor> params) {
  if (params.empty()) throw ConfigError("P", "alpha update needs concept-head parameters");
  double total = 0.0;
  for (const Tensor& w : params) {
    const auto g = w.grad_or_zero();
    double s = 0.0;
    for (double v : g) s += std::abs(v);
    total += g.empty() ? 0.0 : s / static_cast<double>(g.size());
  }
  return sigmoid(total / static_cast<double>(params.size()));
}

std::vector<Tensor> trainable_tensors(const RashomonSlice& slice) {
  return tensors_of(slice.trainable_parameters());
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw ConfigError("params", "optimizer given a frozen tensor");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Adam::step(double learning_rate) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::vector<double> g = params_[i].grad_or_zero();
    auto w = params_[i].mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      w[k] -= learning_rate * m_hat / (std::sqrt(v_hat) + epsilon_);
    }
  }
}

json to_json_record(const EpochRecord& r) {
  auto losses = [](const LossBreakdown& b) {
    return json{{"pr", b.per_model_pr}, {"c", b.per_model_c}, {"div", b.per_model_div},
                {"total", b.total}};
  };
  json j{{"epoch", r.epoch},
         {"alpha", r.alpha},
         {"train", losses(r.train)},
         {"val", losses(r.val)},
         {"val_task_accuracy", r.val_task_accuracy},
         {"val_concept_accuracy", r.val_concept_accuracy},
         {"peak_bytes", r.peak_bytes}};
  if (r.member) j["member"] = *r.member;
  return j;
}

Batch make_batch(const datagen::Subset& s) {
  return {Tensor::from({s.rows, s.input_dim}, s.X), Tensor::from({s.rows, s.concepts}, s.C), s.Y};
}

MemberOutputs predict(const RashomonSlice& slice, const Tensor& X) {
  MemberOutputs out;
  Tape tape;
  tape.set_recording(false);
  for (std::size_t m = 0; m < slice.models(); ++m) {
    const modelzoo::ForwardOutputs f = modelzoo::slice_forward(tape, slice, X, m, false, 0);
    out.concept_probs.push_back(f.concept_probs);
    out.class_probs.push_back(ops::softmax(tape, f.class_logits));
  }
  return out;
}

namespace {

struct MemberForward {
  Tensor concept_probs;
  Tensor class_logits;
};

LossBreakdown breakdown_of(std::span<const Tensor> pr, std::span<const Tensor> c,
                           std::span<const Tensor> div, const Tensor& total, double lambda,
                           double alpha) {
  LossBreakdown b;
  b.per_model_pr = values_of(pr);
  b.per_model_c = values_of(c);
  b.per_model_div = values_of(div);
  b.alpha = alpha;
  b.lambda = lambda;
  b.total = total.item();
  return b;
}

Evaluation evaluate_members(const RashomonSlice& slice, const Batch& batch,
                            const TrainConfig& config, double alpha,
                            std::span<const std::size_t> members) {
  Tape tape;
  tape.set_recording(false);
  std::vector<Tensor> pr, c, vectors;
  Evaluation ev;
  const std::size_t rows = batch.Y.size();
  const std::size_t p = batch.C.cols();
  for (std::size_t m : members) {
    const auto f = modelzoo::slice_forward(tape, slice, batch.X, m, false, 0);
    pr.push_back(ops::softmax_cross_entropy(tape, f.class_logits, batch.Y));
    c.push_back(ops::binary_cross_entropy(tape, f.concept_probs, batch.C));
    vectors.push_back(config.mode == Mode::kC2y ? ops::softmax(tape, f.class_logits)
                                                : f.concept_probs);
    const std::size_t K = f.class_logits.cols();
    const auto logits = f.class_logits.values();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      const auto row = logits.subspan(i * K, K);
      hits += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) ==
              batch.Y[i];
    }
    ev.task_accuracy.push_back(static_cast<double>(hits) / static_cast<double>(rows));
    const auto probs = f.concept_probs.values();
    const auto truth = batch.C.values();
    std::size_t concept_hits = 0;
    for (std::size_t i = 0; i < rows * p; ++i) {
      concept_hits += (probs[i] >= 0.5) == (truth[i] >= 0.5);
    }
    ev.concept_accuracy.push_back(static_cast<double>(concept_hits) /
                                  static_cast<double>(rows * p));
  }
  const bool diverse = config.mode != Mode::kRandomInit;
  const std::vector<Tensor> div =
      diverse ? diversity_loss(tape, vectors, config.similarity)
              : std::vector<Tensor>(members.size(), Tensor::scalar(0.0));
  const Tensor total = total_loss(tape, pr, c, div, config.lambda, alpha);
  ev.losses = breakdown_of(pr, c, div, total, config.lambda, alpha);
  return ev;
}

}  // namespace

Evaluation evaluate(const RashomonSlice& slice, const Batch& batch, const TrainConfig& config,
                    double alpha) {
  const auto members = all_members(slice);
  return evaluate_members(slice, batch, config, alpha, members);
}

LossBreakdown train_step(RashomonSlice& slice, const Batch& batch, const TrainConfig& config,
                         TrainState& state, Adam& optimizer,
                         std::span<const std::size_t> members) {
  if (members.empty()) throw ShapeError("train_step: no members");
  optimizer.zero_grad();
  const double alpha = state.alpha;

  MemoryMeter meter;
  LossBreakdown breakdown;
  {
    MeterInstall install(meter);
    MeterScope scope(meter, "train_step");
    Tape tape;
    std::vector<Tensor> pr, c, vectors;
    for (std::size_t m : members) {
      const std::uint64_t seed =
          derive_seed(derive_seed(derive_seed(config.seed, kDropoutStream), state.step), m);
      MemberForward f;
      if (config.checkpointing) {
        std::vector<Tensor> inputs{batch.X};
        for (const auto& p : slice.member_parameters(m)) inputs.push_back(p.tensor);
        const RashomonSlice& view = slice;
        const auto outs = checkpoint_region(
            tape, std::move(inputs), seed,
            [&view, m](Tape& t, std::span<const Tensor> in, ops::RngStream& rng) {
              auto o = modelzoo::slice_forward(t, view, in[0], m, true, rng);
              return std::vector<Tensor>{o.concept_probs, o.class_logits};
            });
        f = {outs[0], outs[1]};
      } else {
        ops::RngStream rng(seed);
        auto o = modelzoo::slice_forward(tape, slice, batch.X, m, true, rng);
        f = {o.concept_probs, o.class_logits};
      }
      pr.push_back(ops::softmax_cross_entropy(tape, f.class_logits, batch.Y));
      c.push_back(ops::binary_cross_entropy(tape, f.concept_probs, batch.C));
      vectors.push_back(config.mode == Mode::kC2y ? ops::softmax(tape, f.class_logits)
                                                  : f.concept_probs);
    }
    const bool diverse = config.mode != Mode::kRandomInit;
    const std::vector<Tensor> div =
        diverse ? diversity_loss(tape, vectors, config.similarity)
                : std::vector<Tensor>(members.size(), Tensor::scalar(0.0));
    const Tensor total = total_loss(tape, pr, c, div, config.lambda, alpha);
    breakdown = breakdown_of(pr, c, div, total, config.lambda, alpha);
    tape.backward(total);
    state.peak_bytes = scope.close();
  }
  for (const Tensor& p : optimizer.params()) {
    if (!all_finite(p.grad())) {
      throw NumericError("train_step " + std::to_string(state.step) +
                         ": non-finite gradient (total loss " +
                         std::to_string(breakdown.total) + ")");
    }
  }
  optimizer.step(config.learning_rate);
  ++state.step;
  return breakdown;
}

LossBreakdown train_step(RashomonSlice& slice, const Batch& batch, const TrainConfig& config,
                         TrainState& state, Adam& optimizer) {
  const auto members = all_members(slice);
  return train_step(slice, batch, config, state, optimizer, members);
}

namespace {

void accumulate(LossBreakdown& sum, const LossBreakdown& b) {
  auto add = [](std::vector<double>& into, const std::vector<double>& from) {
    if (into.empty()) into.assign(from.size(), 0.0);
    for (std::size_t i = 0; i < from.size(); ++i) into[i] += from[i];
  };
  add(sum.per_model_pr, b.per_model_pr);
  add(sum.per_model_c, b.per_model_c);
  add(sum.per_model_div, b.per_model_div);
  sum.total += b.total;
  sum.alpha = b.alpha;
  sum.lambda = b.lambda;
}

void scale(LossBreakdown& b, double f) {
  for (auto* v : {&b.per_model_pr, &b.per_model_c, &b.per_model_div}) {
    for (double& x : *v) x *= f;
  }
  b.total *= f;
}

TrainState train_members(RashomonSlice& slice, const datagen::ConceptDataset& data,
                         const TrainConfig& config, std::span<const std::size_t> members,
                         std::optional<std::size_t> member_tag, std::ofstream* log) {
  std::vector<Tensor> params, heads;
  for (std::size_t m : members) {
    for (const auto& p : slice.member_parameters(m)) {
      const bool seen = std::any_of(params.begin(), params.end(),
                                    [&](const Tensor& t) { return t.same_storage(p.tensor); });
      if (seen) continue;
      params.push_back(p.tensor);
      if (p.concept_head) heads.push_back(p.tensor);
    }
  }
  Adam optimizer(params);
  TrainState state;
  state.alpha = config.alpha.value;
  state.best_val_total = std::numeric_limits<double>::infinity();

  const Batch val = make_batch(datagen::gather(data, data.splits.val));
  std::vector<std::vector<double>> best;
  auto snapshot = [&params] {
    std::vector<std::vector<double>> s;
    for (const Tensor& p : params) s.emplace_back(p.values().begin(), p.values().end());
    return s;
  };
  best = snapshot();

  std::vector<std::size_t> order = data.splits.train;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    state.epoch = epoch;
    std::sort(order.begin(), order.end());
    Rng shuffle(derive_seed(derive_seed(config.seed, kShuffleStream), epoch));
    shuffle.shuffle(std::span<std::size_t>(order));

    EpochRecord record;
    record.epoch = epoch;
    record.alpha = state.alpha;
    record.member = member_tag;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const Batch batch = make_batch(
          datagen::gather(data, std::span<const std::size_t>(order).subspan(start, stop - start)));
      accumulate(record.train, train_step(slice, batch, config, state, optimizer, members));
      record.peak_bytes = std::max(record.peak_bytes, state.peak_bytes);
      ++batches;
    }
    scale(record.train, 1.0 / static_cast<double>(batches));

    // Head gradients of the epoch's last step drive the next α.
    if (!config.alpha.fixed) {
      state.alpha = alpha_from_grads(heads);
      state.alpha_history.push_back(state.alpha);
    }

    const Evaluation ev = evaluate_members(slice, val, config, state.alpha, members);
    record.val = ev.losses;
    record.val_task_accuracy = ev.task_accuracy;
    record.val_concept_accuracy = ev.concept_accuracy;
    state.log.push_back(record);
    if (log != nullptr) *log << to_json_record(record).dump() << '\n' << std::flush;

    if (ev.losses.total < state.best_val_total) {
      state.best_val_total = ev.losses.total;
      state.epochs_since_improvement = 0;
      best = snapshot();
    } else if (++state.epochs_since_improvement >= config.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::ranges::copy(best[i], params[i].mutable_values().begin());
    params[i].clear_grad();
  }
  return state;
}

}  // namespace

TrainResult train(RashomonSlice& slice, const datagen::ConceptDataset& data,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& log_path) {
  config.validate();
  if (data.splits.train.empty()) throw ConfigError("splits", "empty train split");
  if (data.splits.val.empty()) throw ConfigError("splits", "empty validation split");
  if (slice.config().input_dim != data.config.input_dim ||
      slice.config().concepts != data.config.p || slice.config().classes != data.config.K) {
    throw ShapeError("train: slice dimensions do not match the dataset");
  }
  if (slice.config().layout != layout_for(config.mode)) {
    throw ConfigError("mode", mode_name(config.mode) + " needs the " +
                                  modelzoo::layout_name(layout_for(config.mode)) + " layout");
  }

  std::ofstream log;
  if (log_path) {
    if (log_path->has_parent_path()) std::filesystem::create_directories(log_path->parent_path());
    log.open(*log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open training log " + log_path->string());
  }
  std::ofstream* sink = log_path ? &log : nullptr;

  TrainResult result;
  if (config.mode == Mode::kRandomInit) {
    for (std::size_t m = 0; m < slice.models(); ++m) {
      const std::size_t one[] = {m};
      result.member_states.push_back(train_members(slice, data, config, one, m, sink));
      const TrainState& s = result.member_states.back();
      result.state.log.insert(result.state.log.end(), s.log.begin(), s.log.end());
      result.state.epoch = std::max(result.state.epoch, s.epoch);
      result.state.step += s.step;
      result.state.peak_bytes = std::max(result.state.peak_bytes, s.peak_bytes);
    }
    result.state.alpha = config.alpha.value;
  } else {
    const auto members = all_members(slice);
    result.state = train_members(slice, data, config, members, std::nullopt, sink);
  }
  return result;
}

modelzoo::SliceConfig slice_config_for(const TrainConfig& config,
                                       const datagen::PlantedConfig& data,
                                       modelzoo::SliceConfig base) {
  base.input_dim = data.input_dim;
  base.concepts = data.p;
  base.classes = data.K;
  base.layout = layout_for(config.mode);
  return base;
}

}  // namespace rcbm::trainer

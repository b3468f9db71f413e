#include "rcbm/modelzoo/slice.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/io.hpp"
#include "rcbm/tensorcore/rng.hpp"

namespace rcbm::modelzoo {

using nlohmann::json;

namespace {

constexpr std::uint64_t kBackboneStream = 1;
constexpr std::uint64_t kAdapterStream = 2;
constexpr std::uint64_t kHeadStream = 3;
constexpr std::uint64_t kClassifierStream = 4;

Tensor gaussian(Rng& rng, Shape shape, double variance, bool trainable) {
  std::vector<double> v(shape_size(shape));
  const double sd = std::sqrt(variance);
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), v, trainable);
}

std::vector<LinearBlock> make_backbone(const SliceConfig& c, std::uint64_t seed, bool trainable) {
  Rng rng(seed);
  std::vector<LinearBlock> blocks;
  std::size_t d_in = c.input_dim;
  for (std::size_t d_out : c.hidden) {
    // He init suits the relu stack.
    blocks.push_back({gaussian(rng, {d_out, d_in}, 2.0 / static_cast<double>(d_in), trainable),
                      Tensor::zeros({d_out}, trainable)});
    d_in = d_out;
  }
  return blocks;
}

std::vector<ConceptHead> make_heads(const SliceConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = c.hidden.back();
  std::vector<ConceptHead> heads;
  for (std::size_t j = 0; j < c.concepts; ++j) {
    heads.push_back({gaussian(rng, {1, d}, 1.0 / static_cast<double>(d), true),
                     Tensor::zeros({1}, true)});
  }
  return heads;
}

Classifier make_classifier(const SliceConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return {gaussian(rng, {c.classes, c.concepts}, 1.0 / static_cast<double>(c.concepts), true),
          Tensor::zeros({c.classes}, true)};
}

std::uint64_t member_seed(const SliceConfig& c, std::uint64_t stream, std::size_t m) {
  const std::uint64_t base = derive_seed(c.seed, stream);
  return c.identical_member_seeds ? base : derive_seed(base, m);
}

std::size_t layer_in(const SliceConfig& c, std::size_t layer) {
  return layer == 0 ? c.input_dim : c.hidden[layer - 1];
}

}  // namespace

std::string layout_name(Layout layout) {
  switch (layout) {
    case Layout::kAdapters: return "adapters";
    case Layout::kIndependentBackbones: return "independent_backbones";
    case Layout::kSharedEncoder: return "shared_encoder";
  }
  return "?";
}

Layout parse_layout(const std::string& name) {
  for (Layout l : {Layout::kAdapters, Layout::kIndependentBackbones, Layout::kSharedEncoder}) {
    if (layout_name(l) == name) return l;
  }
  throw ConfigError("layout", "unknown layout '" + name + "'");
}

bool SliceConfig::shared(std::size_t layer) const {
  return layer < sharing_mask.size() && sharing_mask[layer];
}

void SliceConfig::validate() const {
  if (input_dim == 0) throw ConfigError("input_dim", "must be positive");
  if (hidden.empty()) throw ConfigError("hidden", "need at least one backbone layer");
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("hidden", "layer widths must be positive");
  }
  if (models == 0) throw ConfigError("models", "must be positive");
  if (concepts == 0) throw ConfigError("concepts", "must be positive");
  if (classes < 2) throw ConfigError("classes", "need at least two classes");
  if (!sharing_mask.empty() && sharing_mask.size() != hidden.size()) {
    throw ConfigError("sharing_mask", "needs one flag per backbone layer");
  }
  if (layout != Layout::kAdapters) return;
  if (rank == 0) throw ConfigError("rank", "must be positive");
  if (!(lora_alpha >= 0.0) || !std::isfinite(lora_alpha)) {
    throw ConfigError("lora_alpha", "must be non-negative");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout_rate", "must lie in [0,1)");
  }
  std::set<std::size_t> seen;
  for (std::size_t layer : attach_layers) {
    if (layer >= hidden.size()) throw ConfigError("attach_layers", "layer index out of range");
    if (!seen.insert(layer).second) throw ConfigError("attach_layers", "duplicate layer");
    if (rank > std::min(layer_in(*this, layer), hidden[layer])) {
      throw ConfigError("rank", "exceeds min(d_in, d_out) at layer " + std::to_string(layer));
    }
  }
}

void to_json(json& j, const SliceConfig& c) {
  j = json{{"input_dim", c.input_dim},
           {"hidden", c.hidden},
           {"models", c.models},
           {"concepts", c.concepts},
           {"classes", c.classes},
           {"layout", layout_name(c.layout)},
           {"attach_layers", c.attach_layers},
           {"sharing_mask", c.sharing_mask},
           {"rank", c.rank},
           {"lora_alpha", c.lora_alpha},
           {"dropout_rate", c.dropout_rate},
           {"seed", c.seed},
           {"identical_member_seeds", c.identical_member_seeds}};
}

void from_json(const json& j, SliceConfig& c) {
  auto read = [&j](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  read("input_dim", c.input_dim);
  read("hidden", c.hidden);
  read("models", c.models);
  read("concepts", c.concepts);
  read("classes", c.classes);
  if (j.contains("layout")) {
    std::string name;
    read("layout", name);
    c.layout = parse_layout(name);
  }
  read("attach_layers", c.attach_layers);
  read("sharing_mask", c.sharing_mask);
  read("rank", c.rank);
  read("lora_alpha", c.lora_alpha);
  read("dropout_rate", c.dropout_rate);
  read("seed", c.seed);
  read("identical_member_seeds", c.identical_member_seeds);
}

RashomonSlice::RashomonSlice(SliceConfig config) : config_(std::move(config)) {
  config_.validate();
  const SliceConfig& c = config_;

  switch (c.layout) {
    case Layout::kAdapters: {
      backbones_.push_back(make_backbone(c, derive_seed(c.seed, kBackboneStream), false));
      adapter_index_.assign(c.models, std::vector<std::optional<std::size_t>>(c.hidden.size()));
      for (std::size_t layer : c.attach_layers) {
        const std::size_t d_in = layer_in(c, layer);
        const std::size_t d_out = c.hidden[layer];
        const std::size_t instances = c.shared(layer) ? 1 : c.models;
        for (std::size_t m = 0; m < instances; ++m) {
          Rng rng(derive_seed(derive_seed(c.seed, kAdapterStream), layer * 1000003 + m));
          auto a = std::make_shared<AdapterModule>();
          a->U = Tensor::zeros({d_out, c.rank}, true);
          a->V = gaussian(rng, {c.rank, d_in}, 1.0 / static_cast<double>(d_in), true);
          a->rank = c.rank;
          a->scale = c.scale();
          a->dropout_rate = c.dropout_rate;
          a->layer = layer;
          adapters_.push_back(std::move(a));
        }
        for (std::size_t m = 0; m < c.models; ++m) {
          adapter_index_[m][layer] = adapters_.size() - instances + (c.shared(layer) ? 0 : m);
        }
      }
      // Heads and classifiers start identical so every member computes the
      // same function until the adapters move.
      const std::vector<ConceptHead> heads = make_heads(c, derive_seed(c.seed, kHeadStream));
      const Classifier cls = make_classifier(c, derive_seed(c.seed, kClassifierStream));
      for (std::size_t m = 0; m < c.models; ++m) {
        std::vector<ConceptHead> copy;
        for (const ConceptHead& h : heads) copy.push_back({h.W.clone(), h.b.clone()});
        heads_.push_back(std::move(copy));
        classifiers_.push_back({cls.W.clone(), cls.b.clone()});
      }
      break;
    }
    case Layout::kIndependentBackbones:
      for (std::size_t m = 0; m < c.models; ++m) {
        backbones_.push_back(make_backbone(c, member_seed(c, kBackboneStream, m), true));
        heads_.push_back(make_heads(c, member_seed(c, kHeadStream, m)));
        classifiers_.push_back(make_classifier(c, member_seed(c, kClassifierStream, m)));
      }
      break;
    case Layout::kSharedEncoder:
      backbones_.push_back(make_backbone(c, derive_seed(c.seed, kBackboneStream), true));
      heads_.push_back(make_heads(c, derive_seed(c.seed, kHeadStream)));
      for (std::size_t m = 0; m < c.models; ++m) {
        classifiers_.push_back(make_classifier(c, member_seed(c, kClassifierStream, m)));
      }
      break;
  }
}

const std::vector<LinearBlock>& RashomonSlice::backbone(std::size_t m) const {
  if (m >= models()) throw ShapeError("model index " + std::to_string(m) + " out of range");
  return backbones_[backbones_.size() == 1 ? 0 : m];
}

const AdapterModule* RashomonSlice::adapter(std::size_t m, std::size_t layer) const {
  if (m >= models()) throw ShapeError("model index " + std::to_string(m) + " out of range");
  if (adapter_index_.empty() || layer >= adapter_index_[m].size()) return nullptr;
  const auto& idx = adapter_index_[m][layer];
  return idx ? adapters_[*idx].get() : nullptr;
}

const std::vector<ConceptHead>& RashomonSlice::heads(std::size_t m) const {
  if (m >= models()) throw ShapeError("model index " + std::to_string(m) + " out of range");
  return heads_[heads_.size() == 1 ? 0 : m];
}

const Classifier& RashomonSlice::classifier(std::size_t m) const {
  if (m >= models()) throw ShapeError("model index " + std::to_string(m) + " out of range");
  return classifiers_[m];
}

std::vector<NamedParameter> RashomonSlice::all_tensors() const {
  std::vector<NamedParameter> out;
  for (std::size_t b = 0; b < backbones_.size(); ++b) {
    for (std::size_t l = 0; l < backbones_[b].size(); ++l) {
      const std::string prefix = "backbone/" + std::to_string(b) + "/" + std::to_string(l);
      out.push_back({prefix + "/W", backbones_[b][l].W});
      out.push_back({prefix + "/b", backbones_[b][l].b});
    }
  }
  for (std::size_t i = 0; i < adapters_.size(); ++i) {
    const std::string prefix = "adapter/" + std::to_string(i);
    out.push_back({prefix + "/U", adapters_[i]->U});
    out.push_back({prefix + "/V", adapters_[i]->V});
  }
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    for (std::size_t j = 0; j < heads_[h].size(); ++j) {
      const std::string prefix = "head/" + std::to_string(h) + "/" + std::to_string(j);
      out.push_back({prefix + "/W", heads_[h][j].W, true});
      out.push_back({prefix + "/b", heads_[h][j].b, true});
    }
  }
  for (std::size_t m = 0; m < classifiers_.size(); ++m) {
    const std::string prefix = "classifier/" + std::to_string(m);
    out.push_back({prefix + "/W", classifiers_[m].W});
    out.push_back({prefix + "/b", classifiers_[m].b});
  }
  return out;
}

std::vector<NamedParameter> RashomonSlice::trainable_parameters() const {
  std::vector<NamedParameter> out;
  for (NamedParameter& p : all_tensors()) {
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  }
  return out;
}

std::vector<NamedParameter> RashomonSlice::member_parameters(std::size_t m) const {
  std::set<const TensorImpl*> used;
  auto use = [&used](const Tensor& t) { used.insert(t.impl()); };
  for (const LinearBlock& blk : backbone(m)) {
    use(blk.W);
    use(blk.b);
  }
  for (std::size_t l = 0; l < layers(); ++l) {
    if (const AdapterModule* a = adapter(m, l)) {
      use(a->U);
      use(a->V);
    }
  }
  for (const ConceptHead& h : heads(m)) {
    use(h.W);
    use(h.b);
  }
  use(classifier(m).W);
  use(classifier(m).b);

  std::vector<NamedParameter> out;
  for (NamedParameter& p : trainable_parameters()) {
    if (used.contains(p.tensor.impl())) out.push_back(std::move(p));
  }
  return out;
}

std::size_t RashomonSlice::trainable_count() const {
  std::size_t n = 0;
  for (const NamedParameter& p : trainable_parameters()) n += p.tensor.size();
  return n;
}

std::size_t RashomonSlice::member_trainable_count(std::size_t m) const {
  std::size_t n = 0;
  for (const NamedParameter& p : member_parameters(m)) n += p.tensor.size();
  return n;
}

std::string RashomonSlice::backbone_digest() const {
  std::vector<NamedArray> arrays;
  for (const auto& blocks : backbones_) {
    for (const LinearBlock& blk : blocks) {
      for (const Tensor* t : {&blk.W, &blk.b}) {
        arrays.push_back({"", t->shape(), {t->values().begin(), t->values().end()}});
      }
    }
  }
  return sha256_hex(encode_blob(arrays));
}

void RashomonSlice::copy_weights_from(const RashomonSlice& other) {
  const auto mine = all_tensors();
  const auto theirs = other.all_tensors();
  if (mine.size() != theirs.size()) throw ShapeError("copy_weights_from: layouts differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name || mine[i].tensor.shape() != theirs[i].tensor.shape()) {
      throw ShapeError("copy_weights_from: tensor " + mine[i].name + " differs");
    }
    Tensor dst = mine[i].tensor;
    std::ranges::copy(theirs[i].tensor.values(), dst.mutable_values().begin());
  }
}

Tensor adapted_linear(Tape& tape, const Tensor& x, const LinearBlock& block,
                      const AdapterModule* adapter, bool train_mode, ops::RngStream& stream) {
  const std::size_t d_out = block.W.rows();
  const std::size_t d_in = block.W.cols();
  if (x.rank() != 2 || x.cols() != d_in) {
    throw ShapeError("adapted_linear: input " + shape_string(x.shape()) + " vs weight " +
                     shape_string(block.W.shape()));
  }
  Tensor out = ops::add(tape, ops::matmul(tape, x, block.W, true), block.b);
  if (adapter == nullptr) return out;

  const std::size_t r = adapter->rank;
  if (r > std::min(d_in, d_out)) throw ShapeError("adapted_linear: rank exceeds min(d_in, d_out)");
  if (adapter->U.shape() != Shape{d_out, r} || adapter->V.shape() != Shape{r, d_in}) {
    throw ShapeError("adapted_linear: adapter " + shape_string(adapter->U.shape()) + "·" +
                     shape_string(adapter->V.shape()) + " does not fit weight " +
                     shape_string(block.W.shape()));
  }
  const Tensor dropped =
      train_mode ? ops::dropout(tape, x, adapter->dropout_rate, stream) : x;
  const Tensor low = ops::matmul(tape, dropped, adapter->V, true);
  const Tensor delta = ops::matmul(tape, low, adapter->U, true);
  return ops::add(tape, out, ops::mul_scalar(tape, delta, adapter->scale));
}

ForwardOutputs slice_forward(Tape& tape, const RashomonSlice& slice, const Tensor& x,
                             std::size_t m, bool train_mode, ops::RngStream& stream) {
  const auto& blocks = slice.backbone(m);
  Tensor h = x;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    h = ops::relu(tape, adapted_linear(tape, h, blocks[l], slice.adapter(m, l), train_mode, stream));
  }
  const auto& heads = slice.heads(m);
  std::vector<Tensor> columns;
  columns.reserve(heads.size());
  for (const ConceptHead& head : heads) {
    if (head.W.cols() != h.cols()) throw ShapeError("slice_forward: head width mismatch");
    columns.push_back(ops::add(tape, ops::matmul(tape, h, head.W, true), head.b));
  }
  ForwardOutputs out;
  out.concept_logits = ops::concat_cols(tape, columns);
  out.concept_probs = ops::sigmoid(tape, out.concept_logits);
  const Classifier& cls = slice.classifier(m);
  out.class_logits = ops::add(tape, ops::matmul(tape, out.concept_probs, cls.W, true), cls.b);
  return out;
}

ForwardOutputs slice_forward(Tape& tape, const RashomonSlice& slice, const Tensor& x,
                             std::size_t m, bool train_mode, std::uint64_t rng_seed) {
  ops::RngStream stream(rng_seed);
  return slice_forward(tape, slice, x, m, train_mode, stream);
}

Tensor effective_weight(const RashomonSlice& slice, std::size_t m, std::size_t layer) {
  if (layer >= slice.layers()) throw ShapeError("effective_weight: layer out of range");
  const AdapterModule* a = slice.adapter(m, layer);
  if (a == nullptr && slice.backbone_frozen()) {
    throw ShapeError("effective_weight: no adapter at layer " + std::to_string(layer));
  }
  const Tensor& W = slice.backbone(m)[layer].W;
  if (a == nullptr) return W.clone();
  const std::size_t d_out = W.rows();
  const std::size_t d_in = W.cols();
  std::vector<double> out(W.values().begin(), W.values().end());
  const auto U = a->U.values();
  const auto V = a->V.values();
  for (std::size_t i = 0; i < d_out; ++i) {
    for (std::size_t j = 0; j < d_in; ++j) {
      double uv = 0.0;
      for (std::size_t k = 0; k < a->rank; ++k) uv += U[i * a->rank + k] * V[k * d_in + j];
      out[i * d_in + j] += a->scale * uv;
    }
  }
  return Tensor::from({d_out, d_in}, out);
}

void save_slice(const RashomonSlice& slice, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const SliceConfig& c = slice.config();
  std::vector<std::size_t> dims{c.input_dim};
  dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
  json manifest{{"M", c.models},
                {"p", c.concepts},
                {"K", c.classes},
                {"backbone_dims", dims},
                {"attach_points", c.attach_layers},
                {"sharing_mask", c.sharing_mask},
                {"r", c.rank},
                {"scale", c.scale()},
                {"dropout_rate", c.dropout_rate},
                {"config", c},
                {"weights", "weights.json"}};
  std::vector<NamedArray> arrays;
  for (const NamedParameter& p : slice.all_tensors()) {
    arrays.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  }
  write_tensor_dump(dir / "weights.json", dir / "weights.bin", arrays);
  write_file_atomic(dir / "model.json", manifest.dump(2) + "\n");
}

RashomonSlice load_slice(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "model.json"));
  } catch (const json::exception& e) {
    throw IoError("model.json: " + std::string(e.what()));
  }
  if (!manifest.contains("config")) throw IoError("model.json: missing config");
  SliceConfig c = manifest.at("config").get<SliceConfig>();
  RashomonSlice slice(c);

  const std::vector<NamedArray> arrays =
      read_tensor_dump(dir / manifest.value("weights", std::string("weights.json")));
  auto tensors = slice.all_tensors();
  if (arrays.size() != tensors.size()) throw IoError("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].name != tensors[i].name || arrays[i].shape != tensors[i].tensor.shape()) {
      throw IoError("checkpoint: unexpected tensor " + arrays[i].name);
    }
    if (!all_finite(arrays[i].values)) throw IoError("checkpoint: non-finite " + arrays[i].name);
    std::ranges::copy(arrays[i].values, tensors[i].tensor.mutable_values().begin());
  }
  return slice;
}

}  // namespace rcbm::modelzoo

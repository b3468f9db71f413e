#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "rcbm/modelzoo/slice.hpp"
#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/rng.hpp"

using namespace rcbm;
using namespace rcbm::modelzoo;

namespace {

void set_values(Tensor t, std::initializer_list<double> v) {
  REQUIRE(t.size() == v.size());
  std::ranges::copy(v, t.mutable_values().begin());
}

void fill_random(Tensor t, Rng& rng, double sd) {
  for (double& v : t.mutable_values()) v = rng.normal(0.0, sd);
}

Tensor random_input(std::uint64_t seed, std::size_t rows, std::size_t cols) {
  Rng rng(seed);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.normal();
  return Tensor::from({rows, cols}, v);
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

SliceConfig small_config() {
  SliceConfig c;
  c.input_dim = 5;
  c.hidden = {6, 4};
  c.attach_layers = {0, 1};
  c.models = 3;
  c.concepts = 3;
  c.classes = 2;
  c.rank = 2;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("adapted_linear hand example") {
  LinearBlock block{Tensor::from({2, 2}, std::vector<double>{1, 0, 0, 1}), Tensor::zeros({2})};
  AdapterModule a;
  a.U = Tensor::from({2, 1}, std::vector<double>{1, 0});
  a.V = Tensor::from({1, 2}, std::vector<double>{1, 1});
  a.rank = 1;
  a.scale = 2.0;
  Tape tape;
  ops::RngStream stream(0);
  const Tensor x = Tensor::from({1, 2}, std::vector<double>{1, 2});
  const Tensor y = adapted_linear(tape, x, block, &a, false, stream);
  CHECK(to_vec(y) == std::vector<double>{7, 2});

  a.U = Tensor::zeros({2, 1});
  CHECK(to_vec(adapted_linear(tape, x, block, &a, true, stream)) == std::vector<double>{1, 2});
}

TEST_CASE("adapted_linear rejects oversize rank and bad shapes") {
  LinearBlock block{Tensor::zeros({2, 3}), Tensor::zeros({2})};
  AdapterModule a;
  a.rank = 3;
  a.U = Tensor::zeros({2, 3});
  a.V = Tensor::zeros({3, 3});
  Tape tape;
  ops::RngStream stream(0);
  CHECK_THROWS_AS(adapted_linear(tape, Tensor::zeros({1, 3}), block, &a, false, stream),
                  ShapeError);
  CHECK_THROWS_AS(adapted_linear(tape, Tensor::zeros({1, 4}), block, nullptr, false, stream),
                  ShapeError);

  SliceConfig c = small_config();
  c.rank = 5;
  try {
    RashomonSlice bad(c);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "rank");
  }
}

TEST_CASE("full-rank adapter realizes any update via its SVD") {
  Rng rng(5);
  Eigen::Matrix3d delta;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) delta(i, j) = rng.normal();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(delta, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d U = svd.matrixU() * svd.singularValues().asDiagonal();
  const Eigen::Matrix3d V = svd.matrixV().transpose();

  LinearBlock block{random_input(1, 3, 3), random_input(2, 1, 3)};
  block.b = Tensor::from({3}, block.b.values());
  AdapterModule a;
  a.rank = 3;
  a.scale = 1.0;
  std::vector<double> u(9), v(9);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      u[i * 3 + j] = U(i, j);
      v[i * 3 + j] = V(i, j);
    }
  }
  a.U = Tensor::from({3, 3}, u);
  a.V = Tensor::from({3, 3}, v);

  const Tensor x = random_input(3, 4, 3);
  Tape tape;
  ops::RngStream stream(0);
  const Tensor y = adapted_linear(tape, x, block, &a, false, stream);
  for (std::size_t n = 0; n < 4; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      double expect = block.b.values()[i];
      for (std::size_t j = 0; j < 3; ++j) {
        expect += x.values()[n * 3 + j] * (block.W.values()[i * 3 + j] + delta(i, j));
      }
      CHECK(y.values()[n * 3 + i] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("manual forward trace through a 2-layer backbone") {
  SliceConfig c;
  c.input_dim = 2;
  c.hidden = {2, 2};
  c.attach_layers = {};
  c.models = 1;
  c.concepts = 2;
  c.classes = 2;
  RashomonSlice slice(c);
  const auto& bb = slice.backbone(0);
  set_values(bb[0].W, {1, -1, 2, 0.5});
  set_values(bb[0].b, {0, -1});
  set_values(bb[1].W, {1, 1, -1, 2});
  set_values(bb[1].b, {0.5, 0});
  set_values(slice.heads(0)[0].W, {1, 0});
  set_values(slice.heads(0)[0].b, {0});
  set_values(slice.heads(0)[1].W, {0, -1});
  set_values(slice.heads(0)[1].b, {1});
  set_values(slice.classifier(0).W, {2, 0, 0, 2});
  set_values(slice.classifier(0).b, {0, -1});

  // x=[1,0]: layer0 pre = [1, 2-1] = [1, 1] -> relu [1, 1]
  // layer1 pre = [1+1+0.5, -1+2] = [2.5, 1] -> relu [2.5, 1]
  // concept logits = [2.5, -1+1] = [2.5, 0]
  // probs = [σ(2.5), 0.5]; class logits = [2σ(2.5), 1-1] = [2σ(2.5), 0]
  Tape tape;
  const ForwardOutputs out =
      slice_forward(tape, slice, Tensor::from({1, 2}, std::vector<double>{1, 0}), 0, false, 0);
  const double s = 1.0 / (1.0 + std::exp(-2.5));
  CHECK(to_vec(out.concept_logits) == std::vector<double>{2.5, 0.0});
  CHECK(out.concept_probs.values()[0] == doctest::Approx(s).epsilon(1e-15));
  CHECK(out.concept_probs.values()[1] == 0.5);
  CHECK(out.class_logits.values()[0] == doctest::Approx(2 * s).epsilon(1e-15));
  CHECK(out.class_logits.values()[1] == 0.0);
}

TEST_CASE("fresh slice is invariant in the member index") {
  RashomonSlice slice(small_config());
  const Tensor x = random_input(4, 7, 5);
  for (bool train : {false, true}) {
    Tape tape;
    const ForwardOutputs ref = slice_forward(tape, slice, x, 0, train, 100);
    for (std::size_t m = 1; m < slice.models(); ++m) {
      const ForwardOutputs o = slice_forward(tape, slice, x, m, train, 100 + m);
      CHECK(to_vec(o.class_logits) == to_vec(ref.class_logits));
      CHECK(to_vec(o.concept_probs) == to_vec(ref.concept_probs));
    }
  }
}

TEST_CASE("adapter locality and member symmetry") {
  SliceConfig c = small_config();
  c.sharing_mask = {true, false};
  RashomonSlice slice(c);
  CHECK(slice.adapter(0, 0) == slice.adapter(2, 0));
  CHECK(slice.adapter(0, 1) != slice.adapter(1, 1));

  Rng rng(8);
  fill_random(slice.adapter(0, 0)->U, rng, 0.5);
  fill_random(slice.adapter(1, 1)->U, rng, 0.5);
  const Tensor x = random_input(9, 5, 5);
  Tape tape;
  const auto differ = to_vec(slice_forward(tape, slice, x, 1, false, 0).class_logits) !=
                      to_vec(slice_forward(tape, slice, x, 0, false, 0).class_logits);
  CHECK(differ);

  // Copy member 0's layer-1 adapter onto member 1: outputs coincide again.
  const AdapterModule* a0 = slice.adapter(0, 1);
  const AdapterModule* a1 = slice.adapter(1, 1);
  std::ranges::copy(a0->U.values(), Tensor(a1->U).mutable_values().begin());
  std::ranges::copy(a0->V.values(), Tensor(a1->V).mutable_values().begin());
  CHECK(to_vec(slice_forward(tape, slice, x, 1, false, 0).class_logits) ==
        to_vec(slice_forward(tape, slice, x, 0, false, 0).class_logits));
}

TEST_CASE("effective_weight") {
  SliceConfig c = small_config();
  RashomonSlice slice(c);
  CHECK(to_vec(effective_weight(slice, 1, 0)) == to_vec(slice.backbone(1)[0].W));

  // Rank-1 update with a known outer product.
  const AdapterModule* a = slice.adapter(1, 1);
  Tensor U = a->U;
  Tensor V = a->V;
  std::ranges::fill(U.mutable_values(), 0.0);
  std::ranges::fill(V.mutable_values(), 0.0);
  const std::vector<double> u{1, -2, 0.5, 3}, v{2, 0, 1, -1, 0.25, 4};
  for (std::size_t i = 0; i < 4; ++i) U.mutable_values()[i * 2] = u[i];
  for (std::size_t j = 0; j < 6; ++j) V.mutable_values()[j] = v[j];
  const Tensor eff = effective_weight(slice, 1, 1);
  const auto W = slice.backbone(1)[1].W.values();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(eff.values()[i * 6 + j] == doctest::Approx(W[i * 6 + j] + a->scale * u[i] * v[j]));
    }
  }

  SliceConfig zero = c;
  zero.lora_alpha = 0.0;
  RashomonSlice zs(zero);
  Rng rng(3);
  fill_random(zs.adapter(0, 0)->U, rng, 1.0);
  CHECK(to_vec(effective_weight(zs, 0, 0)) == to_vec(zs.backbone(0)[0].W));

  SliceConfig partial = c;
  partial.attach_layers = {1};
  CHECK_THROWS_AS(effective_weight(RashomonSlice(partial), 0, 0), ShapeError);
}

TEST_CASE("effective_weight is the Jacobian of adapted_linear") {
  RashomonSlice slice(small_config());
  Rng rng(21);
  for (std::size_t l = 0; l < 2; ++l) fill_random(slice.adapter(2, l)->U, rng, 0.3);
  for (std::size_t l = 0; l < 2; ++l) {
    const LinearBlock& blk = slice.backbone(2)[l];
    const std::size_t d_in = blk.W.cols();
    const std::size_t d_out = blk.W.rows();
    std::vector<double> eye(d_in * d_in, 0.0);
    for (std::size_t j = 0; j < d_in; ++j) eye[j * d_in + j] = 1.0;
    Tape tape;
    ops::RngStream stream(0);
    const Tensor y = adapted_linear(tape, Tensor::from({d_in, d_in}, eye), blk,
                                    slice.adapter(2, l), false, stream);
    const Tensor eff = effective_weight(slice, 2, l);
    for (std::size_t j = 0; j < d_in; ++j) {
      for (std::size_t i = 0; i < d_out; ++i) {
        const double column = y.values()[j * d_out + i] - blk.b.values()[i];
        CHECK(column == doctest::Approx(eff.values()[i * d_in + j]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("trainable parameter counts") {
  SliceConfig c;
  c.attach_layers = {};
  c.models = 1;
  c.concepts = 1;
  c.hidden = {7};
  RashomonSlice bare(c);
  std::size_t p_count = 0, p_tensors = 0;
  for (const NamedParameter& p : bare.trainable_parameters()) {
    if (p.concept_head) {
      p_count += p.tensor.size();
      ++p_tensors;
    }
  }
  CHECK(p_tensors == 2);
  CHECK(p_count == 8);

  auto adapter_tensors = [](const RashomonSlice& s) {
    std::size_t n = 0;
    for (const NamedParameter& p : s.trainable_parameters()) n += p.name.starts_with("adapter/");
    return n;
  };
  SliceConfig desk;  // defaults: 16 -> 128 -> 128 -> 128, r=2, M=4, p=12, K=8
  CHECK(adapter_tensors(RashomonSlice(desk)) == 4 * 3 * 2);
  SliceConfig all_shared = desk;
  all_shared.sharing_mask = {true, true, true};
  CHECK(adapter_tensors(RashomonSlice(all_shared)) == 3 * 2);

  // Adapters: 128·2 + 2·16, then 2·(128·2 + 2·128). Heads: 12·(128+1). Classifier: 8·12 + 8.
  const std::size_t adapters = (256 + 32) + 2 * (256 + 256);
  const std::size_t heads = 12 * 129;
  const std::size_t classifier = 104;
  RashomonSlice rashomon(desk);
  CHECK(rashomon.member_trainable_count(0) == adapters + heads + classifier);
  CHECK(rashomon.trainable_count() == 4 * (adapters + heads + classifier));

  SliceConfig x2c = desk;
  x2c.layout = Layout::kIndependentBackbones;
  RashomonSlice independent(x2c);
  const std::size_t backbone = (16 * 128 + 128) + 2 * (128 * 128 + 128);
  CHECK(independent.member_trainable_count(3) == backbone + heads + classifier);
  CHECK(10 * rashomon.member_trainable_count(0) < independent.member_trainable_count(0));

  for (const NamedParameter& p : rashomon.trainable_parameters()) {
    CHECK_FALSE(p.name.starts_with("backbone/"));
  }
  const auto first = rashomon.trainable_parameters();
  const auto second = rashomon.trainable_parameters();
  REQUIRE(first.size() == second.size());
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i].name == second[i].name);
}

TEST_CASE("independent members follow their seeds") {
  SliceConfig c = small_config();
  c.layout = Layout::kIndependentBackbones;
  RashomonSlice distinct(c);
  CHECK(to_vec(distinct.backbone(0)[0].W) != to_vec(distinct.backbone(1)[0].W));
  c.identical_member_seeds = true;
  RashomonSlice same(c);
  CHECK(to_vec(same.backbone(0)[0].W) == to_vec(same.backbone(2)[0].W));
  CHECK(to_vec(same.classifier(0).W) == to_vec(same.classifier(1).W));

  c.layout = Layout::kSharedEncoder;
  RashomonSlice shared(c);
  CHECK(shared.heads(0)[0].W.same_storage(shared.heads(2)[0].W));
  CHECK(shared.backbone(0)[1].W.same_storage(shared.backbone(1)[1].W));
}

TEST_CASE("slice checkpoint round trip") {
  SliceConfig c = small_config();
  c.sharing_mask = {false, true};
  RashomonSlice slice(c);
  Rng rng(2);
  fill_random(slice.adapter(1, 0)->U, rng, 0.4);
  fill_random(slice.adapter(0, 1)->U, rng, 0.4);
  const auto dir = std::filesystem::temp_directory_path() / "rcbm_slice_roundtrip";
  std::filesystem::remove_all(dir);
  save_slice(slice, dir);
  const RashomonSlice back = load_slice(dir);
  CHECK(back.backbone_digest() == slice.backbone_digest());
  const Tensor x = random_input(5, 3, 5);
  Tape tape;
  for (std::size_t m = 0; m < 3; ++m) {
    CHECK(to_vec(slice_forward(tape, back, x, m, false, 0).class_logits) ==
          to_vec(slice_forward(tape, slice, x, m, false, 0).class_logits));
  }
  CHECK(back.adapter(0, 1) == back.adapter(2, 1));
  std::filesystem::remove_all(dir);
}

TEST_CASE("slice_forward index errors") {
  RashomonSlice slice(small_config());
  Tape tape;
  CHECK_THROWS_AS(slice_forward(tape, slice, random_input(1, 2, 5), 3, false, 0), ShapeError);
  CHECK_THROWS_AS(slice_forward(tape, slice, random_input(1, 2, 4), 0, false, 0), ShapeError);
}

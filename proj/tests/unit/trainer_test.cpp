#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/rng.hpp"
#include "rcbm/trainer/trainer.hpp"

using namespace rcbm;
using namespace rcbm::trainer;
namespace fs = std::filesystem;

namespace {

Tensor row(std::initializer_list<double> v) {
  return Tensor::from({1, v.size()}, std::vector<double>(v));
}

datagen::PlantedConfig tiny_data() {
  datagen::PlantedConfig d;
  d.n = 240;
  d.seed = 3;
  return d;
}

modelzoo::SliceConfig tiny_slice(const TrainConfig& tc, const datagen::PlantedConfig& d,
                                 std::size_t models = 3) {
  modelzoo::SliceConfig s;
  s.hidden = {24, 24};
  s.attach_layers = {0, 1};
  s.models = models;
  s.seed = 5;
  return slice_config_for(tc, d, s);
}

std::vector<std::vector<double>> weights(const modelzoo::RashomonSlice& s) {
  std::vector<std::vector<double>> out;
  for (const auto& p : s.all_tensors()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

double max_abs_diff(const std::vector<std::vector<double>>& a,
                    const std::vector<std::vector<double>>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].size(); ++k) worst = std::max(worst, std::abs(a[i][k] - b[i][k]));
  }
  return worst;
}

}  // namespace

TEST_CASE("diversity loss hand values") {
  const double h = std::sqrt(0.5);
  const std::vector<Tensor> three{row({1, 0}), row({0, 1}), row({h, h})};
  const auto div = diversity_loss_values(three);
  // cos(1,2)=0, cos(1,3)=cos(2,3)=√2/2.
  const double c13 = h / std::sqrt(h * h + h * h);
  CHECK(div[0] == doctest::Approx(1.0 - (0.0 + c13) / 2.0).epsilon(1e-15));
  CHECK(div[0] == doctest::Approx(0.6464466094).epsilon(1e-9));
  CHECK(div[1] == doctest::Approx(1.0 - (0.0 + c13) / 2.0).epsilon(1e-15));
  CHECK(div[2] == doctest::Approx(1.0 - (c13 + c13) / 2.0).epsilon(1e-15));

  const std::vector<Tensor> same{row({0.2, 0.9, 0.4}), row({0.2, 0.9, 0.4}), row({0.2, 0.9, 0.4})};
  for (double d : diversity_loss_values(same)) CHECK(std::abs(d) < 1e-15);

  const std::vector<Tensor> ortho{row({1, 0}), row({0, 3})};
  for (double d : diversity_loss_values(ortho)) CHECK(d == 1.0);

  const std::vector<Tensor> single{row({1, 2})};
  CHECK(diversity_loss_values(single) == std::vector<double>{0.0});
}

TEST_CASE("diversity loss averages per-sample cosines unless flattened") {
  // Sample 1 orthogonal, sample 2 identical: per-sample mean sim = 0.5.
  const Tensor a = Tensor::from({2, 2}, std::vector<double>{1, 0, 1, 1});
  const Tensor b = Tensor::from({2, 2}, std::vector<double>{0, 1, 1, 1});
  const std::vector<Tensor> pair{a, b};
  CHECK(diversity_loss_values(pair)[0] == doctest::Approx(0.5).epsilon(1e-15));
  // Flattened: [1,0,1,1]·[0,1,1,1] / (√3·√3) = 2/3.
  CHECK(diversity_loss_values(pair, ops::CosineMode::kFlat)[0] ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("diversity loss stays in [0,2]") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> v;
    for (int m = 0; m < 4; ++m) {
      std::vector<double> x(15);
      for (double& e : x) e = rng.normal();
      v.push_back(Tensor::from({5, 3}, x));
    }
    for (double d : diversity_loss_values(v)) {
      CHECK(d >= 0.0);
      CHECK(d <= 2.0);
    }
  }
}

TEST_CASE("total loss arithmetic") {
  const std::vector<double> pr{0.2, 0.5}, c{0.1, 0.3}, div{0.4, 0.6};
  CHECK(total_loss_value(pr, c, div, 1.0, 0.5) == doctest::Approx(0.55).epsilon(1e-15));
  CHECK(total_loss_value(pr, c, div, 1.0, 0.0) == 0.5 + 0.3);
  CHECK(total_loss_value(pr, c, div, 0.0, 0.5) == 0.5);

  Tape tape;
  std::vector<Tensor> tpr, tc, tdiv;
  for (std::size_t m = 0; m < 2; ++m) {
    tpr.push_back(Tensor::scalar(pr[m], true));
    tc.push_back(Tensor::scalar(c[m], true));
    tdiv.push_back(Tensor::scalar(div[m], true));
  }
  const Tensor total = total_loss(tape, tpr, tc, tdiv, 1.0, 0.5);
  CHECK(total.item() == total_loss_value(pr, c, div, 1.0, 0.5));
  tape.backward(total);
  // Hard maxes route to model 1 only; every L_div gets −α/M·λ.
  CHECK(tpr[0].grad_or_zero()[0] == 0.0);
  CHECK(tpr[1].grad()[0] == 1.0);
  CHECK(tc[0].grad_or_zero()[0] == 0.0);
  CHECK(tc[1].grad()[0] == 1.0);
  CHECK(tdiv[0].grad()[0] == -0.25);
  CHECK(tdiv[1].grad()[0] == -0.25);

  Tape bad;
  std::vector<Tensor> nan_pr{Tensor::scalar(0.1), Tensor::scalar(0.2)};
  Tensor(nan_pr[1]).mutable_values()[0] = std::nan("");
  CHECK_THROWS_AS(total_loss(bad, nan_pr, tc, tdiv, 1.0, 0.5), NumericError);
}

TEST_CASE("alpha from head gradients") {
  Tensor w = Tensor::zeros({1, 4}, true);
  Tensor b = Tensor::zeros({1}, true);
  const std::vector<Tensor> P{w, b};
  CHECK(alpha_from_grads(P) == 0.5);

  w.accumulate_grad(std::vector<double>{0.2, -0.6, 0.4, -0.4});  // mean |g| = 0.4
  b.accumulate_grad(std::vector<double>{-0.4});
  CHECK(alpha_from_grads(P) == doctest::Approx(0.598687660112452).epsilon(1e-14));
  CHECK_THROWS_AS(alpha_from_grads(std::span<const Tensor>{}), ConfigError);
}

TEST_CASE("config validation names the field") {
  TrainConfig c;
  c.batch_size = 0;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "batch_size");
  }
  CHECK_THROWS_AS(parse_mode("ensemble"), ConfigError);

  TrainConfig d;
  d.lambda = 0.25;
  d.mode = Mode::kC2y;
  d.alpha = {true, 0.0};
  d.similarity = ops::CosineMode::kFlat;
  const TrainConfig back = nlohmann::json(d).get<TrainConfig>();
  CHECK(back.lambda == 0.25);
  CHECK(back.mode == Mode::kC2y);
  CHECK(back.alpha.fixed);
  CHECK(back.similarity == ops::CosineMode::kFlat);
}

TEST_CASE("one step with learning rate 0 leaves weights unchanged") {
  const auto data = datagen::generate(tiny_data());
  TrainConfig tc;
  tc.learning_rate = 0.0;
  modelzoo::RashomonSlice slice(tiny_slice(tc, data.config));
  const auto before = weights(slice);
  Adam opt(trainable_tensors(slice));
  TrainState state;
  const Batch batch = make_batch(datagen::gather(data, data.splits.train));
  train_step(slice, batch, tc, state, opt);
  CHECK(weights(slice) == before);
}

TEST_CASE("checkpointing on and off give identical steps") {
  const auto data = datagen::generate(tiny_data());
  for (Mode mode : {Mode::kRashomon, Mode::kX2c, Mode::kC2y}) {
    CAPTURE(mode_name(mode));
    TrainConfig tc;
    tc.mode = mode;
    tc.learning_rate = 1e-2;
    modelzoo::SliceConfig sc = tiny_slice(tc, data.config);
    if (mode == Mode::kRashomon) sc.sharing_mask = {true, false};

    std::vector<std::vector<std::vector<double>>> final_weights;
    std::vector<std::vector<LossBreakdown>> logs;
    std::vector<std::size_t> peaks;
    for (bool ckpt : {true, false}) {
      tc.checkpointing = ckpt;
      modelzoo::RashomonSlice slice(sc);
      Adam opt(trainable_tensors(slice));
      TrainState state;
      std::vector<LossBreakdown> log;
      for (std::size_t start = 0; start < 160; start += 32) {
        const std::vector<std::size_t> rows(data.splits.train.begin() + start,
                                            data.splits.train.begin() + start + 32);
        log.push_back(train_step(slice, make_batch(datagen::gather(data, rows)), tc, state, opt));
      }
      final_weights.push_back(weights(slice));
      logs.push_back(log);
      peaks.push_back(state.peak_bytes);
    }
    CHECK(max_abs_diff(final_weights[0], final_weights[1]) < 1e-12);
    for (std::size_t s = 0; s < logs[0].size(); ++s) {
      CHECK(std::abs(logs[0][s].total - logs[1][s].total) < 1e-12);
      for (std::size_t m = 0; m < 3; ++m) {
        CHECK(std::abs(logs[0][s].per_model_div[m] - logs[1][s].per_model_div[m]) < 1e-12);
      }
    }
    CHECK(peaks[0] < peaks[1]);
  }
}

TEST_CASE("logged breakdowns reproduce the objective") {
  const auto data = datagen::generate(tiny_data());
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.lambda = 0.7;
  modelzoo::RashomonSlice slice(tiny_slice(tc, data.config));
  Adam opt(trainable_tensors(slice));
  TrainState state;
  state.alpha = 0.63;
  const Batch batch = make_batch(datagen::gather(data, data.splits.train));
  for (int i = 0; i < 5; ++i) {
    const LossBreakdown b = train_step(slice, batch, tc, state, opt);
    CHECK(b.total == total_loss_value(b.per_model_pr, b.per_model_c, b.per_model_div, b.lambda,
                                      b.alpha));
    for (double d : b.per_model_div) {
      CHECK(d >= 0.0);
      CHECK(d <= 2.0);
    }
  }
}

TEST_CASE("alpha zero leaves non-argmax classifiers without gradient") {
  const auto data = datagen::generate(tiny_data());
  TrainConfig tc;
  tc.mode = Mode::kX2c;
  tc.alpha = {true, 0.0};
  tc.learning_rate = 0.0;
  const Batch batch = make_batch(datagen::gather(data, data.splits.train));
  bool checked = false;
  for (std::uint64_t seed = 0; seed < 20 && !checked; ++seed) {
    modelzoo::SliceConfig sc = tiny_slice(tc, data.config);
    sc.seed = seed;
    modelzoo::RashomonSlice slice(sc);
    Adam opt(trainable_tensors(slice));
    TrainState state;
    state.alpha = 0.0;
    const LossBreakdown b = train_step(slice, batch, tc, state, opt);
    const auto arg = [](const std::vector<double>& v) {
      return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    };
    const std::size_t top = arg(b.per_model_pr);
    if (top != arg(b.per_model_c)) continue;
    checked = true;
    for (std::size_t m = 0; m < slice.models(); ++m) {
      const auto& cls = slice.classifier(m);
      const auto g = cls.W.grad_or_zero();
      const bool all_zero = std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; });
      CHECK(all_zero == (m != top));
    }
  }
  CHECK(checked);
}

TEST_CASE("training: determinism, frozen backbone, alpha range") {
  auto cfg = tiny_data();
  const auto data = datagen::generate(cfg);
  TrainConfig tc;
  tc.learning_rate = 5e-3;
  tc.max_epochs = 4;
  tc.batch_size = 32;
  const auto sc = tiny_slice(tc, data.config);

  modelzoo::RashomonSlice a(sc), b(sc);
  const std::string digest = a.backbone_digest();
  const fs::path log = fs::temp_directory_path() / "rcbm_trainer_log.jsonl";
  const TrainResult ra = train(a, data, tc, log);
  const TrainResult rb = train(b, data, tc);
  CHECK(weights(a) == weights(b));
  CHECK(a.backbone_digest() == digest);
  CHECK(ra.state.log.size() == 4);
  for (double alpha : ra.state.alpha_history) {
    CHECK(alpha > 0.0);
    CHECK(alpha < 1.0);
  }
  for (const EpochRecord& r : ra.state.log) {
    CHECK(r.val.total == total_loss_value(r.val.per_model_pr, r.val.per_model_c,
                                          r.val.per_model_div, r.val.lambda, r.val.alpha));
  }

  std::ifstream in(log);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("epoch"));
    CHECK(j.contains("alpha"));
    CHECK(j.contains("peak_bytes"));
    CHECK(j["val_task_accuracy"].size() == 3);
    ++lines;
  }
  CHECK(lines == 4);
  fs::remove(log);

  TrainConfig fixed = tc;
  fixed.alpha = {true, 0.3};
  modelzoo::RashomonSlice c(sc);
  const TrainResult rc = train(c, data, fixed);
  CHECK(rc.state.alpha_history.empty());
  for (const EpochRecord& r : rc.state.log) CHECK(r.alpha == 0.3);
}

TEST_CASE("patience stops a separable toy early") {
  datagen::PlantedConfig cfg = tiny_data();
  cfg.noise_std = 0.0;
  cfg.concept_flip_rate = 0.0;
  const auto data = datagen::generate(cfg);
  TrainConfig tc;
  tc.learning_rate = 5e-2;
  tc.patience = 1;
  tc.max_epochs = 200;
  modelzoo::RashomonSlice slice(tiny_slice(tc, data.config, 2));
  const TrainResult r = train(slice, data, tc);
  CHECK(r.state.log.size() < tc.max_epochs);
  // Best weights restored: evaluating again reproduces the best validation loss.
  const Batch val = make_batch(datagen::gather(data, data.splits.val));
  const double alpha_at_best = [&] {
    for (const EpochRecord& e : r.state.log) {
      if (e.val.total == r.state.best_val_total) return e.val.alpha;
    }
    return -1.0;
  }();
  REQUIRE(alpha_at_best >= 0.0);
  CHECK(evaluate(slice, val, tc, alpha_at_best).losses.total == r.state.best_val_total);
}

TEST_CASE("random_init members train separately") {
  const auto data = datagen::generate(tiny_data());
  TrainConfig tc;
  tc.mode = Mode::kRandomInit;
  tc.learning_rate = 5e-3;
  tc.max_epochs = 2;
  auto sc = tiny_slice(tc, data.config);
  sc.identical_member_seeds = true;
  modelzoo::RashomonSlice same(sc);
  const TrainResult r = train(same, data, tc);
  CHECK(r.member_states.size() == 3);
  CHECK(r.state.log.size() == 6);
  for (const auto& rec : r.state.log) CHECK(rec.member.has_value());
  const auto w0 = same.member_parameters(0);
  const auto w2 = same.member_parameters(2);
  for (std::size_t i = 0; i < w0.size(); ++i) {
    CHECK(std::ranges::equal(w0[i].tensor.values(), w2[i].tensor.values()));
  }

  modelzoo::RashomonSlice wrong(tiny_slice(TrainConfig{}, data.config));
  CHECK_THROWS_AS(train(wrong, data, tc), ConfigError);
}

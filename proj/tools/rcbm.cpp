#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rcbm/datagen/planted.hpp"
#include "rcbm/experiments/experiments.hpp"
#include "rcbm/metrics/metrics.hpp"
#include "rcbm/modelzoo/slice.hpp"
#include "rcbm/tensorcore/error.hpp"
#include "rcbm/tensorcore/gradcheck.hpp"
#include "rcbm/tensorcore/io.hpp"

#ifndef RCBM_VERSION
#define RCBM_VERSION "0.0.0"
#endif

using namespace rcbm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kConfigExit = 2;
constexpr int kNumericExit = 3;
constexpr int kIoExit = 4;

struct Manifest {
  explicit Manifest(std::string cmd) : command(std::move(cmd)) {}

  std::string command;
  std::string config_digest;
  std::optional<std::uint64_t> seed;
  json inputs = json::object();
  json outputs = json::array();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& path) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const json j{{"command", command},
                 {"config_digest", config_digest},
                 {"seed", seed ? json(*seed) : json(nullptr)},
                 {"tool_version", RCBM_VERSION},
                 {"inputs", inputs},
                 {"outputs", outputs},
                 {"wall_clock_seconds", secs}};
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

experiments::RunConfig read_config(const std::string& path, std::optional<std::uint64_t> seed) {
  experiments::RunConfig c = experiments::load_config(path);
  if (seed) c.seed = seed;
  c.validate();
  return c;
}

std::vector<std::size_t> parse_ids(const std::string& text, const char* field) {
  std::vector<std::size_t> ids;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      ids.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(field, "not a non-negative integer: '" + item + "'");
    }
  }
  if (ids.empty()) throw ConfigError(field, "empty id list");
  return ids;
}

// A trained run directory (checkpoint/ + config.json) or a bare checkpoint.
struct LoadedModel {
  modelzoo::RashomonSlice slice;
  std::string digest;
  metrics::ReportOptions options;
};

LoadedModel load_model(const fs::path& dir) {
  if (fs::exists(dir / "checkpoint" / "model.json")) {
    LoadedModel m{modelzoo::load_slice(dir / "checkpoint"), "", {}};
    if (fs::exists(dir / "config.json")) {
      const json j = json::parse(read_file(dir / "config.json"));
      const auto run = j.at("config").get<experiments::RunConfig>();
      m.digest = j.at("config_digest").get<std::string>();
      m.options = run.metrics;
    }
    return m;
  }
  modelzoo::RashomonSlice slice = modelzoo::load_slice(dir);
  const std::string digest = sha256_hex(json(slice.config()).dump());
  return {std::move(slice), digest, {}};
}

int gen_data(const std::string& config_path, const fs::path& out,
             std::optional<std::uint64_t> seed) {
  Manifest manifest{"gen-data"};
  const auto config = read_config(config_path, seed);
  const auto r = config.resolved();
  manifest.config_digest = config.digest();
  manifest.seed = config.seed;
  manifest.inputs = {{"config", config_path}};
  const auto data = datagen::generate(r.data);
  datagen::save(data, out);
  write_file_atomic(out / "config.json",
                    json{{"config", r}, {"config_digest", manifest.config_digest}}.dump(2) + "\n");
  manifest.outputs = {out.string()};
  manifest.write(out / "manifest.json");
  std::cout << "wrote " << data.size() << " samples to " << out.string() << "\n";
  return kOk;
}

experiments::RunConfig matched_config(experiments::RunConfig config,
                                      const datagen::ConceptDataset& data) {
  // The dataset on disk decides the model dimensions.
  const std::uint64_t data_seed = data.config.seed;
  config.data = data.config;
  config.data.seed = data_seed;
  return config;
}

int train(const std::string& config_path, const fs::path& data_dir, const fs::path& out,
          std::optional<std::uint64_t> seed) {
  Manifest manifest{"train"};
  const auto data = datagen::load(data_dir);
  const auto config = matched_config(read_config(config_path, seed), data);
  manifest.config_digest = config.digest();
  manifest.seed = config.seed;
  manifest.inputs = {{"config", config_path}, {"data", data_dir.string()}};
  const auto outcome = experiments::run_training(config, data, out);
  manifest.outputs = {(out / "checkpoint").string(), (out / "train_log.jsonl").string(),
                      (out / "metrics.json").string(), (out / "config.json").string()};
  manifest.write(out / "manifest.json");
  std::cout << "trained " << outcome.report.task_accuracy.size() << " models for "
            << outcome.training.state.log.size() << " epoch records; test accuracy";
  for (double a : outcome.report.task_accuracy) std::cout << ' ' << a;
  std::cout << "\n";
  return kOk;
}

int eval(const fs::path& model_dir, const fs::path& data_dir, const fs::path& out) {
  Manifest manifest{"eval"};
  const auto data = datagen::load(data_dir);
  const LoadedModel model = load_model(model_dir);
  manifest.config_digest = model.digest;
  manifest.inputs = {{"model", model_dir.string()}, {"data", data_dir.string()}};
  const auto report = metrics::evaluate_slice(
      model.slice, datagen::gather(data, data.splits.test), model.digest, model.options);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_atomic(out, metrics::to_json(report).dump(2) + "\n");
  manifest.outputs = {out.string()};
  manifest.write(fs::path(out.string() + ".manifest.json"));
  std::cout << "wrote metrics report to " << out.string() << "\n";
  return kOk;
}

int ablate(const std::string& config_path, const fs::path& data_dir, const fs::path& out,
           std::optional<std::uint64_t> seed) {
  Manifest manifest{"ablate-layers"};
  const auto data = datagen::load(data_dir);
  const auto config = matched_config(read_config(config_path, seed), data);
  manifest.config_digest = config.digest();
  manifest.seed = config.seed;
  manifest.inputs = {{"config", config_path}, {"data", data_dir.string()}};
  const auto rows = experiments::run_layer_ablation(config, data, out);
  manifest.outputs = {(out / "ablation.csv").string()};
  manifest.write(out / "manifest.json");
  std::cout << experiments::ablation_csv(rows);
  return kOk;
}

int sweep(const std::string& config_path, const fs::path& data_dir, const fs::path& out,
          std::optional<std::uint64_t> seed) {
  Manifest manifest{"sweep-m"};
  const auto data = datagen::load(data_dir);
  const auto config = matched_config(read_config(config_path, seed), data);
  manifest.config_digest = config.digest();
  manifest.seed = config.seed;
  manifest.inputs = {{"config", config_path}, {"data", data_dir.string()}};
  const auto rows = experiments::run_m_sweep(config, data, out);
  manifest.outputs = {(out / "sweep.csv").string()};
  manifest.write(out / "manifest.json");
  std::cout << experiments::sweep_csv(rows);
  return kOk;
}

int heatmaps(const fs::path& model_dir, const fs::path& data_dir, const std::string& samples,
             const std::string& concepts, const fs::path& out) {
  Manifest manifest{"export-heatmaps"};
  const auto data = datagen::load(data_dir);
  const LoadedModel model = load_model(model_dir);
  manifest.config_digest = model.digest;
  manifest.inputs = {{"model", model_dir.string()}, {"data", data_dir.string()},
                     {"samples", samples}, {"concepts", concepts}};
  std::vector<std::size_t> concept_ids;
  if (concepts.empty()) {
    for (std::size_t j = 0; j < data.config.p; ++j) concept_ids.push_back(j);
  } else {
    concept_ids = parse_ids(concepts, "concepts");
  }
  json j = experiments::export_heatmap_data(model.slice, data, parse_ids(samples, "samples"),
                                            concept_ids);
  j["config_digest"] = model.digest;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_atomic(out, j.dump(2) + "\n");
  manifest.outputs = {out.string()};
  manifest.write(fs::path(out.string() + ".manifest.json"));
  std::cout << "wrote heatmap data to " << out.string() << "\n";
  return kOk;
}

int gradcheck(std::uint64_t seed, std::size_t graphs) {
  GradcheckOptions options;
  options.seed = seed;
  options.graphs = graphs;
  GradcheckReport report = run_gradcheck(options);
  run_checkpoint_equivalence(options, report);
  std::printf("graphs %zu entries %zu kink entries %zu\n", report.graphs, report.entries,
              report.kink_entries);
  std::printf("max relative error %.3e (tolerance %.0e)\n", report.max_relative_error,
              options.relative_tolerance);
  std::printf("max absolute error on small entries %.3e (tolerance %.0e)\n",
              report.max_small_abs_error, options.small_threshold);
  std::printf("checkpoint max difference %.3e (tolerance %.0e)\n", report.checkpoint_max_diff,
              options.checkpoint_tolerance);
  for (const auto& f : report.failures) std::printf("FAIL %s\n", f.c_str());
  std::printf("%s\n", report.passed() ? "gradcheck passed" : "gradcheck failed");
  return report.passed() ? kOk : kNumericExit;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rashomon concept-bottleneck slices: data, training, metrics, experiments"};
  app.set_version_flag("--version", RCBM_VERSION);
  app.require_subcommand(1);

  std::string config, data, out, model, samples, concepts;
  std::optional<std::uint64_t> seed;
  std::uint64_t check_seed = 0;
  std::size_t graphs = 25;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Master seed; overrides the config's seed");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a planted concept dataset");
  gen->add_option("--config", config, "Run config (JSON); uses its data section")->required();
  gen->add_option("--out", out, "Output dataset directory")->required();
  add_seed(gen);

  auto* tr = app.add_subcommand("train", "Train a slice and write checkpoint, log and metrics");
  tr->add_option("--config", config, "Run config (JSON)")->required();
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--out", out, "Output run directory")->required();
  add_seed(tr);

  auto* ev = app.add_subcommand("eval", "Write the metrics report for a trained slice");
  ev->add_option("--model", model, "Run directory or checkpoint directory")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--out", out, "Output report file (JSON)")->required();

  auto* ab = app.add_subcommand("ablate-layers", "Free one adapter layer at a time and retrain");
  ab->add_option("--config", config, "Run config (JSON); uses its ablation section")->required();
  ab->add_option("--data", data, "Dataset directory")->required();
  ab->add_option("--out", out, "Results directory")->required();
  add_seed(ab);

  auto* sw = app.add_subcommand("sweep-m", "Train slices of increasing size M");
  sw->add_option("--config", config, "Run config (JSON); uses its sweep section")->required();
  sw->add_option("--data", data, "Dataset directory")->required();
  sw->add_option("--out", out, "Results directory")->required();
  add_seed(sw);

  auto* hm = app.add_subcommand("export-heatmaps", "Export SHAP, belief and weight panels");
  hm->add_option("--model", model, "Run directory or checkpoint directory")->required();
  hm->add_option("--data", data, "Dataset directory")->required();
  hm->add_option("--samples", samples, "Comma-separated sample ids (dataset rows)")->required();
  hm->add_option("--concepts", concepts, "Comma-separated concept ids (default: all)");
  hm->add_option("--out", out, "Output file (JSON)")->required();

  auto* gc = app.add_subcommand("gradcheck", "Run finite-difference and checkpoint suites");
  gc->add_option("--seed", check_seed, "Seed of the random graphs");
  gc->add_option("--graphs", graphs, "Number of random graphs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigExit;
  }

  try {
    if (*gen) return gen_data(config, out, seed);
    if (*tr) return train(config, data, out, seed);
    if (*ev) return eval(model, data, out);
    if (*ab) return ablate(config, data, out, seed);
    if (*sw) return sweep(config, data, out, seed);
    if (*hm) return heatmaps(model, data, samples, concepts, out);
    if (*gc) return gradcheck(check_seed, graphs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericExit;
  } catch (const DegenerateError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericExit;
  } catch (const TapeError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericExit;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoExit;
  } catch (const ShapeError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIoExit;
  } catch (const json::exception& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIoExit;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoExit;
  }
  return kOk;
}

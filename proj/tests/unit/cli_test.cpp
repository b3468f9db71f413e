#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "rcbm/tensorcore/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kScratch = fs::temp_directory_path() / "rcbm_cli_test";

struct Outcome {
  int code;
  std::string err;
};

Outcome run(const std::string& args) {
  const fs::path err = kScratch / "stderr.txt";
  const std::string cmd = std::string(RCBM_BINARY) + " " + args + " >/dev/null 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), rcbm::read_file(err)};
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path path = kScratch / name;
  rcbm::write_file_atomic(path, j.dump(2));
  return path;
}

std::string p(const fs::path& path) { return path.string(); }

}  // namespace

TEST_CASE("cli") {
  fs::remove_all(kScratch);
  fs::create_directories(kScratch);
  const json planted{{"seed", 3},
                     {"train", {{"learning_rate", 3e-3}, {"max_epochs", 4}}},
                     {"slice", {{"models", 4}}}};
  const fs::path config = write_config("planted.json", planted);

  SUBCASE("gradcheck on the default seed succeeds") { CHECK(run("gradcheck").code == 0); }

  SUBCASE("help documents every subcommand") {
    CHECK(run("--help").code == 0);
    for (const char* sub : {"gen-data", "train", "eval", "ablate-layers", "sweep-m",
                            "export-heatmaps", "gradcheck"}) {
      CHECK(run(std::string(sub) + " --help").code == 0);
    }
  }

  SUBCASE("full pipeline and reproducibility") {
    const fs::path data = kScratch / "data";
    REQUIRE(run("gen-data --config " + p(config) + " --out " + p(data)).code == 0);
    for (const char* run_name : {"run_a", "run_b"}) {
      REQUIRE(run("train --config " + p(config) + " --data " + p(data) + " --out " +
                  p(kScratch / run_name))
                  .code == 0);
    }
    const fs::path report = kScratch / "report.json";
    REQUIRE(run("eval --model " + p(kScratch / "run_a") + " --data " + p(data) + " --out " +
                p(report))
                .code == 0);
    const json r = json::parse(rcbm::read_file(report));
    CHECK(r["models"] == 4);
    for (const char* family : {"hamming", "concept_cka", "shap"}) {
      CAPTURE(family);
      CHECK(r["similarity"][family]["off_mean"].is_number());
    }
    CHECK(r["union_size"]["10"].is_number());
    CHECK(r["eigvec"].size() == 3);
    CHECK(r == json::parse(rcbm::read_file(kScratch / "run_a" / "metrics.json")));

    // Identical command, config and seed: identical artifacts, wall clock aside.
    for (const char* f : {"config.json", "train_log.jsonl", "metrics.json",
                          "checkpoint/weights.bin", "checkpoint/model.json"}) {
      CAPTURE(f);
      CHECK(rcbm::read_file(kScratch / "run_a" / f) == rcbm::read_file(kScratch / "run_b" / f));
    }
    json ma = json::parse(rcbm::read_file(kScratch / "run_a" / "manifest.json"));
    json mb = json::parse(rcbm::read_file(kScratch / "run_b" / "manifest.json"));
    CHECK(ma["config_digest"] == mb["config_digest"]);
    CHECK(ma["seed"] == 3);

    const fs::path heat = kScratch / "heat.json";
    CHECK(run("export-heatmaps --model " + p(kScratch / "run_a") + " --data " + p(data) +
              " --samples 1,2 --out " + p(heat))
              .code == 0);
    CHECK(json::parse(rcbm::read_file(heat))["models"].size() == 4);
    const Outcome bad_sample = run("export-heatmaps --model " + p(kScratch / "run_a") +
                                   " --data " + p(data) + " --samples 99999 --out " + p(heat));
    CHECK(bad_sample.code == 2);
    CHECK(bad_sample.err.find("samples") != std::string::npos);

    const Outcome bad = run("train --config " +
                            p(write_config("bad.json", {{"train", {{"batch_size", 0}}}})) +
                            " --data " + p(data) + " --out " + p(kScratch / "bad"));
    CHECK(bad.code == 2);
    CHECK(bad.err.find("batch_size") != std::string::npos);

    rcbm::write_file_atomic(data / "data.bin", "truncated");
    const Outcome broken = run("train --config " + p(config) + " --data " + p(data) + " --out " +
                               p(kScratch / "broken"));
    CHECK(broken.code == 4);
    CHECK(broken.err.find("data.bin") != std::string::npos);
  }

  SUBCASE("missing files and malformed configs are format errors") {
    const Outcome missing = run("gen-data --config " + p(kScratch / "absent.json") + " --out " +
                                p(kScratch / "d"));
    CHECK(missing.code == 4);
    CHECK(missing.err.find("absent.json") != std::string::npos);
    rcbm::write_file_atomic(kScratch / "garbled.json", "{ not json");
    CHECK(run("gen-data --config " + p(kScratch / "garbled.json") + " --out " + p(kScratch / "d"))
              .code == 4);
    CHECK(run("train --config " + p(config)).code == 2);
  }
  fs::remove_all(kScratch);
}

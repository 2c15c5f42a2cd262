#include <cstdlib>
#include <sstream>

#include "doctest.h"
#include "lipsync/cli.hpp"
#include "lipsync/sync_expert.hpp"
#include "support.hpp"

using namespace lipsync;
using lipsync::testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

void write_tiny_config(const std::filesystem::path& p) {
  std::ofstream(p) << R"({
  "model": {"image_size": 16, "base_channels": 8, "channel_mult": [1, 2], "num_res_blocks": 1,
            "attention_resolutions": [8], "embedding_width": 16, "norm_groups": 4, "audio_channels": 4},
  "perceptual": {"channels": [4, 4, 4], "layers": [0, 1, 2]},
  "disc": {"channels": 8},
  "train": {"batch_size": 1, "steps": 1, "log_every": 1}
})";
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  auto r = run({});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("datagen") != std::string::npos);
  r = run({"datagen", "--out", "/tmp/x", "--clips", "2", "--frames", "8", "--bogus"});
  CHECK(r.code == cli::kExitUsage);
  r = run({"frobnicate"});
  CHECK(r.code == cli::kExitUsage);
  r = run({"sample", "--ckpt", "x", "--video", "/tmp", "--audio", "/nonexistent.wav", "--out", "y"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(run({"--help"}).code == cli::kExitOk);
}

TEST_CASE("runtime failures exit with 2") {
  TempDir dir("cli_runtime");
  std::ofstream(dir.path() / "cfg.json") << "{not json";
  const auto r = run({"train", "--config", (dir.path() / "cfg.json").string(), "--data", dir.path().string(),
                      "--out", (dir.path() / "run").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(r.err.find("not valid JSON") != std::string::npos);
}

TEST_CASE("datagen, train with an ablation, sample and eval end to end") {
  TempDir dir("cli_e2e");
  const auto corpus = dir.path() / "corpus";
  auto r = run({"datagen", "--out", corpus.string(), "--clips", "10", "--frames", "12", "--seed", "4",
                "--size", "16", "--workers", "2"});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(std::filesystem::exists(corpus / "corpus.json"));

  const auto cfg = dir.path() / "toy.json";
  write_tiny_config(cfg);
  const auto run_dir = dir.path() / "run";
  r = run({"train", "--config", cfg.string(), "--data", corpus.string(), "--out", run_dir.string(),
           "--ablation", "reconstruction", "--set", "train.lr=0.0005"});
  REQUIRE(r.code == cli::kExitOk);
  const auto written = read_json(run_dir / "config.json");
  for (const char* key : {"loss.lambda_l2", "loss.lambda_sync", "loss.lambda_lpips", "loss.lambda_gan"}) {
    CHECK(written.at(key).get<double>() == 0.0);
  }
  CHECK(written.at("train.lr").get<double>() == 0.0005);

  const auto out = dir.path() / "sampled" / "clip_00000";
  r = run({"sample", "--ckpt", run_dir.string(), "--video", (corpus / "clip_00000").string(), "--audio",
           (corpus / "clip_00001" / "audio.wav").string(), "--out", out.string(), "--steps", "2"});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(r.out.find("wrote 12 frames") != std::string::npos);

  const auto expert = dir.path() / "expert";
  r = run({"train-syncnet", "--data", corpus.string(), "--out", expert.string(), "--set",
           "syncnet.max_steps=2", "--set", "syncnet.eval_every=1", "--set", "syncnet.batch_size=4",
           "--set", "syncnet.channels=4", "--set", "syncnet.eval_pairs=8"});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(read_json(expert / "config.json").at("syncnet.max_steps") == 2);

  r = run({"eval", "--pred", (dir.path() / "sampled").string(), "--ref", corpus.string(), "--expert",
           expert.string(), "--out", (dir.path() / "report.csv").string()});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(std::filesystem::exists(dir.path() / "report.csv"));
  CHECK(read_json(dir.path() / "report.json").at("clips") == 1);
}

TEST_CASE("seed precedence: flag over D2L_SEED over config") {
  TempDir dir("cli_seed");
  const auto corpus = dir.path() / "corpus";
  REQUIRE(run({"datagen", "--out", corpus.string(), "--clips", "10", "--frames", "12", "--size", "16"}).code ==
          cli::kExitOk);
  const std::vector<std::string> base{"train-syncnet", "--data", corpus.string(), "--set", "syncnet.max_steps=1",
                                      "--set", "syncnet.channels=4", "--set", "syncnet.batch_size=2", "--set",
                                      "syncnet.eval_pairs=4"};
  auto with_out = [&](const std::string& name, std::vector<std::string> extra) {
    auto args = base;
    args.push_back("--out");
    args.push_back((dir.path() / name).string());
    args.insert(args.end(), extra.begin(), extra.end());
    REQUIRE(run(args).code == cli::kExitOk);
    return read_json(dir.path() / name / "config.json").at("syncnet.seed").get<uint64_t>();
  };
  ::unsetenv("D2L_SEED");
  CHECK(with_out("plain", {}) == sync::ExpertHyper{}.seed);
  ::setenv("D2L_SEED", "11", 1);
  CHECK(with_out("env", {}) == 11);
  CHECK(with_out("set", {"--set", "syncnet.seed=3"}) == 3);
  CHECK(with_out("flag", {"--set", "syncnet.seed=3", "--seed", "12"}) == 12);
  ::setenv("D2L_SEED", "abc", 1);
  auto args = base;
  args.push_back("--out");
  args.push_back((dir.path() / "bad").string());
  CHECK(run(args).code == cli::kExitRuntime);
  ::unsetenv("D2L_SEED");
}

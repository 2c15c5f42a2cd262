#include "lipsync/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "lipsync/config.hpp"
#include "lipsync/dataset.hpp"
#include "lipsync/evaluation.hpp"
#include "lipsync/inference.hpp"
#include "lipsync/sync_expert.hpp"
#include "lipsync/toyset.hpp"
#include "lipsync/training.hpp"

namespace lipsync::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
  // datagen
  fs::path out;
  int clips = 0;
  int frames = 0;
  std::optional<uint64_t> seed;
  int size = 64;
  int workers = 1;
  // train-syncnet / train
  fs::path data;
  fs::path config;
  std::vector<std::string> sets;
  std::string ablation;
  fs::path expert;
  // sample
  fs::path ckpt, video, audio;
  std::string mode = "cross";
  int steps = 25;
  bool renoise = false;
  bool paste_back = false;
  // eval
  fs::path pred, ref;
  bool frechet = false;
};

json merged_config(const Options& o) {
  json flat = o.config.empty() ? json::object() : config::load_file(o.config);
  config::apply_env_seed(flat);
  for (const auto& s : o.sets) {
    auto [key, value] = config::parse_assignment(s);
    flat[key] = value;
  }
  if (o.seed) {
    flat["seed"] = *o.seed;
    flat["syncnet.seed"] = *o.seed;
  }
  return flat;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) {
    throw std::runtime_error("failed writing " + path.string());
  }
}

int run_datagen(const Options& o, std::ostream& out) {
  uint64_t seed = 0;
  if (o.seed) {
    seed = *o.seed;
  } else if (const char* env = std::getenv("D2L_SEED"); env != nullptr && *env != '\0') {
    json flat;
    config::apply_env_seed(flat);
    seed = flat["seed"].get<uint64_t>();
  }
  toyset::ToyConfig cfg;
  cfg.image_size = o.size;
  const auto m = toyset::generate_corpus(o.clips, o.frames, o.out, seed, cfg, o.workers);
  out << "wrote " << m.clips.size() << " clips (" << m.train.size() << " train, " << m.val.size()
      << " val, " << m.test.size() << " test) to " << o.out.string() << "\n";
  return kExitOk;
}

int run_train_syncnet(const Options& o, std::ostream& out) {
  const auto flat = merged_config(o);
  auto settings = config::expert_settings_from_json(flat);
  const auto corpus = data::load_corpus(o.data);
  settings.net.image_size = corpus.manifest.config.image_size;
  torch::manual_seed(settings.hyper.seed);
  sync::SyncNet expert(settings.net);
  const auto report = sync::train_expert(corpus, expert, settings.hyper, [&](int step, double acc) {
    out << "step " << step << " held-out accuracy " << acc << "\n" << std::flush;
  });
  json history = json::array();
  for (const auto& [step, acc] : report.history) {
    history.push_back({{"step", step}, {"accuracy", acc}});
  }
  const json extra{{"mel_range", {{"lo", corpus.manifest.mel_range.lo}, {"hi", corpus.manifest.mel_range.hi}}},
                   {"held_out_accuracy", report.held_out_accuracy},
                   {"initial_accuracy", report.initial_accuracy},
                   {"steps", report.steps},
                   {"history", history},
                   {"effective_config", config::to_json(settings)}};
  sync::save_expert(o.out, expert, extra);
  write_json(o.out / "config.json", config::to_json(settings));
  out << "sync expert: " << report.steps << " steps, held-out accuracy " << report.held_out_accuracy
      << "\n";
  return kExitOk;
}

int run_train(const Options& o, std::ostream& out) {
  auto flat = merged_config(o);
  if (!o.ablation.empty()) {
    config::apply_ablation(flat, o.ablation);
  }
  const auto cfg = train::train_config_from_json(config::training_part(flat));
  const auto effective = train::to_json(cfg);
  const auto corpus = data::load_corpus(o.data);
  fs::create_directories(o.out);
  write_json(o.out / "config.json", effective);
  train::RunOptions opts;
  opts.run_dir = o.out;
  opts.expert = o.expert;
  opts.effective_config = effective;
  opts.on_log = [&](const train::StepRecord& r) {
    out << "step " << r.step << " total " << r.generator.total;
    for (const auto& [name, v] : r.generator.terms) {
      out << " " << name << " " << v;
    }
    if (r.disc) {
      out << " disc " << *r.disc;
    }
    out << "\n" << std::flush;
  };
  train::run(cfg, corpus, opts);
  out << "trained to step " << cfg.steps << "; checkpoints under " << (o.out / "checkpoints").string()
      << "\n";
  return kExitOk;
}

int run_sample(const Options& o, std::ostream& out) {
  infer::SampleRequest req;
  req.checkpoint = o.ckpt;
  req.video = o.video;
  req.audio = o.audio;
  req.out = o.out;
  req.paste_back = o.paste_back;
  req.clip.mode = infer::parse_mode(o.mode);
  req.clip.sample.steps = o.steps;
  req.clip.sample.known = o.renoise ? infer::KnownRegion::Renoise : infer::KnownRegion::CleanHold;
  req.clip.workers = o.workers;
  json flat = json::object();
  config::apply_env_seed(flat);
  req.clip.seed = o.seed ? *o.seed : flat.value("seed", uint64_t{0});
  const auto frames = infer::sample_to_dir(req);
  out << "wrote " << frames << " frames to " << (o.out / "frames").string() << "\n";
  return kExitOk;
}

int run_eval(const Options& o, std::ostream& out) {
  const auto rows = eval::evaluate_dirs(o.pred, o.ref, o.expert);
  eval::write_report(o.out, rows);
  auto agg = eval::aggregate(rows);
  if (o.frechet) {
    losses::FeatureExtractor phi;
    const auto f = eval::feature_frechet(eval::load_frame_set({o.pred}), eval::load_frame_set({o.ref}), phi);
    agg["feature_frechet"] = f.distance;
    agg["feature_frechet_regularized"] = f.regularized;
    auto json_path = o.out;
    json_path.replace_extension(".json");
    write_json(fs::absolute(json_path), agg);
  }
  out << agg.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Audio-conditioned diffusion lip-sync toolkit", "lipsync"};
  app.require_subcommand(1);
  Options o;

  auto* datagen = app.add_subcommand("datagen", "Render a synthetic talking-face corpus");
  datagen->add_option("--out", o.out, "Output corpus directory")->required();
  datagen->add_option("--clips", o.clips, "Number of clips")->required()->check(CLI::PositiveNumber);
  datagen->add_option("--frames", o.frames, "Frames per clip")->required()->check(CLI::Range(5, 100000));
  datagen->add_option("--seed", o.seed, "Corpus seed");
  datagen->add_option("--size", o.size, "Frame size in pixels")->check(CLI::Range(16, 1024));
  datagen->add_option("--workers", o.workers, "Rendering threads")->check(CLI::PositiveNumber);

  auto* syncnet = app.add_subcommand("train-syncnet", "Train the audio-visual sync expert");
  syncnet->add_option("--data", o.data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  syncnet->add_option("--out", o.out, "Expert checkpoint directory")->required();
  syncnet->add_option("--config", o.config, "Flat JSON config")->check(CLI::ExistingFile);
  syncnet->add_option("--set", o.sets, "Config override key=value (repeatable)");
  syncnet->add_option("--seed", o.seed, "Seed override");

  auto* train = app.add_subcommand("train", "Train the denoiser");
  train->add_option("--config", o.config, "Flat JSON config")->required()->check(CLI::ExistingFile);
  train->add_option("--data", o.data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", o.out, "Run directory")->required();
  train->add_option("--ablation", o.ablation, "reconstruction | sync | perceptual | gan")
      ->check(CLI::IsMember({"reconstruction", "sync", "perceptual", "gan"}));
  train->add_option("--expert", o.expert, "Sync expert checkpoint (needed when lambda_sync > 0)");
  train->add_option("--set", o.sets, "Config override key=value (repeatable)");
  train->add_option("--seed", o.seed, "Seed override");

  auto* sample = app.add_subcommand("sample", "Lip-sync a clip to an audio track");
  sample->add_option("--ckpt", o.ckpt, "Run or checkpoint directory")->required();
  sample->add_option("--video", o.video, "Clip directory")->required()->check(CLI::ExistingDirectory);
  sample->add_option("--audio", o.audio, "Driving WAV")->required()->check(CLI::ExistingFile);
  sample->add_option("--mode", o.mode, "cross | recon")->check(CLI::IsMember({"cross", "recon"}));
  sample->add_option("--steps", o.steps, "DDIM steps")->check(CLI::PositiveNumber);
  sample->add_option("--out", o.out, "Output directory")->required();
  sample->add_option("--seed", o.seed, "Noise seed");
  sample->add_option("--workers", o.workers, "Parallel frame workers")->check(CLI::PositiveNumber);
  sample->add_flag("--renoise", o.renoise, "Re-noise the known region every step");
  sample->add_flag("--paste-back", o.paste_back, "Also write frames pasted into the source frames");

  auto* evaluate = app.add_subcommand("eval", "Score generated clips against references");
  evaluate->add_option("--pred", o.pred, "Generated clip directory (or parent of several)")
      ->required()
      ->check(CLI::ExistingDirectory);
  evaluate->add_option("--ref", o.ref, "Reference clip directory (or parent of several)")
      ->required()
      ->check(CLI::ExistingDirectory);
  evaluate->add_option("--expert", o.expert, "Sync expert checkpoint")->required();
  evaluate->add_option("--out", o.out, "Report CSV")->required();
  evaluate->add_flag("--frechet", o.frechet, "Also compute the feature-Frechet distance");

  std::vector<std::string> argv_store{"lipsync"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) {
    argv.push_back(a.c_str());
  }
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (datagen->parsed()) {
      return run_datagen(o, out);
    }
    if (syncnet->parsed()) {
      return run_train_syncnet(o, out);
    }
    if (train->parsed()) {
      return run_train(o, out);
    }
    if (sample->parsed()) {
      return run_sample(o, out);
    }
    if (evaluate->parsed()) {
      return run_eval(o, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace lipsync::cli

#include "lipsync/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lipsync/rng.hpp"
#include "lipsync/visual.hpp"

namespace lipsync::train {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr uint64_t kInitStream = 0xD1FF;

std::string fusion_name(model::EmbeddingFusion f) {
  return f == model::EmbeddingFusion::Sum ? "sum" : "concat";
}

model::EmbeddingFusion parse_fusion(const std::string& s) {
  if (s == "sum") {
    return model::EmbeddingFusion::Sum;
  }
  if (s == "concat") {
    return model::EmbeddingFusion::Concat;
  }
  throw std::invalid_argument("model.fusion must be \"sum\" or \"concat\", got \"" + s + "\"");
}

std::vector<size_t> eligible_clips(const data::Corpus& corpus, const std::vector<size_t>& clips) {
  std::vector<size_t> out;
  for (size_t c : clips) {
    if (corpus.clips.at(c).size() >= kWindow + 1) {
      out.push_back(c);
    } else {
      std::cerr << "warning: skipping clip " << corpus.clips[c].id << " with "
                << corpus.clips[c].size() << " frames (need at least " << kWindow + 1 << ")\n";
    }
  }
  return out;
}

bool all_finite(const LossBreakdown& b) {
  for (const auto& [name, v] : b.terms) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return std::isfinite(b.total);
}

void write_json_atomic(const fs::path& path, const json& j) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    out << j.dump(2) << "\n";
    if (!out) {
      throw std::runtime_error("failed writing " + path.string());
    }
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  return json::parse(in);
}

std::string csv_row(const StepRecord& r) {
  std::ostringstream os;
  os.precision(9);
  os << r.step;
  for (const auto& col : metric_columns()) {
    if (col == "step") {
      continue;
    }
    os << ",";
    if (col == "total") {
      os << r.generator.total;
    } else if (col == "disc") {
      if (r.disc) {
        os << *r.disc;
      }
    } else if (col == "wall_time") {
      os << r.wall_seconds;
    } else if (const auto it = r.generator.terms.find(col); it != r.generator.terms.end()) {
      os << it->second;
    }
  }
  return os.str();
}

// Drops rows logged after the checkpoint a resumed run restarts from.
void truncate_metrics(const fs::path& path, int64_t step) {
  std::ifstream in(path);
  if (!in) {
    return;
  }
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (keep.empty() || line.empty() || std::stoll(line.substr(0, line.find(','))) <= step) {
      if (!line.empty()) {
        keep.push_back(line);
      }
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) {
    out << l << "\n";
  }
}

}  // namespace

json to_json(const TrainConfig& c) {
  return json{{"seed", c.seed},
              {"diffusion.steps", c.diffusion_steps},
              {"diffusion.beta_start", c.beta_start},
              {"diffusion.beta_end", c.beta_end},
              {"model.image_size", c.model.image_size},
              {"model.base_channels", c.model.base_channels},
              {"model.channel_mult", c.model.channel_mult},
              {"model.num_res_blocks", c.model.num_res_blocks},
              {"model.attention_resolutions", c.model.attention_resolutions},
              {"model.attention_heads", c.model.attention_heads},
              {"model.embedding_width", c.model.embedding_width},
              {"model.norm_groups", c.model.norm_groups},
              {"model.audio_channels", c.model.audio_channels},
              {"model.fusion", fusion_name(c.model.fusion)},
              {"loss.lambda_l2", c.weights.l2},
              {"loss.lambda_sync", c.weights.sync},
              {"loss.lambda_lpips", c.weights.lpips},
              {"loss.lambda_gan", c.weights.gan},
              {"perceptual.channels", c.extractor.channels},
              {"perceptual.layers", c.extractor.used_layers},
              {"perceptual.seed", c.extractor.seed},
              {"disc.channels", c.disc.channels},
              {"train.batch_size", c.batch_size},
              {"train.lr", c.lr},
              {"train.disc_lr", c.disc_lr},
              {"train.ema_rate", c.ema_rate},
              {"train.steps", c.steps},
              {"train.checkpoint_every", c.checkpoint_every},
              {"train.log_every", c.log_every},
              {"train.clamp_x0", c.clamp_x0}};
}

TrainConfig train_config_from_json(const json& flat) {
  if (!flat.is_object()) {
    throw std::invalid_argument("training config must be a JSON object");
  }
  auto merged = to_json(TrainConfig{});
  for (const auto& [key, value] : flat.items()) {
    if (!merged.contains(key)) {
      throw std::invalid_argument("unknown training config key: " + key);
    }
    merged[key] = value;
  }
  TrainConfig c;
  try {
    c.seed = merged.at("seed").get<uint64_t>();
    c.diffusion_steps = merged.at("diffusion.steps").get<int>();
    c.beta_start = merged.at("diffusion.beta_start").get<double>();
    c.beta_end = merged.at("diffusion.beta_end").get<double>();
    c.model.image_size = merged.at("model.image_size").get<int>();
    c.model.base_channels = merged.at("model.base_channels").get<int>();
    c.model.channel_mult = merged.at("model.channel_mult").get<std::vector<int>>();
    c.model.num_res_blocks = merged.at("model.num_res_blocks").get<int>();
    c.model.attention_resolutions = merged.at("model.attention_resolutions").get<std::vector<int>>();
    c.model.attention_heads = merged.at("model.attention_heads").get<int>();
    c.model.embedding_width = merged.at("model.embedding_width").get<int>();
    c.model.norm_groups = merged.at("model.norm_groups").get<int>();
    c.model.audio_channels = merged.at("model.audio_channels").get<int>();
    c.model.fusion = parse_fusion(merged.at("model.fusion").get<std::string>());
    c.weights.l2 = merged.at("loss.lambda_l2").get<double>();
    c.weights.sync = merged.at("loss.lambda_sync").get<double>();
    c.weights.lpips = merged.at("loss.lambda_lpips").get<double>();
    c.weights.gan = merged.at("loss.lambda_gan").get<double>();
    c.extractor.channels = merged.at("perceptual.channels").get<std::vector<int>>();
    c.extractor.used_layers = merged.at("perceptual.layers").get<std::vector<int>>();
    c.extractor.seed = merged.at("perceptual.seed").get<uint64_t>();
    c.disc.channels = merged.at("disc.channels").get<int>();
    c.batch_size = merged.at("train.batch_size").get<int>();
    c.lr = merged.at("train.lr").get<double>();
    c.disc_lr = merged.at("train.disc_lr").get<double>();
    c.ema_rate = merged.at("train.ema_rate").get<double>();
    c.steps = merged.at("train.steps").get<int>();
    c.checkpoint_every = merged.at("train.checkpoint_every").get<int>();
    c.log_every = merged.at("train.log_every").get<int>();
    c.clamp_x0 = merged.at("train.clamp_x0").get<bool>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("training config: ") + e.what());
  }
  c.weights.validate();
  c.model.validate();
  if (c.batch_size < 1 || c.steps < 0 || c.log_every < 1 || c.checkpoint_every < 0) {
    throw std::invalid_argument("training config: batch size and log interval must be positive");
  }
  if (!(c.ema_rate >= 0.0 && c.ema_rate < 1.0) || !(c.lr > 0.0) || !(c.disc_lr > 0.0)) {
    throw std::invalid_argument("training config: need 0 <= ema_rate < 1 and positive learning rates");
  }
  return c;
}

std::vector<TrainBatchItem> sample_batch(const data::Corpus& corpus, const std::vector<size_t>& clips,
                                         int batch_size, int diffusion_steps, std::mt19937_64& rng) {
  const auto usable = eligible_clips(corpus, clips);
  if (usable.empty()) {
    throw std::invalid_argument("sample_batch: no clip has at least 6 frames");
  }
  if (batch_size < 1 || diffusion_steps < 1) {
    throw std::invalid_argument("sample_batch: batch size and step count must be positive");
  }
  std::vector<TrainBatchItem> items;
  items.reserve(static_cast<size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    TrainBatchItem it;
    it.clip = usable[std::uniform_int_distribution<size_t>(0, usable.size() - 1)(rng)];
    const auto& clip = corpus.clips[it.clip];
    it.clip_id = clip.id;
    const int64_t n = clip.size();
    it.start = std::uniform_int_distribution<int64_t>(0, n - kWindow)(rng);
    it.t = std::uniform_int_distribution<int64_t>(1, diffusion_steps)(rng);
    auto r = std::uniform_int_distribution<int64_t>(0, n - kWindow - 1)(rng);
    it.reference = r >= it.start ? r + kWindow : r;
    items.push_back(std::move(it));
  }
  return items;
}

Batch materialize(const data::Corpus& corpus, std::vector<TrainBatchItem> items,
                  torch::Generator& gen) {
  std::vector<torch::Tensor> frames, audio, sync_audio, refs;
  std::vector<int64_t> ts;
  for (const auto& it : items) {
    const auto& clip = corpus.clips.at(it.clip);
    frames.push_back(clip.frame_range(it.start, it.start + kWindow));
    audio.push_back(clip.windows.slice(0, it.start, it.start + kWindow));
    sync_audio.push_back(clip.windows[it.start]);
    refs.push_back(clip.frame(it.reference));
    ts.push_back(it.t);
  }
  Batch b;
  b.items = std::move(items);
  b.frames = torch::stack(frames);
  b.audio = torch::stack(audio);
  b.sync_audio = torch::stack(sync_audio);
  b.reference = torch::stack(refs);
  b.t = torch::tensor(ts, torch::kLong);
  b.eps = torch::randn(b.frames.sizes(), gen, torch::kFloat32);
  return b;
}

json provenance(const Batch& batch) {
  json items = json::array();
  for (const auto& it : batch.items) {
    items.push_back(
        {{"clip", it.clip_id}, {"start", it.start}, {"reference", it.reference}, {"t", it.t}});
  }
  return json{{"items", items}};
}

Trainer::Trainer(TrainConfig cfg, const data::Corpus& corpus, sync::SyncNet expert)
    : cfg_(std::move(cfg)),
      corpus_(corpus),
      sched_(diffusion::make_schedule(cfg_.diffusion_steps, cfg_.beta_start, cfg_.beta_end)),
      expert_(std::move(expert)) {
  cfg_.weights.validate();
  cfg_.model.validate();
  if (corpus_.manifest.config.image_size != cfg_.model.image_size) {
    throw std::invalid_argument("corpus image size " +
                                std::to_string(corpus_.manifest.config.image_size) +
                                " does not match model.image_size " +
                                std::to_string(cfg_.model.image_size));
  }
  clips_ = eligible_clips(corpus_, corpus_.train);
  if (clips_.empty()) {
    throw std::invalid_argument("Trainer: no training clip has at least 6 frames");
  }
  if (cfg_.weights.sync > 0.0 && !expert_) {
    throw std::invalid_argument("Trainer: the sync term is active but no sync expert was given");
  }
  if (expert_) {
    model::freeze(*expert_);
    expert_->eval();
  }
  const int size = cfg_.model.image_size;
  mask_ = visual::lower_half_mask(size, size);

  torch::manual_seed(derive_seed(cfg_.seed, kInitStream));
  live_ = model::Denoiser(cfg_.model);
  ema_ = model::Denoiser(cfg_.model);
  model::copy_parameters(*ema_, *live_);
  model::freeze(*ema_);
  phi_ = losses::FeatureExtractor(cfg_.extractor);
  opt_ = std::make_unique<torch::optim::Adam>(live_->parameters(), torch::optim::AdamOptions(cfg_.lr));
  if (gan_active()) {
    disc_ = losses::SequenceDiscriminator(cfg_.disc);
    disc_opt_ = std::make_unique<torch::optim::Adam>(disc_->parameters(),
                                                     torch::optim::AdamOptions(cfg_.disc_lr));
  }
}

Batch Trainer::next_batch() const {
  const auto k = static_cast<uint64_t>(step_ + 1);
  std::mt19937_64 rng(derive_seed(cfg_.seed, 2 * k));
  auto gen = make_generator(derive_seed(cfg_.seed, 2 * k + 1));
  return materialize(corpus_, sample_batch(corpus_, clips_, cfg_.batch_size, cfg_.diffusion_steps, rng),
                     gen);
}

Trainer::Forward Trainer::run_generator(const Batch& batch, bool need_images) {
  const auto b = batch.frames.size(0);
  const auto h = batch.frames.size(3);
  const auto w = batch.frames.size(4);
  auto x0 = batch.frames.reshape({b * kWindow, 3, h, w});
  auto eps = batch.eps.reshape({b * kWindow, 3, h, w});
  auto t = batch.t.repeat_interleave(kWindow);
  auto ref = batch.reference.repeat_interleave(kWindow, 0);
  auto audio = batch.audio.reshape({b * kWindow, 16, 80});

  auto x_t = visual::forward_mask_noise(x0, mask_, t, eps, sched_);
  Forward f;
  f.eps_hat = live_->forward(x_t, ref, audio, t);
  if (need_images) {
    f.x0_hat = diffusion::predict_x0(x_t, f.eps_hat, sched_.alpha_bar(t));
    if (cfg_.clamp_x0) {
      f.x0_hat = f.x0_hat.clamp(-1.0, 1.0);
    }
    f.composite = visual::composite(f.x0_hat, x0, mask_);
  }
  return f;
}

LossBreakdown Trainer::generator_step(const Batch& batch) {
  const auto& w = cfg_.weights;
  const bool images = w.l2 > 0.0 || w.sync > 0.0 || w.lpips > 0.0 || w.gan > 0.0;
  live_->train();
  auto f = run_generator(batch, images);

  auto x0 = batch.frames.reshape({-1, 3, batch.frames.size(3), batch.frames.size(4)});
  auto eps = batch.eps.reshape_as(x0);
  losses::LossParts parts;
  parts["simple"] = losses::l_simple(f.eps_hat, eps, mask_);
  if (w.l2 > 0.0) {
    parts["l2"] = losses::l2_x0(f.x0_hat, x0, mask_);
  }
  auto seq = images ? f.composite.reshape(batch.frames.sizes()) : torch::Tensor{};
  if (w.sync > 0.0) {
    parts["sync"] = sync::sync_loss(expert_, seq, batch.sync_audio);
  }
  if (w.lpips > 0.0) {
    parts["lpips"] = losses::l_perceptual(phi_, f.composite, x0);
  }
  if (w.gan > 0.0) {
    parts["gan"] = losses::gen_adv_loss_from_logits(disc_->forward(seq));
  }

  LossBreakdown out;
  for (const auto& [name, value] : parts) {
    out.terms[name] = value.item<double>();
  }
  out.total = out.terms["simple"];
  const std::pair<const char*, double> weighted[] = {
      {"l2", w.l2}, {"sync", w.sync}, {"lpips", w.lpips}, {"gan", w.gan}};
  for (const auto& [name, weight] : weighted) {
    if (const auto it = out.terms.find(name); it != out.terms.end()) {
      out.total += weight * it->second;
    }
  }
  if (!all_finite(out)) {
    std::ostringstream os;
    os << "non-finite generator loss at step " << step_ + 1 << ":";
    for (const auto& [name, v] : out.terms) {
      os << " " << name << "=" << v;
    }
    throw NonFiniteLoss(os.str(), provenance(batch));
  }
  auto total = losses::total_loss(parts, w);
  opt_->zero_grad();
  total.backward();
  opt_->step();
  model::ema_update(*ema_, *live_, cfg_.ema_rate);
  if (disc_) {
    disc_opt_->zero_grad();
  }
  return out;
}

double Trainer::discriminator_step(const Batch& batch) {
  if (!disc_) {
    throw std::logic_error("discriminator_step: the adversarial term is not active");
  }
  torch::Tensor fake;
  {
    torch::NoGradGuard guard;
    fake = run_generator(batch, true).composite.reshape(batch.frames.sizes());
  }
  disc_opt_->zero_grad();
  torch::Tensor loss;
  try {
    loss = losses::disc_loss(disc_, batch.frames, fake);
  } catch (const std::runtime_error& e) {
    throw NonFiniteLoss(e.what(), provenance(batch));
  }
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    throw NonFiniteLoss("non-finite discriminator loss at step " + std::to_string(step_ + 1),
                        provenance(batch));
  }
  loss.backward();
  disc_opt_->step();
  return value;
}

StepRecord Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  StepRecord rec;
  auto batch = next_batch();
  rec.generator = generator_step(batch);
  if (gan_active()) {
    rec.disc = discriminator_step(batch);
  }
  rec.step = ++step_;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

ckpt::Checkpoint Trainer::checkpoint() const {
  ckpt::Checkpoint c;
  c.role = kGeneratorRole;
  c.step = step_;
  c.config = to_json(cfg_);
  c.extra["mel_range"] = {{"lo", corpus_.manifest.mel_range.lo},
                          {"hi", corpus_.manifest.mel_range.hi}};
  ckpt::add_module(c, "live", *live_);
  ckpt::add_module(c, "ema", *ema_);
  ckpt::add_adam_state(c, "opt", *opt_, *live_);
  if (disc_) {
    ckpt::add_module(c, "disc", *disc_);
    ckpt::add_adam_state(c, "disc_opt", *disc_opt_, *disc_);
  }
  return c;
}

void Trainer::restore(const ckpt::Checkpoint& c) {
  if (c.role != kGeneratorRole) {
    throw std::runtime_error("cannot resume from a checkpoint with role '" + c.role + "'");
  }
  ckpt::restore_module(c, "live", *live_);
  ckpt::restore_module(c, "ema", *ema_);
  ckpt::restore_adam_state(c, "opt", *opt_, *live_);
  if (disc_) {
    ckpt::restore_module(c, "disc", *disc_);
    ckpt::restore_adam_state(c, "disc_opt", *disc_opt_, *disc_);
  }
  step_ = c.step;
}

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"step", "simple", "l2",   "sync",     "lpips",
                                             "gan",  "disc",   "total", "wall_time"};
  return cols;
}

std::vector<StepRecord> run(const TrainConfig& cfg, const data::Corpus& corpus, const RunOptions& opts) {
  const auto& dir = opts.run_dir;
  fs::create_directories(dir / "checkpoints");
  const auto manifest_path = dir / "manifest.json";
  const auto metrics_path = dir / "metrics.csv";

  sync::SyncNet expert{nullptr};
  std::string expert_hash;
  if (cfg.weights.sync > 0.0) {
    if (opts.expert.empty()) {
      throw std::invalid_argument("the sync term is active: a sync expert checkpoint is required");
    }
    expert = sync::load_expert(opts.expert);
    expert_hash = ckpt::fingerprint(*expert);
  }
  Trainer trainer(cfg, corpus, expert);

  const auto cfg_json = to_json(cfg);
  json manifest;
  if (fs::exists(manifest_path)) {
    manifest = read_json(manifest_path);
    auto stored = manifest.at("config");
    auto current = cfg_json;
    stored.erase("train.steps");
    current.erase("train.steps");
    if (stored != current) {
      throw std::runtime_error("run directory " + dir.string() +
                               " was started with a different configuration");
    }
    if (!manifest.at("checkpoints").empty()) {
      const auto latest = dir / manifest.at("checkpoints").back().get<std::string>();
      trainer.restore(ckpt::load(latest));
    }
    truncate_metrics(metrics_path, trainer.steps_done());
  } else {
    manifest = json{{"config", cfg_json},
                    {"effective_config", opts.effective_config},
                    {"seeds", {{"base", cfg.seed}, {"init", derive_seed(cfg.seed, kInitStream)},
                               {"extractor", cfg.extractor.seed}}},
                    {"lambdas", {{"l2", cfg.weights.l2}, {"sync", cfg.weights.sync},
                                 {"lpips", cfg.weights.lpips}, {"gan", cfg.weights.gan}}},
                    {"corpus_seed", corpus.manifest.seed},
                    {"expert", opts.expert.empty() ? "" : fs::absolute(opts.expert).string()},
                    {"expert_fingerprint", expert_hash},
                    {"step", 0},
                    {"metrics", "metrics.csv"},
                    {"checkpoints", json::array()}};
    write_json_atomic(manifest_path, manifest);
    std::ofstream csv(metrics_path, std::ios::trunc);
    for (size_t i = 0; i < metric_columns().size(); ++i) {
      csv << (i ? "," : "") << metric_columns()[i];
    }
    csv << "\n";
  }

  std::vector<StepRecord> records;
  std::ofstream csv(metrics_path, std::ios::app);
  while (trainer.steps_done() < cfg.steps) {
    StepRecord rec;
    try {
      rec = trainer.step();
    } catch (const NonFiniteLoss& e) {
      write_json_atomic(dir / "failed_batch.json",
                        json{{"error", e.what()}, {"batch", e.provenance()}});
      throw;
    }
    const bool last = rec.step == cfg.steps;
    if (rec.step % cfg.log_every == 0 || last) {
      csv << csv_row(rec) << "\n" << std::flush;
      records.push_back(rec);
      if (opts.on_log) {
        opts.on_log(rec);
      }
    }
    if ((cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0) || last) {
      char name[32];
      std::snprintf(name, sizeof(name), "checkpoints/step_%08lld", static_cast<long long>(rec.step));
      ckpt::save(dir / name, trainer.checkpoint());
      manifest["checkpoints"].push_back(name);
      manifest["step"] = rec.step;
      write_json_atomic(manifest_path, manifest);
    }
  }
  if (expert && ckpt::fingerprint(*expert) != expert_hash) {
    throw std::logic_error("sync expert weights changed during generator training");
  }
  return records;
}

fs::path latest_checkpoint(const fs::path& run_or_ckpt) {
  const auto manifest_path = run_or_ckpt / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw std::runtime_error("no manifest.json in " + run_or_ckpt.string());
  }
  const auto manifest = read_json(manifest_path);
  if (manifest.contains("tensors")) {
    return run_or_ckpt;
  }
  const auto& list = manifest.value("checkpoints", json::array());
  if (list.empty()) {
    throw std::runtime_error("run " + run_or_ckpt.string() + " has no checkpoint yet");
  }
  return run_or_ckpt / list.back().get<std::string>();
}

GeneratorCheckpoint load_generator(const fs::path& run_or_ckpt) {
  const auto c = ckpt::load(latest_checkpoint(run_or_ckpt));
  if (c.role != kGeneratorRole) {
    throw std::runtime_error("checkpoint has role '" + c.role + "', expected '" + kGeneratorRole + "'");
  }
  GeneratorCheckpoint g;
  g.config = train_config_from_json(c.config);
  g.step = c.step;
  g.ema = model::Denoiser(g.config.model);
  ckpt::restore_module(c, "ema", *g.ema);
  model::freeze(*g.ema);
  g.ema->eval();
  if (c.extra.contains("mel_range")) {
    g.mel_range.lo = c.extra["mel_range"].at("lo").get<double>();
    g.mel_range.hi = c.extra["mel_range"].at("hi").get<double>();
  }
  return g;
}

}  // namespace lipsync::train

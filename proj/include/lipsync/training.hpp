#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "lipsync/checkpoint.hpp"
#include "lipsync/dataset.hpp"
#include "lipsync/denoiser.hpp"
#include "lipsync/diffusion.hpp"
#include "lipsync/losses.hpp"
#include "lipsync/sync_expert.hpp"

namespace lipsync::train {

inline constexpr int kWindow = 5;

struct TrainConfig {
  uint64_t seed = 0;
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  model::DenoiserConfig model;
  losses::LossWeights weights;
  losses::ExtractorConfig extractor;
  losses::DiscriminatorConfig disc;
  int batch_size = 4;  // 5-frame windows per step
  double lr = 1e-4;
  double disc_lr = 1e-4;
  double ema_rate = 0.9999;
  int steps = 1000;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int log_every = 10;
  /// Clamp the one-shot x0 estimate to the pixel range before image losses.
  bool clamp_x0 = true;
};

/// Flat dotted-key form ("loss.lambda_sync", "model.base_channels", ...).
nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& flat);

struct TrainBatchItem {
  size_t clip = 0;
  std::string clip_id;
  int64_t start = 0;      // window covers [start, start + 5)
  int64_t reference = 0;  // never inside the window
  int64_t t = 1;          // shared by the 5 frames
};

/// Uniform clip and window start, t ~ U{1..T}, reference uniform over frames
/// outside the window. Clips with fewer than 6 frames are skipped with a
/// warning on stderr.
std::vector<TrainBatchItem> sample_batch(const data::Corpus& corpus, const std::vector<size_t>& clips,
                                         int batch_size, int diffusion_steps, std::mt19937_64& rng);

struct Batch {
  std::vector<TrainBatchItem> items;
  torch::Tensor frames;      // [B, 5, 3, H, W]
  torch::Tensor audio;       // [B, 5, 16, 80] per-frame windows
  torch::Tensor sync_audio;  // [B, 16, 80] window aligned with the first frame
  torch::Tensor reference;   // [B, 3, H, W]
  torch::Tensor t;           // [B] int64
  torch::Tensor eps;         // [B, 5, 3, H, W]
};

Batch materialize(const data::Corpus& corpus, std::vector<TrainBatchItem> items,
                  torch::Generator& gen);

nlohmann::json provenance(const Batch& batch);

/// Raised when a loss becomes NaN or infinite; carries the batch provenance.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, nlohmann::json provenance)
      : std::runtime_error(what), provenance_(std::move(provenance)) {}
  const nlohmann::json& provenance() const { return provenance_; }

 private:
  nlohmann::json provenance_;
};

/// Loss terms by name plus the weighted total.
struct LossBreakdown {
  std::map<std::string, double> terms;
  double total = 0.0;
};

struct StepRecord {
  int64_t step = 0;
  LossBreakdown generator;
  std::optional<double> disc;
  double wall_seconds = 0.0;
};

/// Generator and discriminator state for one run. The sync expert, when
/// given, is frozen on construction and never updated.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const data::Corpus& corpus, sync::SyncNet expert = nullptr);

  /// Batch for the next step, derived from (seed, step) only.
  Batch next_batch() const;
  /// One generator update and, when the adversarial term is active, one
  /// discriminator update on the same batch.
  StepRecord step();

  LossBreakdown generator_step(const Batch& batch);
  double discriminator_step(const Batch& batch);

  ckpt::Checkpoint checkpoint() const;
  void restore(const ckpt::Checkpoint& c);

  int64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  model::Denoiser live() const { return live_; }
  model::Denoiser ema() const { return ema_; }
  losses::SequenceDiscriminator discriminator() const { return disc_; }
  const diffusion::NoiseSchedule& schedule() const { return sched_; }

 private:
  bool gan_active() const { return cfg_.weights.gan > 0.0; }
  /// x0 estimate composited into the clean frames, [B*5, 3, H, W].
  struct Forward {
    torch::Tensor eps_hat, x0_hat, composite;
  };
  Forward run_generator(const Batch& batch, bool need_images);

  TrainConfig cfg_;
  const data::Corpus& corpus_;
  std::vector<size_t> clips_;
  diffusion::NoiseSchedule sched_;
  torch::Tensor mask_;
  model::Denoiser live_{nullptr}, ema_{nullptr};
  losses::FeatureExtractor phi_{nullptr};
  losses::SequenceDiscriminator disc_{nullptr};
  sync::SyncNet expert_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_, disc_opt_;
  int64_t step_ = 0;
};

/// Metric columns of metrics.csv, in order.
const std::vector<std::string>& metric_columns();

struct RunOptions {
  std::filesystem::path run_dir;
  std::filesystem::path expert;  // required when the sync term is active
  nlohmann::json effective_config = nlohmann::json::object();
  std::function<void(const StepRecord&)> on_log;
};

/// Trains to cfg.steps, resuming from the latest checkpoint in run_dir when
/// one exists. Writes manifest.json, metrics.csv and checkpoints/step_N.
/// Returns every logged record of this invocation.
std::vector<StepRecord> run(const TrainConfig& cfg, const data::Corpus& corpus, const RunOptions& opts);

/// Path of the most recent checkpoint of a run directory (or the directory
/// itself when it already is a checkpoint).
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_or_ckpt);

inline constexpr const char* kGeneratorRole = "generator";

/// What inference needs from a training checkpoint: the EMA denoiser, the
/// run's configuration and the corpus mel normalisation range.
struct GeneratorCheckpoint {
  TrainConfig config;
  model::Denoiser ema{nullptr};
  audio::MelRange mel_range;
  int64_t step = 0;
};

/// Accepts a run directory or a checkpoint directory.
GeneratorCheckpoint load_generator(const std::filesystem::path& run_or_ckpt);

}  // namespace lipsync::train

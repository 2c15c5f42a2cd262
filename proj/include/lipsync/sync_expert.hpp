#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "lipsync/checkpoint.hpp"
#include "lipsync/dataset.hpp"

namespace lipsync::sync {

inline constexpr int kWindow = 5;
inline constexpr double kProbFloor = 1e-7;

struct SyncNetConfig {
  int image_size = 64;
  int channels = 32;
  int embedding_width = 64;
};

/// Audio-visual embedder judging whether 5 lower-half frames match a mel
/// window. Both branches end in L2-normalised vectors of equal width.
class SyncNetImpl : public torch::nn::Module {
 public:
  explicit SyncNetImpl(SyncNetConfig cfg = {});

  /// frames: [B, 5, 3, H, W] full frames; only the lower halves are used.
  torch::Tensor embed_video(const torch::Tensor& frames);
  /// mel: [B, 16, 80].
  torch::Tensor embed_audio(const torch::Tensor& mel);

  const SyncNetConfig& config() const { return cfg_; }

 private:
  SyncNetConfig cfg_;
  torch::nn::Sequential video_{nullptr}, audio_{nullptr};
  torch::nn::Linear video_head_{nullptr}, audio_head_{nullptr};
};
TORCH_MODULE(SyncNet);

/// clamp(cos(v, a), 1e-7, 1), row-wise.
torch::Tensor sync_prob(const torch::Tensor& v, const torch::Tensor& a);

/// -log sync_prob(embed_video(frames), embed_audio(mel)), averaged over the
/// batch. Gradients reach the frames only when the expert is frozen.
torch::Tensor sync_loss(SyncNet& expert, const torch::Tensor& frames, const torch::Tensor& mel);

/// Checks that frame indices form a contiguous run of 5.
void check_contiguous(const std::vector<int64_t>& indices);

struct SyncPair {
  size_t clip = 0;
  int64_t start = 0;        // first video frame of the 5-frame window
  size_t audio_clip = 0;
  int64_t audio_start = 0;  // video frame whose mel window is paired
  bool positive = true;
};

/// Draws aligned positives and negatives (half offset by >= 5 frames in the
/// same clip, half from a different clip). Offset-0 negatives never occur.
class PairSampler {
 public:
  PairSampler(const data::Corpus& corpus, std::vector<size_t> clips, uint64_t seed,
              int min_offset = 5);
  SyncPair next(bool positive);
  std::vector<SyncPair> balanced(int count);

 private:
  const data::Corpus& corpus_;
  std::vector<size_t> clips_;
  std::mt19937_64 rng_;
  int min_offset_;
};

/// Materialises frames [N, 5, 3, H, W], mel [N, 16, 80] and labels [N].
struct PairBatch {
  torch::Tensor frames, mel, labels;
};
PairBatch gather(const data::Corpus& corpus, const std::vector<SyncPair>& pairs);

struct ExpertHyper {
  int max_steps = 3000;
  int batch_size = 32;
  double lr = 1e-3;
  int eval_every = 100;
  int eval_pairs = 512;
  int patience = 6;
  double min_improvement = 0.002;
  int lr_drops = 1;             // plateaus that lower the learning rate before stopping
  double lr_drop_factor = 0.1;
  uint64_t seed = 7;
};

struct ExpertReport {
  int steps = 0;
  double held_out_accuracy = 0.0;
  double initial_accuracy = 0.0;
  std::vector<std::pair<int, double>> history;  // (step, held-out accuracy)
  std::vector<std::pair<int, double>> losses;   // (step, train BCE)
};

/// Classification accuracy (p > 0.5 means "in sync") on the given pairs,
/// evaluated with running normalisation statistics.
double accuracy(SyncNet& expert, const data::Corpus& corpus, const std::vector<SyncPair>& pairs);

/// Binary cross-entropy training on sync_prob until held-out accuracy
/// plateaus. Each of the first `lr_drops` plateaus scales the learning rate by
/// `lr_drop_factor` instead of stopping. The weights with the best held-out
/// accuracy are kept and the expert is left in eval mode. Throws if the loss
/// becomes non-finite.
ExpertReport train_expert(const data::Corpus& corpus, SyncNet& expert, const ExpertHyper& hyper,
                          const std::function<void(int, double)>& on_eval = {});

inline constexpr const char* kExpertRole = "sync_expert";

/// Writes a checkpoint with role "sync_expert"; `extra` is stored verbatim.
void save_expert(const std::filesystem::path& dir, SyncNet& expert,
                 const nlohmann::json& extra = nlohmann::json::object());
/// Loads and freezes an expert; rejects checkpoints of any other role.
SyncNet load_expert(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

}  // namespace lipsync::sync

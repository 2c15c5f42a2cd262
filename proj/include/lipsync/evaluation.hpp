#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "lipsync/losses.hpp"
#include "lipsync/sync_expert.hpp"
#include "lipsync/toyset.hpp"

namespace lipsync::eval {

inline constexpr double kPsnrCap = 100.0;

// Frames are [3, H, W] or [N, 3, H, W] in [-1, 1]; pixel metrics remap them
// to [0, 1] first.

/// Peak signal-to-noise ratio in dB, capped at 100 for identical inputs.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03,
/// evaluated where the window fits inside the image.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// Mean Euclidean distance per point per frame, divided by `face_size`.
double lmd(const std::vector<toyset::MouthLandmarks>& predicted,
           const std::vector<toyset::MouthLandmarks>& reference, double face_size);

struct SyncScores {
  double sync_c = 0.0;  // median off-sync distance minus on-sync distance
  double sync_d = 0.0;  // mean on-sync distance
};

inline constexpr int kMaxSyncOffset = 7;

/// video: [W, D] embeddings of windows starting at frames 0..W-1; audio:
/// [S, D] embeddings of the per-frame mel windows. Offsets run over
/// [-7, 7] frames, restricted to audio windows that exist.
SyncScores sync_from_embeddings(const torch::Tensor& video, const torch::Tensor& audio);
/// frames [S, 3, H, W], windows [S, 16, 80]; needs S >= 5.
SyncScores sync_metrics(const torch::Tensor& frames, const torch::Tensor& windows,
                        sync::SyncNet& expert);

struct Frechet {
  double distance = 0.0;
  bool regularized = false;  // epsilon I was added to a singular covariance
};

inline constexpr int kMinFrechetSamples = 32;
inline constexpr double kCovarianceEpsilon = 1e-6;

/// Frechet distance between Gaussian fits of two feature sets [N, D].
Frechet frechet_distance(const torch::Tensor& a, const torch::Tensor& b);
/// Pools `phi` activations over the frames of each set, then compares them.
Frechet feature_frechet(const torch::Tensor& frames_a, const torch::Tensor& frames_b,
                        losses::FeatureExtractor& phi);
/// Every PNG below the given directories.
torch::Tensor load_frame_set(const std::vector<std::filesystem::path>& dirs);

/// Pearson correlation; 0 when either side is constant.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// Per-frame mouth aperture measured from rendered or generated frames.
std::vector<double> aperture_trace(const torch::Tensor& frames, const toyset::ToyConfig& cfg = {});

struct ClipReport {
  std::string clip_id;
  double psnr = 0.0, ssim = 0.0, lmd = 0.0, sync_c = 0.0, sync_d = 0.0;
};

/// Compares generated clips under `pred` with the reference clips under
/// `ref`, matched by directory name. Sync metrics use the generated clip's
/// audio.wav when present, otherwise the reference audio.
std::vector<ClipReport> evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& ref,
                                      const std::filesystem::path& expert_ckpt);

/// One CSV row per clip plus a final "mean" row; `<out>.json` holds the means.
void write_report(const std::filesystem::path& out_csv, const std::vector<ClipReport>& rows);
nlohmann::json aggregate(const std::vector<ClipReport>& rows);

}  // namespace lipsync::eval

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>

#include <torch/torch.h>

#include "lipsync/audio.hpp"
#include "lipsync/denoiser.hpp"
#include "lipsync/diffusion.hpp"

namespace lipsync::infer {

/// eps_hat for a batch of one: (x_t, x_ref, audio window, t) -> [1, 3, H, W].
using Predictor = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& x_ref,
                                              const torch::Tensor& audio, diffusion::StepIndex t)>;

Predictor network_predictor(model::Denoiser net);

enum class KnownRegion {
  CleanHold,  // unmasked pixels stay at their clean values during sampling
  Renoise,    // unmasked pixels are re-noised to the current level each step
};

struct SampleOptions {
  int steps = 25;
  KnownRegion known = KnownRegion::CleanHold;
};

/// Inpaints the lower half of v_s ([3, H, W]) conditioned on x_r and the mel
/// window a_s ([16, 80]) with strided DDIM. `eta` seeds the masked region;
/// `renoise_gen` is only drawn from in Renoise mode. The output equals v_s
/// bit-exactly outside the mask.
torch::Tensor sync_frame(const torch::Tensor& v_s, const torch::Tensor& x_r, const torch::Tensor& a_s,
                         const Predictor& predict, const diffusion::NoiseSchedule& sched,
                         const torch::Tensor& eta, const SampleOptions& opts = {},
                         torch::Generator* renoise_gen = nullptr);

enum class Mode { Reconstruction, Cross };

Mode parse_mode(const std::string& s);

struct ClipOptions {
  SampleOptions sample;
  Mode mode = Mode::Cross;
  uint64_t seed = 0;
  int workers = 1;
};

/// Processes every frame of `frames` ([S, 3, H, W] in [-1, 1]) with its
/// window from `windows` ([S, 16, 80]). Reconstruction mode uses the first
/// frame as both input and reference; cross mode uses each frame as its own
/// input and reference. Frame s draws its noise from seed (seed, s), so the
/// result does not depend on the worker count.
torch::Tensor sync_clip(const torch::Tensor& frames, const torch::Tensor& windows,
                        const Predictor& predict, const diffusion::NoiseSchedule& sched,
                        const ClipOptions& opts);

struct SampleRequest {
  std::filesystem::path checkpoint;  // run or checkpoint directory
  std::filesystem::path video;       // clip directory with frames/ and meta.json
  std::filesystem::path audio;       // driving WAV
  std::filesystem::path out;
  ClipOptions clip;
  /// Also write full-size frames with the crop pasted back, under pasted/.
  bool paste_back = false;
};

/// Writes out/frames/%06d.png and out/audio.wav; returns the frame count.
int64_t sample_to_dir(const SampleRequest& req);

}  // namespace lipsync::infer

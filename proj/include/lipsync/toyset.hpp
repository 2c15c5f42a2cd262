#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lipsync/audio.hpp"
#include "lipsync/visual.hpp"

namespace lipsync::toyset {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Left corner, right corner, upper lip, lower lip.
using MouthLandmarks = std::array<Point, 4>;

/// Rendering geometry, expressed as fractions of the image size.
struct ToyConfig {
  int image_size = 64;
  int fps = 25;
  int sample_rate = audio::kSampleRate;
  double face_radius = 0.40;
  double face_center_y = 0.52;
  double mouth_center_y = 0.72;
  double mouth_half_width = 0.16;
  double mouth_min_half_height = 0.02;
  double mouth_max_half_height = 0.12;
  double jitter_px = 1.0;  // per-clip head-center jitter, in pixels at 64 px

  int samples_per_frame() const { return sample_rate / fps; }
  double px(double fraction) const { return fraction * image_size; }
  double min_half_height_px() const { return px(mouth_min_half_height); }
  double max_half_height_px() const { return px(mouth_max_half_height); }
};

inline constexpr std::array<double, 3> kMouthColor{0.30, 0.05, 0.08};

struct SynthAudio {
  audio::Waveform wave;
  std::vector<double> envelope;  // one value per video frame, in [0, 1]
};

/// Seeded sum of 2-4 sinusoids (200-2000 Hz) under a piecewise-smooth
/// amplitude envelope. The per-frame envelope is the sample envelope averaged
/// over each frame's span.
SynthAudio synth_audio(uint64_t seed, double duration_s, const ToyConfig& cfg = {});

/// Seeded identity: colours, texture and head jitter.
struct FaceIdentity {
  std::array<double, 3> skin{};
  std::array<double, 3> background{};
  std::array<double, 3> eyes{};
  double stripe_angle = 0.0;
  double stripe_frequency = 0.0;
  double stripe_phase = 0.0;
  double jitter_x = 0.0;
  double jitter_y = 0.0;
};

FaceIdentity make_identity(uint64_t seed, const ToyConfig& cfg = {});

struct FaceFrame {
  torch::Tensor pixels;  // [3, H, W] in [-1, 1]
  MouthLandmarks landmarks;
};

/// Renders one face with the given mouth aperture in [0, 1].
FaceFrame render_face(const FaceIdentity& id, double aperture, const ToyConfig& cfg = {});

struct ToyClip {
  uint64_t seed = 0;
  torch::Tensor frames;  // [S, 3, H, W]
  audio::Waveform wave;
  std::vector<double> aperture;
  std::vector<MouthLandmarks> landmarks;
  visual::Box box;
};

ToyClip render_clip(uint64_t seed, int frames, const ToyConfig& cfg = {});

struct MouthEstimate {
  double aperture = 0.0;
  double center_x = 0.0;
  double center_y = 0.0;
  double half_height = 0.0;
  bool found = false;
};

/// Measures mouth opening from the dark mouth region of the lower half.
MouthEstimate aperture_estimate(const torch::Tensor& frame, const ToyConfig& cfg = {});

/// The four analytic mouth points implied by an estimate.
MouthLandmarks estimate_landmarks(const MouthEstimate& est, const ToyConfig& cfg = {});

struct CorpusEntry {
  std::string id;
  uint64_t seed = 0;
  int frames = 0;
};

struct CorpusManifest {
  uint64_t seed = 0;
  int frames_per_clip = 0;
  ToyConfig config;
  std::vector<CorpusEntry> clips;
  std::vector<std::string> train, val, test;
  audio::MelRange mel_range;
};

/// Writes `clips` toy clips plus corpus.json. With workers > 1 clips are
/// rendered concurrently; the bytes written do not depend on the worker count.
CorpusManifest generate_corpus(int clips, int frames_per_clip, const std::filesystem::path& out_dir,
                               uint64_t seed, const ToyConfig& cfg = {}, int workers = 1);

}  // namespace lipsync::toyset

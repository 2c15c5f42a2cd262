#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lipsync/audio.hpp"
#include "lipsync/toyset.hpp"
#include "lipsync/visual.hpp"

// On-disk clip and corpus formats:
//
//   <clip>/frames/%06d.png   8-bit RGB frames
//   <clip>/audio.wav         16 kHz mono PCM
//   <clip>/meta.json         fps, crop boxes, optional aperture/landmark traces
//   <corpus>/corpus.json     clip ids, seeds, splits, mel normalisation range
namespace lipsync::data {

struct ClipMeta {
  int fps = 25;
  int sample_rate = audio::kSampleRate;
  uint64_t seed = 0;
  int frames = 0;
  int image_size = 0;
  std::vector<visual::Box> crop_boxes;
  std::vector<double> aperture;
  std::vector<toyset::MouthLandmarks> landmarks;
};

struct Clip {
  std::string id;
  ClipMeta meta;
  torch::Tensor frames;   // uint8 [S, 3, H, W]
  audio::Waveform wave;   // 16 kHz
  torch::Tensor windows;  // float [S, 16, 80]

  int64_t size() const { return frames.size(0); }
  /// Frame s as float [3, H, W] in [-1, 1].
  torch::Tensor frame(int64_t s) const;
  /// Frames [begin, end) as float [n, 3, H, W].
  torch::Tensor frame_range(int64_t begin, int64_t end) const;
};

/// frames: [S, 3, H, W], either uint8 or float in [-1, 1].
void write_frames(const std::filesystem::path& clip_dir, const torch::Tensor& frames);
torch::Tensor read_frames(const std::filesystem::path& clip_dir);  // uint8 [S, 3, H, W]

void write_meta(const std::filesystem::path& clip_dir, const ClipMeta& meta);
ClipMeta read_meta(const std::filesystem::path& clip_dir);

void write_toy_clip(const std::filesystem::path& clip_dir, const toyset::ToyClip& clip,
                    const toyset::ToyConfig& cfg);

/// Loads frames, audio and metadata; mel windows are normalised with `range`.
Clip load_clip(const std::filesystem::path& clip_dir, const audio::MelRange& range);

void write_manifest(const std::filesystem::path& corpus_dir, const toyset::CorpusManifest& m);
toyset::CorpusManifest read_manifest(const std::filesystem::path& corpus_dir);

struct Corpus {
  toyset::CorpusManifest manifest;
  std::vector<Clip> clips;
  std::vector<size_t> train, val, test;

  /// Validation and test clips together.
  std::vector<size_t> held_out() const;
};

Corpus load_corpus(const std::filesystem::path& corpus_dir);

/// Writes a float32 tensor as raw little-endian bytes plus `<path>.json`
/// holding its shape.
void write_tensor_blob(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_tensor_blob(const std::filesystem::path& path);

}  // namespace lipsync::data

#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace lipsync::audio {

inline constexpr int kSampleRate = 16000;
inline constexpr int kWindowFrames = 16;
inline constexpr int kMelBins = 80;

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kSampleRate;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// 16-bit PCM mono RIFF/WAVE.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wave);

/// Windowed-sinc band-limited resampling. Identity when the rates match.
Waveform resample(const Waveform& wave, int target_rate = kSampleRate);

struct MelConfig {
  int sample_rate = kSampleRate;
  int n_fft = 800;
  int win_length = 800;
  int hop = 200;
  int n_mels = kMelBins;
  double fmin = 55.0;
  double fmax = 7600.0;
  double amplitude_floor = 1e-5;

  double frames_per_second() const { return static_cast<double>(sample_rate) / hop; }
};

/// Range of log10 mel amplitudes mapped onto [-1, 1].
struct MelRange {
  double lo = -5.0;
  double hi = 2.5;
};

/// Slaney-style triangular filterbank, [n_mels, n_fft/2 + 1].
torch::Tensor mel_filterbank(const MelConfig& cfg);

/// Center-padded STFT magnitude projected to mel bands, log10 with a floor.
/// Returns [frames, n_mels] with frames = 1 + len / hop.
torch::Tensor log_mel(const Waveform& wave, const MelConfig& cfg = {});

struct MelSpectrogram {
  torch::Tensor frames;  // [count, n_mels], values in [-1, 1]
  int hop = 200;
  double frames_per_second = 80.0;

  int64_t count() const { return frames.size(0); }
};

MelSpectrogram normalize(const torch::Tensor& log_mel_frames, const MelRange& range,
                         const MelConfig& cfg = {});
MelSpectrogram melspectrogram(const Waveform& wave, const MelRange& range = {},
                              const MelConfig& cfg = {});

enum class Alignment { Start, Centered };

struct AudioWindow {
  torch::Tensor mel;  // [16, 80]
  int64_t start = 0;
  bool edge_padded = false;
};

/// Mel slice aligned to video frame `frame`. Windows that run past either end
/// are filled by replicating the edge frame.
AudioWindow mel_window(const MelSpectrogram& mel, int frame, int video_fps = 25,
                       Alignment align = Alignment::Start);

/// All per-frame windows of a clip stacked into [frames, 16, 80].
torch::Tensor frame_windows(const MelSpectrogram& mel, int video_frames, int video_fps = 25,
                            Alignment align = Alignment::Start);

}  // namespace lipsync::audio

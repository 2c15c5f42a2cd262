#include "lipsync/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace lipsync::audio {
namespace {

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) {
    throw std::runtime_error("wav: truncated file");
  }
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  }
  T out;
  std::memcpy(&out, &v, sizeof(T));
  return out;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  uint64_t v = 0;
  std::memcpy(&v, &value, sizeof(T));
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

double sinc(double x) {
  if (std::abs(x) < 1e-12) {
    return 1.0;
  }
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("wav: cannot open " + path.string());
  }
  char tag[4];
  in.read(tag, 4);
  if (!in || std::strncmp(tag, "RIFF", 4) != 0) {
    throw std::runtime_error("wav: missing RIFF header in " + path.string());
  }
  read_le<uint32_t>(in);
  in.read(tag, 4);
  if (!in || std::strncmp(tag, "WAVE", 4) != 0) {
    throw std::runtime_error("wav: missing WAVE tag in " + path.string());
  }
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  while (in.read(tag, 4)) {
    const auto size = read_le<uint32_t>(in);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = read_le<uint16_t>(in);
      channels = read_le<uint16_t>(in);
      rate = read_le<uint32_t>(in);
      read_le<uint32_t>(in);
      read_le<uint16_t>(in);
      bits = read_le<uint16_t>(in);
      in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!have_fmt) {
        throw std::runtime_error("wav: data chunk before fmt chunk");
      }
      if (format != 1 || bits != 16 || channels != 1) {
        throw std::runtime_error("wav: only 16-bit PCM mono is supported");
      }
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(size / 2);
      for (auto& s : w.samples) {
        s = static_cast<float>(read_le<int16_t>(in)) / 32768.0f;
      }
      return w;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
  }
  throw std::runtime_error("wav: no data chunk in " + path.string());
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("wav: cannot write " + path.string());
  }
  const auto data_bytes = static_cast<uint32_t>(wave.samples.size() * 2);
  out.write("RIFF", 4);
  write_le<uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_le<uint32_t>(out, 16);
  write_le<uint16_t>(out, 1);
  write_le<uint16_t>(out, 1);
  write_le<uint32_t>(out, static_cast<uint32_t>(wave.sample_rate));
  write_le<uint32_t>(out, static_cast<uint32_t>(wave.sample_rate * 2));
  write_le<uint16_t>(out, 2);
  write_le<uint16_t>(out, 16);
  out.write("data", 4);
  write_le<uint32_t>(out, data_bytes);
  for (float s : wave.samples) {
    const float clipped = std::clamp(s, -1.0f, 32767.0f / 32768.0f);
    write_le<int16_t>(out, static_cast<int16_t>(std::lround(clipped * 32768.0f)));
  }
  if (!out) {
    throw std::runtime_error("wav: write failed for " + path.string());
  }
}

Waveform resample(const Waveform& wave, int target_rate) {
  if (wave.sample_rate <= 0 || target_rate <= 0) {
    throw std::invalid_argument("resample: sample rates must be positive");
  }
  if (wave.samples.empty()) {
    throw std::invalid_argument("resample: empty waveform");
  }
  if (wave.sample_rate == target_rate) {
    return wave;
  }
  constexpr int kZeroCrossings = 32;
  const double ratio = static_cast<double>(target_rate) / wave.sample_rate;
  const double cutoff = std::min(1.0, ratio) * 0.95;
  const double half_width = kZeroCrossings / cutoff;
  const auto in_len = static_cast<int64_t>(wave.samples.size());
  const auto out_len = static_cast<int64_t>(std::llround(static_cast<double>(in_len) * ratio));

  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<size_t>(out_len));
  for (int64_t n = 0; n < out_len; ++n) {
    const double pos = static_cast<double>(n) / ratio;
    const auto lo = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(pos - half_width)));
    const auto hi = std::min<int64_t>(in_len - 1, static_cast<int64_t>(std::floor(pos + half_width)));
    double acc = 0.0;
    for (int64_t k = lo; k <= hi; ++k) {
      const double x = pos - static_cast<double>(k);
      const double window = 0.5 + 0.5 * std::cos(std::numbers::pi * x / half_width);
      acc += wave.samples[static_cast<size_t>(k)] * cutoff * sinc(cutoff * x) * window;
    }
    out.samples[static_cast<size_t>(n)] = static_cast<float>(acc);
  }
  return out;
}

torch::Tensor mel_filterbank(const MelConfig& cfg) {
  const int bins = cfg.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(static_cast<size_t>(cfg.n_mels + 2));
  for (size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (cfg.n_mels + 1));
  }
  auto fb = torch::zeros({cfg.n_mels, bins}, torch::kFloat64);
  auto acc = fb.accessor<double, 2>();
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double norm = 2.0 / (right - left);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      acc[m][k] = std::max(0.0, std::min(up, down)) * norm;
    }
  }
  return fb.to(torch::kFloat32);
}

torch::Tensor log_mel(const Waveform& wave, const MelConfig& cfg) {
  if (wave.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("melspectrogram: waveform must be resampled to " +
                                std::to_string(cfg.sample_rate) + " Hz first");
  }
  if (static_cast<int64_t>(wave.samples.size()) < cfg.hop) {
    throw std::invalid_argument("melspectrogram: waveform shorter than one hop");
  }
  auto x = torch::from_blob(const_cast<float*>(wave.samples.data()),
                            {static_cast<int64_t>(wave.samples.size())}, torch::kFloat32)
               .clone();
  const int pad = cfg.n_fft / 2;
  x = torch::constant_pad_nd(x, {pad, pad}, 0.0);
  auto window = torch::hann_window(cfg.win_length, /*periodic=*/true, torch::kFloat32);
  auto spec = torch::stft(x, cfg.n_fft, cfg.hop, cfg.win_length, window, /*normalized=*/false,
                          /*onesided=*/true, /*return_complex=*/true);
  auto mag = spec.abs();  // [bins, frames]
  auto mel = torch::matmul(mel_filterbank(cfg), mag);
  return torch::log10(torch::clamp_min(mel, cfg.amplitude_floor)).transpose(0, 1).contiguous();
}

MelSpectrogram normalize(const torch::Tensor& log_mel_frames, const MelRange& range,
                         const MelConfig& cfg) {
  if (!(range.hi > range.lo)) {
    throw std::invalid_argument("mel range must satisfy hi > lo");
  }
  MelSpectrogram m;
  m.frames = ((log_mel_frames - range.lo) / (range.hi - range.lo) * 2.0 - 1.0).clamp(-1.0, 1.0);
  m.hop = cfg.hop;
  m.frames_per_second = cfg.frames_per_second();
  return m;
}

MelSpectrogram melspectrogram(const Waveform& wave, const MelRange& range, const MelConfig& cfg) {
  return normalize(log_mel(wave, cfg), range, cfg);
}

AudioWindow mel_window(const MelSpectrogram& mel, int frame, int video_fps, Alignment align) {
  if (frame < 0) {
    throw std::invalid_argument("mel_window: negative frame index");
  }
  if (video_fps <= 0 || mel.count() < 1) {
    throw std::invalid_argument("mel_window: empty spectrogram or invalid fps");
  }
  // floor(mel_fps * s / video_fps) evaluated exactly for integral hop rates.
  const auto mel_fps_num = static_cast<int64_t>(std::llround(mel.frames_per_second * mel.hop));
  const auto mel_fps_den = static_cast<int64_t>(mel.hop);
  int64_t start = 0;
  if (align == Alignment::Start) {
    start = (static_cast<int64_t>(frame) * mel_fps_num) / (mel_fps_den * video_fps);
  } else {
    const int64_t mid = ((2 * static_cast<int64_t>(frame) + 1) * mel_fps_num) /
                        (2 * mel_fps_den * video_fps);
    start = mid - kWindowFrames / 2;
  }
  AudioWindow w;
  w.start = start;
  const int64_t count = mel.count();
  auto idx = torch::arange(start, start + kWindowFrames, torch::kLong);
  w.edge_padded = start < 0 || start + kWindowFrames > count;
  idx = idx.clamp(0, count - 1);
  w.mel = mel.frames.index_select(0, idx).contiguous();
  return w;
}

torch::Tensor frame_windows(const MelSpectrogram& mel, int video_frames, int video_fps,
                            Alignment align) {
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<size_t>(video_frames));
  for (int s = 0; s < video_frames; ++s) {
    out.push_back(mel_window(mel, s, video_fps, align).mel);
  }
  return torch::stack(out);
}

}  // namespace lipsync::audio

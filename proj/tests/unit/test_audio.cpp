#include <cmath>
#include <numbers>

#include "doctest.h"
#include "lipsync/audio.hpp"
#include "support.hpp"

using namespace lipsync::audio;
using lipsync::testing::fixture;
using lipsync::testing::TempDir;
using lipsync::testing::to_tensor;

namespace {

Waveform tone(double hz, double seconds, int rate = kSampleRate, double amp = 0.5) {
  Waveform w;
  w.sample_rate = rate;
  const auto n = static_cast<size_t>(std::llround(seconds * rate));
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    w.samples[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * i / rate));
  }
  return w;
}

}  // namespace

TEST_CASE("resample: identity at 16 kHz and length ratios") {
  const auto w = tone(300.0, 0.5);
  CHECK(resample(w).samples == w.samples);
  const auto from32 = resample(tone(300.0, 1.0, 32000));
  CHECK(from32.sample_rate == kSampleRate);
  CHECK(std::abs(static_cast<int64_t>(from32.samples.size()) - 16000) <= 1);
  const auto from8 = resample(tone(300.0, 1.0, 8000));
  CHECK(std::abs(static_cast<int64_t>(from8.samples.size()) - 16000) <= 1);
  CHECK_THROWS_AS(resample(Waveform{{}, 8000}), std::invalid_argument);
}

TEST_CASE("resample preserves an in-band tone") {
  const auto up = resample(tone(440.0, 1.0, 8000));
  const auto ref = tone(440.0, 1.0);
  double err = 0.0;
  for (size_t i = 1000; i < 15000; ++i) {
    err = std::max(err, static_cast<double>(std::abs(up.samples[i] - ref.samples[i])));
  }
  CHECK(err < 0.02);
}

TEST_CASE("wav round trip through 16-bit PCM") {
  TempDir dir("wav");
  const auto w = tone(440.0, 0.1);
  write_wav(dir.path() / "a.wav", w);
  const auto back = read_wav(dir.path() / "a.wav");
  REQUIRE(back.samples.size() == w.samples.size());
  CHECK(back.sample_rate == kSampleRate);
  for (size_t i = 0; i < w.samples.size(); ++i) {
    REQUIRE(std::abs(back.samples[i] - w.samples[i]) <= 1.0 / 32768.0);
  }
}

TEST_CASE("melspectrogram frame count and shape") {
  const auto m = melspectrogram(tone(440.0, 1.0));
  CHECK(m.count() == 81);
  CHECK(m.frames.size(1) == 80);
  CHECK(m.frames_per_second == doctest::Approx(80.0));
  CHECK(torch::isfinite(m.frames).all().item<bool>());
  CHECK_THROWS_AS(melspectrogram(tone(440.0, 1.0, 8000)), std::invalid_argument);
  CHECK_THROWS_AS(melspectrogram(tone(440.0, 0.005)), std::invalid_argument);
}

TEST_CASE("silence maps to the constant normalisation floor") {
  Waveform silence;
  silence.samples.assign(16000, 0.0f);
  const auto m = melspectrogram(silence);
  CHECK(m.frames.min().item<double>() == -1.0);
  CHECK(m.frames.max().item<double>() == -1.0);
}

TEST_CASE("log-mel agrees with the librosa reference") {
  const auto ref = fixture("mel.json");
  Waveform w;
  for (const auto& s : ref["samples"]) {
    w.samples.push_back(s.get<float>());
  }
  const auto expected = to_tensor(ref["log_mel"], torch::kFloat32);
  const auto got = log_mel(w);
  REQUIRE(got.sizes() == expected.sizes());
  CHECK((got - expected).abs().max().item<double>() <= 2e-3);
}

TEST_CASE("a pure tone peaks in one mel bin, the one the reference filterbank picks") {
  const auto ref = fixture("mel.json");
  const auto m = log_mel(tone(440.0, 1.0));
  CHECK(m.size(0) == ref["one_second_frames"].get<int64_t>());
  const auto peaks = m.slice(0, 2, m.size(0) - 2).argmax(1);
  CHECK(peaks.min().item<int64_t>() == peaks.max().item<int64_t>());
  CHECK(peaks[0].item<int64_t>() == ref["tone_440_bin"].get<int64_t>());
}

TEST_CASE("melspectrogram is deterministic") {
  const auto w = tone(700.0, 0.7, kSampleRate, 0.3);
  CHECK(torch::equal(melspectrogram(w).frames, melspectrogram(w).frames));
}

TEST_CASE("mel_window start indices") {
  const auto m = melspectrogram(tone(440.0, 2.0));
  CHECK(mel_window(m, 0).start == 0);
  CHECK(mel_window(m, 0).mel.sizes() == torch::IntArrayRef{16, 80});
  CHECK(mel_window(m, 10).start == 32);
  CHECK(mel_window(m, 25).start == 80);
  CHECK_FALSE(mel_window(m, 25).edge_padded);
  CHECK_THROWS_AS(mel_window(m, -1), std::invalid_argument);
}

TEST_CASE("windows past the end are edge-replicated and flagged") {
  const auto m = melspectrogram(tone(440.0, 1.0));
  const auto w = mel_window(m, 24);
  CHECK(w.edge_padded);
  CHECK(w.mel.sizes() == torch::IntArrayRef{16, 80});
  CHECK(torch::equal(w.mel[15], m.frames[m.count() - 1]));
}

TEST_CASE("property: windows are 16x80, monotone, and overlap by at least 12 frames") {
  for (double seconds : {0.3, 1.0, 2.7}) {
    const auto m = melspectrogram(tone(250.0, seconds));
    const int frames = static_cast<int>(seconds * 25) + 3;
    int64_t prev = -1;
    for (int s = 0; s < frames; ++s) {
      const auto w = mel_window(m, s);
      REQUIRE(w.mel.sizes() == torch::IntArrayRef{16, 80});
      if (prev >= 0) {
        REQUIRE(w.start >= prev);
        REQUIRE(16 - (w.start - prev) >= 12);
      }
      prev = w.start;
    }
    CHECK(frame_windows(m, frames).sizes() == torch::IntArrayRef{frames, 16, 80});
  }
}

TEST_CASE("centered alignment shifts the window back by half its length") {
  const auto m = melspectrogram(tone(440.0, 2.0));
  const auto w = mel_window(m, 10, 25, Alignment::Centered);
  CHECK(w.start == 33 - 8);
}

#include "lipsync/toyset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numbers>
#include <random>
#include <stdexcept>
#include <thread>

#include "lipsync/dataset.hpp"
#include "lipsync/rng.hpp"

namespace lipsync::toyset {
namespace {

constexpr int kBaseSupersample = 4;
constexpr int kMouthSupersample = 16;

// Streams derived from a clip seed.
enum Stream : uint64_t { kAudioStream = 1, kIdentityStream = 2 };

double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct FaceLayout {
  double cx, cy, radius;
  double mouth_cx, mouth_cy, mouth_a;
};

FaceLayout layout_for(const FaceIdentity& id, const ToyConfig& cfg) {
  const double s = cfg.image_size;
  FaceLayout l{};
  l.cx = 0.5 * s + id.jitter_x;
  l.cy = cfg.face_center_y * s + id.jitter_y;
  l.radius = cfg.face_radius * s;
  l.mouth_cx = l.cx;
  l.mouth_cy = cfg.mouth_center_y * s + id.jitter_y;
  l.mouth_a = cfg.mouth_half_width * s;
  return l;
}

// Colour of the face without the mouth at continuous position (x, y).
std::array<double, 3> base_color(const FaceIdentity& id, const FaceLayout& l, const ToyConfig& cfg,
                                 double x, double y) {
  const double s = cfg.image_size;
  const double dx = x - l.cx, dy = y - l.cy;
  if (dx * dx + dy * dy > l.radius * l.radius) {
    return id.background;
  }
  const double eye_r = 0.05 * s;
  const double eye_y = l.cy - 0.16 * s;
  for (double ex : {l.cx - 0.15 * s, l.cx + 0.15 * s}) {
    const double ddx = x - ex, ddy = y - eye_y;
    if (ddx * ddx + ddy * ddy < eye_r * eye_r) {
      return id.eyes;
    }
  }
  auto c = id.skin;
  // Forehead texture: seeded stripes, confined to the upper part of the face.
  if (y < l.cy - 0.24 * s) {
    const double u = std::cos(id.stripe_angle) * x + std::sin(id.stripe_angle) * y;
    const double shade = 0.10 * std::sin(2.0 * std::numbers::pi * id.stripe_frequency * u / s +
                                         id.stripe_phase);
    for (auto& ch : c) {
      ch = std::clamp(ch + shade, 0.0, 1.0);
    }
  }
  return c;
}

}  // namespace

SynthAudio synth_audio(uint64_t seed, double duration_s, const ToyConfig& cfg) {
  if (duration_s < 0.2) {
    throw std::invalid_argument("synth_audio: duration must be >= 0.2 s");
  }
  std::mt19937_64 rng(derive_seed(seed, kAudioStream));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int spf = cfg.samples_per_frame();
  const int frames = static_cast<int>(std::ceil(duration_s * cfg.fps - 1e-9));
  const auto total = static_cast<size_t>(frames) * spf;

  // Envelope knots every 2-6 video frames; a quarter of them are silent.
  std::vector<double> knot_t{0.0};
  std::vector<double> knot_v{unit(rng) < 0.25 ? 0.0 : 0.15 + 0.85 * unit(rng)};
  while (knot_t.back() < static_cast<double>(total)) {
    const int gap = 2 + static_cast<int>(unit(rng) * 5.0);
    knot_t.push_back(knot_t.back() + static_cast<double>(gap * spf));
    knot_v.push_back(unit(rng) < 0.25 ? 0.0 : 0.15 + 0.85 * unit(rng));
  }

  const int tones = 2 + static_cast<int>(unit(rng) * 3.0);
  std::vector<double> freq, amp, phase;
  while (static_cast<int>(freq.size()) < tones) {
    const double f = 200.0 + 1800.0 * unit(rng);
    const bool separated = std::all_of(freq.begin(), freq.end(),
                                       [f](double g) { return std::abs(f - g) >= 100.0; });
    if (separated) {
      freq.push_back(f);
      amp.push_back(0.5 + unit(rng));
      phase.push_back(2.0 * std::numbers::pi * unit(rng));
    }
  }
  double amp_sum = 0.0;
  for (double a : amp) {
    amp_sum += a;
  }
  for (double& a : amp) {
    a *= 0.8 / amp_sum;
  }

  SynthAudio out;
  out.wave.sample_rate = cfg.sample_rate;
  out.wave.samples.resize(total);
  out.envelope.assign(static_cast<size_t>(frames), 0.0);
  size_t knot = 0;
  for (size_t n = 0; n < total; ++n) {
    const double tn = static_cast<double>(n);
    while (knot + 1 < knot_t.size() && knot_t[knot + 1] <= tn) {
      ++knot;
    }
    const double u = (tn - knot_t[knot]) / (knot_t[knot + 1] - knot_t[knot]);
    const double env = knot_v[knot] + (knot_v[knot + 1] - knot_v[knot]) * smoothstep(u);
    double carrier = 0.0;
    for (size_t k = 0; k < freq.size(); ++k) {
      carrier += amp[k] * std::sin(2.0 * std::numbers::pi * freq[k] * tn / cfg.sample_rate + phase[k]);
    }
    out.wave.samples[n] = static_cast<float>(env * carrier);
    out.envelope[n / static_cast<size_t>(spf)] += env / spf;
  }
  for (double& e : out.envelope) {
    e = std::clamp(e, 0.0, 1.0);
  }
  return out;
}

FaceIdentity make_identity(uint64_t seed, const ToyConfig& cfg) {
  std::mt19937_64 rng(derive_seed(seed, kIdentityStream));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FaceIdentity id;
  id.skin = hsv_to_rgb(unit(rng), 0.45, 0.85);
  const double bg_hue = unit(rng);
  id.background = hsv_to_rgb(bg_hue, 0.3, 0.25 + 0.2 * unit(rng));
  id.eyes = hsv_to_rgb(unit(rng), 0.6, 0.35);
  id.stripe_angle = std::numbers::pi * unit(rng);
  id.stripe_frequency = 3.0 + 5.0 * unit(rng);
  id.stripe_phase = 2.0 * std::numbers::pi * unit(rng);
  const double scale = cfg.image_size / 64.0;
  id.jitter_x = (2.0 * unit(rng) - 1.0) * cfg.jitter_px * scale;
  id.jitter_y = (2.0 * unit(rng) - 1.0) * cfg.jitter_px * scale;
  return id;
}

FaceFrame render_face(const FaceIdentity& id, double aperture, const ToyConfig& cfg) {
  const int n = cfg.image_size;
  const auto layout = layout_for(id, cfg);
  const double a = layout.mouth_a;
  const double b = cfg.min_half_height_px() +
                   std::clamp(aperture, 0.0, 1.0) *
                       (cfg.max_half_height_px() - cfg.min_half_height_px());

  auto img = torch::empty({3, n, n}, torch::kFloat32);
  auto acc = img.accessor<float, 3>();
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      std::array<double, 3> sum{};
      for (int sy = 0; sy < kBaseSupersample; ++sy) {
        for (int sx = 0; sx < kBaseSupersample; ++sx) {
          const auto c = base_color(id, layout, cfg, x + (sx + 0.5) / kBaseSupersample,
                                    y + (sy + 0.5) / kBaseSupersample);
          for (int ch = 0; ch < 3; ++ch) {
            sum[ch] += c[ch];
          }
        }
      }
      // Mouth coverage, only near the ellipse.
      double coverage = 0.0;
      if (std::abs(x + 0.5 - layout.mouth_cx) < a + 1.0 &&
          std::abs(y + 0.5 - layout.mouth_cy) < b + 1.0) {
        int inside = 0;
        for (int sy = 0; sy < kMouthSupersample; ++sy) {
          for (int sx = 0; sx < kMouthSupersample; ++sx) {
            const double px = (x + (sx + 0.5) / kMouthSupersample - layout.mouth_cx) / a;
            const double py = (y + (sy + 0.5) / kMouthSupersample - layout.mouth_cy) / b;
            inside += px * px + py * py <= 1.0 ? 1 : 0;
          }
        }
        coverage = static_cast<double>(inside) / (kMouthSupersample * kMouthSupersample);
      }
      constexpr double kSamples = kBaseSupersample * kBaseSupersample;
      for (int ch = 0; ch < 3; ++ch) {
        const double base = sum[ch] / kSamples;
        const double v = base * (1.0 - coverage) + kMouthColor[ch] * coverage;
        acc[ch][y][x] = static_cast<float>(2.0 * v - 1.0);
      }
    }
  }
  FaceFrame out;
  out.pixels = img;
  out.landmarks = {Point{layout.mouth_cx - a, layout.mouth_cy},
                   Point{layout.mouth_cx + a, layout.mouth_cy},
                   Point{layout.mouth_cx, layout.mouth_cy - b},
                   Point{layout.mouth_cx, layout.mouth_cy + b}};
  return out;
}

ToyClip render_clip(uint64_t seed, int frames, const ToyConfig& cfg) {
  if (frames < 5) {
    throw std::invalid_argument("render_clip: need at least 5 frames");
  }
  auto sound = synth_audio(seed, static_cast<double>(frames) / cfg.fps, cfg);
  const auto id = make_identity(seed, cfg);
  ToyClip clip;
  clip.seed = seed;
  clip.wave = std::move(sound.wave);
  clip.aperture = std::move(sound.envelope);
  clip.box = visual::Box{0, 0, cfg.image_size, cfg.image_size};
  std::vector<torch::Tensor> pixels;
  pixels.reserve(static_cast<size_t>(frames));
  for (int s = 0; s < frames; ++s) {
    auto f = render_face(id, clip.aperture[static_cast<size_t>(s)], cfg);
    pixels.push_back(f.pixels);
    clip.landmarks.push_back(f.landmarks);
  }
  clip.frames = torch::stack(pixels);
  return clip;
}

MouthEstimate aperture_estimate(const torch::Tensor& frame, const ToyConfig& cfg) {
  if (frame.dim() != 3 || frame.size(0) != 3) {
    throw std::invalid_argument("aperture_estimate: expected [3, H, W] frame");
  }
  const auto h = frame.size(1), w = frame.size(2);
  const double mouth_lum = (kMouthColor[0] + kMouthColor[1] + kMouthColor[2]) / 3.0;

  // Search box around the nominal mouth: the central half of the mouth width
  // and its full opening range plus a margin, which keeps the face outline and
  // background out of the column sums.
  const double margin = 0.03;
  const double reach = cfg.mouth_max_half_height + margin;
  const auto y0 = std::max<int64_t>(h / 2, static_cast<int64_t>((cfg.mouth_center_y - reach) * h));
  const auto y1 = std::min<int64_t>(h, static_cast<int64_t>(std::ceil((cfg.mouth_center_y + reach) * h)));
  const auto x0 = static_cast<int64_t>((0.5 - 0.5 * cfg.mouth_half_width) * w);
  const auto x1 = static_cast<int64_t>(std::ceil((0.5 + 0.5 * cfg.mouth_half_width) * w));
  auto lum = ((frame.detach().to(torch::kFloat64).mean(0) + 1.0) * 0.5)
                 .slice(0, y0, y1)
                 .slice(1, x0, x1)
                 .contiguous();
  // Skin is the brightest surface in the box and always fills its top and
  // bottom margins, even when the open mouth covers most of it.
  const double skin_lum = torch::quantile(lum.flatten(), 0.9).item<double>();
  MouthEstimate est;
  if (skin_lum - mouth_lum < 0.1) {
    return est;
  }
  auto dark = ((skin_lum - lum) / (skin_lum - mouth_lum)).clamp(0.0, 1.0);
  auto column = dark.sum(0);
  const auto best = column.argmax().item<int64_t>();
  const double extent = column[best].item<double>();
  if (extent < cfg.min_half_height_px()) {
    return est;
  }
  auto rows = torch::arange(y0, y1, torch::kFloat64) + 0.5;
  est.found = true;
  est.center_x = static_cast<double>(x0 + best) + 0.5;
  est.center_y = (dark.select(1, best) * rows).sum().item<double>() / extent;
  est.half_height = 0.5 * extent;
  est.aperture = std::clamp((est.half_height - cfg.min_half_height_px()) /
                                (cfg.max_half_height_px() - cfg.min_half_height_px()),
                            0.0, 1.0);
  return est;
}

MouthLandmarks estimate_landmarks(const MouthEstimate& est, const ToyConfig& cfg) {
  const double a = cfg.px(cfg.mouth_half_width);
  return {Point{est.center_x - a, est.center_y}, Point{est.center_x + a, est.center_y},
          Point{est.center_x, est.center_y - est.half_height},
          Point{est.center_x, est.center_y + est.half_height}};
}

CorpusManifest generate_corpus(int clips, int frames_per_clip, const std::filesystem::path& out_dir,
                               uint64_t seed, const ToyConfig& cfg, int workers) {
  if (clips < 1) {
    throw std::invalid_argument("generate_corpus: need at least one clip");
  }
  CorpusManifest manifest;
  manifest.seed = seed;
  manifest.frames_per_clip = frames_per_clip;
  manifest.config = cfg;
  for (int i = 0; i < clips; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05d", i);
    manifest.clips.push_back(CorpusEntry{name, derive_seed(seed, static_cast<uint64_t>(i)),
                                         frames_per_clip});
  }
  const int n_train = clips * 8 / 10;
  const int n_val = clips / 10;
  for (int i = 0; i < clips; ++i) {
    auto& split = i < n_train ? manifest.train : (i < n_train + n_val ? manifest.val : manifest.test);
    split.push_back(manifest.clips[static_cast<size_t>(i)].id);
  }

  std::filesystem::create_directories(out_dir);
  std::vector<std::pair<double, double>> ranges(static_cast<size_t>(clips));
  std::atomic<int> next{0};
  std::mutex error_mutex;
  std::vector<std::string> errors;
  auto work = [&] {
    for (int i = next++; i < clips; i = next++) {
      const auto& entry = manifest.clips[static_cast<size_t>(i)];
      try {
        const auto clip = render_clip(entry.seed, frames_per_clip, cfg);
        data::write_toy_clip(out_dir / entry.id, clip, cfg);
        const auto lm = audio::log_mel(clip.wave);
        ranges[static_cast<size_t>(i)] = {lm.min().item<double>(), lm.max().item<double>()};
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        errors.push_back(entry.id + ": " + e.what());
      }
    }
  };
  const int n_workers = std::clamp(workers, 1, clips);
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int k = 0; k < n_workers; ++k) {
      pool.emplace_back(work);
    }
  }
  if (!errors.empty()) {
    std::string msg = "generate_corpus: " + std::to_string(errors.size()) + " of " +
                      std::to_string(clips) + " clips failed; partial output left in " +
                      out_dir.string();
    for (const auto& e : errors) {
      msg += "\n  " + e;
    }
    throw std::runtime_error(msg);
  }

  const int range_clips = n_train > 0 ? n_train : clips;
  manifest.mel_range = audio::MelRange{ranges[0].first, ranges[0].second};
  for (int i = 1; i < range_clips; ++i) {
    manifest.mel_range.lo = std::min(manifest.mel_range.lo, ranges[static_cast<size_t>(i)].first);
    manifest.mel_range.hi = std::max(manifest.mel_range.hi, ranges[static_cast<size_t>(i)].second);
  }
  if (!(manifest.mel_range.hi > manifest.mel_range.lo)) {
    manifest.mel_range.hi = manifest.mel_range.lo + 1.0;
  }
  data::write_manifest(out_dir, manifest);
  return manifest;
}

}  // namespace lipsync::toyset

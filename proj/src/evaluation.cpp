#include "lipsync/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lipsync/dataset.hpp"
#include "lipsync/visual.hpp"

namespace lipsync::eval {
namespace {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using nlohmann::json;

torch::Tensor as_batch(const torch::Tensor& x) {
  return x.dim() == 3 ? x.unsqueeze(0) : x;
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
  if (a.dim() < 3 || a.size(-3) != 3) {
    throw std::invalid_argument(std::string(what) + ": expected [3, H, W] or [N, 3, H, W] frames");
  }
}

torch::Tensor unit_scale(const torch::Tensor& x) {
  return (as_batch(x).to(torch::kFloat64) + 1.0) / 2.0;
}

torch::Tensor gaussian_window(int size, double sigma) {
  auto r = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-(r * r) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

std::vector<fs::path> clip_dirs(const fs::path& root) {
  if (fs::exists(root / "frames")) {
    return {root};
  }
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "frames")) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Symmetric PSD square root via eigendecomposition.
torch::Tensor sqrt_psd(const torch::Tensor& m) {
  auto [vals, vecs] = torch::linalg_eigh(m);
  return vecs.matmul(torch::diag(vals.clamp_min(0.0).sqrt())).matmul(vecs.transpose(0, 1));
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "psnr");
  const double mse = (unit_scale(a) - unit_scale(b)).pow(2).mean().item<double>();
  if (mse <= 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "ssim");
  constexpr int kSize = 11;
  constexpr double kSigma = 1.5;
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  auto x = unit_scale(a);
  auto y = unit_scale(b);
  if (x.size(2) < kSize || x.size(3) < kSize) {
    throw std::invalid_argument("ssim: frames must be at least 11x11");
  }
  const auto channels = x.size(1);
  auto w = gaussian_window(kSize, kSigma).expand({channels, 1, kSize, kSize}).contiguous();
  auto filt = [&](const torch::Tensor& z) {
    return F::conv2d(z, w, F::Conv2dFuncOptions().groups(channels));
  };
  auto mx = filt(x), my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

double lmd(const std::vector<toyset::MouthLandmarks>& predicted,
           const std::vector<toyset::MouthLandmarks>& reference, double face_size) {
  if (predicted.size() != reference.size()) {
    throw std::invalid_argument("lmd: traces have different lengths (" +
                                std::to_string(predicted.size()) + " vs " +
                                std::to_string(reference.size()) + ")");
  }
  if (!(face_size > 0.0)) {
    throw std::invalid_argument("lmd: face size must be positive");
  }
  if (predicted.empty()) {
    return 0.0;
  }
  double total = 0.0;
  for (size_t f = 0; f < predicted.size(); ++f) {
    for (size_t p = 0; p < predicted[f].size(); ++p) {
      total += std::hypot(predicted[f][p].x - reference[f][p].x, predicted[f][p].y - reference[f][p].y);
    }
  }
  return total / static_cast<double>(predicted.size() * predicted.front().size()) / face_size;
}

SyncScores sync_from_embeddings(const torch::Tensor& video, const torch::Tensor& audio) {
  if (video.dim() != 2 || audio.dim() != 2 || video.size(1) != audio.size(1)) {
    throw std::invalid_argument("sync metrics: embeddings must be [W, D] and [S, D]");
  }
  const auto windows = video.size(0);
  const auto frames = audio.size(0);
  if (windows < 1 || frames < windows) {
    throw std::invalid_argument("sync metrics: need at least one window and one audio window per window");
  }
  auto dist = torch::cdist(video.to(torch::kFloat64), audio.to(torch::kFloat64));  // [W, S]
  auto acc = dist.accessor<double, 2>();
  double sum_c = 0.0, sum_d = 0.0;
  for (int64_t w = 0; w < windows; ++w) {
    const double on = acc[w][w];
    std::vector<double> off;
    for (int o = -kMaxSyncOffset; o <= kMaxSyncOffset; ++o) {
      const int64_t j = w + o;
      if (o != 0 && j >= 0 && j < frames) {
        off.push_back(acc[w][j]);
      }
    }
    double median = on;
    if (!off.empty()) {
      std::sort(off.begin(), off.end());
      const size_t n = off.size();
      median = n % 2 == 1 ? off[n / 2] : 0.5 * (off[n / 2 - 1] + off[n / 2]);
    }
    sum_c += median - on;
    sum_d += on;
  }
  return SyncScores{sum_c / static_cast<double>(windows), sum_d / static_cast<double>(windows)};
}

SyncScores sync_metrics(const torch::Tensor& frames, const torch::Tensor& windows,
                        sync::SyncNet& expert) {
  if (frames.dim() != 4 || frames.size(0) < sync::kWindow) {
    throw std::invalid_argument("sync metrics: clip must have at least 5 frames");
  }
  if (windows.size(0) != frames.size(0)) {
    throw std::invalid_argument("sync metrics: need one mel window per frame");
  }
  torch::NoGradGuard guard;
  const auto count = frames.size(0) - sync::kWindow + 1;
  std::vector<torch::Tensor> stacks;
  for (int64_t s = 0; s < count; ++s) {
    stacks.push_back(frames.slice(0, s, s + sync::kWindow));
  }
  auto v = expert->embed_video(torch::stack(stacks).to(torch::kFloat32));
  auto a = expert->embed_audio(windows.to(torch::kFloat32));
  return sync_from_embeddings(v, a);
}

Frechet frechet_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1)) {
    throw std::invalid_argument("frechet: feature sets must be [N, D] with equal D");
  }
  if (a.size(0) < kMinFrechetSamples || b.size(0) < kMinFrechetSamples) {
    throw std::invalid_argument("frechet: need at least 32 samples per side (got " +
                                std::to_string(a.size(0)) + " and " + std::to_string(b.size(0)) + ")");
  }
  auto x = a.to(torch::kFloat64);
  auto y = b.to(torch::kFloat64);
  auto mu_a = x.mean(0), mu_b = y.mean(0);
  auto cov = [](const torch::Tensor& f, const torch::Tensor& mu) {
    auto c = f - mu;
    return c.transpose(0, 1).matmul(c) / static_cast<double>(f.size(0) - 1);
  };
  auto sa = cov(x, mu_a), sb = cov(y, mu_b);
  const auto d = sa.size(0);
  Frechet out;
  auto min_eig = [](const torch::Tensor& m) { return torch::linalg_eigvalsh(m).min().item<double>(); };
  const double scale = std::max({1.0, sa.diagonal().abs().max().item<double>(),
                                 sb.diagonal().abs().max().item<double>()});
  if (min_eig(sa) <= 1e-12 * scale || min_eig(sb) <= 1e-12 * scale) {
    auto eye = torch::eye(d, torch::kFloat64) * kCovarianceEpsilon;
    sa = sa + eye;
    sb = sb + eye;
    out.regularized = true;
  }
  auto root_a = sqrt_psd(sa);
  auto inner = root_a.matmul(sb).matmul(root_a);
  inner = (inner + inner.transpose(0, 1)) / 2.0;
  const double cross = torch::linalg_eigvalsh(inner).clamp_min(0.0).sqrt().sum().item<double>();
  const double mean_term = (mu_a - mu_b).pow(2).sum().item<double>();
  const double trace = sa.trace().item<double>() + sb.trace().item<double>() - 2.0 * cross;
  out.distance = std::max(0.0, mean_term + trace);
  return out;
}

Frechet feature_frechet(const torch::Tensor& frames_a, const torch::Tensor& frames_b,
                        losses::FeatureExtractor& phi) {
  torch::NoGradGuard guard;
  auto pooled = [&](const torch::Tensor& frames) {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < frames.size(0); i += 64) {
      parts.push_back(phi->pooled(frames.slice(0, i, std::min(frames.size(0), i + 64)).to(torch::kFloat32)));
    }
    return torch::cat(parts);
  };
  return frechet_distance(pooled(frames_a), pooled(frames_b));
}

torch::Tensor load_frame_set(const std::vector<fs::path>& dirs) {
  std::vector<fs::path> files;
  for (const auto& d : dirs) {
    for (const auto& e : fs::recursive_directory_iterator(d)) {
      if (e.is_regular_file() && e.path().extension() == ".png") {
        files.push_back(e.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw std::invalid_argument("no PNG frames found");
  }
  std::vector<torch::Tensor> frames;
  frames.reserve(files.size());
  for (const auto& f : files) {
    frames.push_back(visual::read_png(f));
  }
  return torch::stack(frames);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("pearson: length mismatch");
  }
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) {
    return 0.0;
  }
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) {
    return 0.0;
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> aperture_trace(const torch::Tensor& frames, const toyset::ToyConfig& cfg) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(frames.size(0)));
  for (int64_t s = 0; s < frames.size(0); ++s) {
    out.push_back(toyset::aperture_estimate(frames[s], cfg).aperture);
  }
  return out;
}

std::vector<ClipReport> evaluate_dirs(const fs::path& pred, const fs::path& ref,
                                      const fs::path& expert_ckpt) {
  json extra;
  auto expert = sync::load_expert(expert_ckpt, &extra);
  audio::MelRange range;
  if (extra.contains("mel_range")) {
    range.lo = extra["mel_range"].at("lo").get<double>();
    range.hi = extra["mel_range"].at("hi").get<double>();
  }
  const auto refs = clip_dirs(ref);
  auto find_ref = [&](const std::string& id) -> fs::path {
    for (const auto& r : refs) {
      if (r.filename() == id) {
        return r;
      }
    }
    if (refs.size() == 1) {
      return refs.front();
    }
    throw std::runtime_error("no reference clip named " + id + " under " + ref.string());
  };

  std::vector<ClipReport> rows;
  for (const auto& p : clip_dirs(pred)) {
    ClipReport row;
    row.clip_id = p.filename().string();
    const auto r = find_ref(row.clip_id);
    const auto gen = visual::to_unit_range(data::read_frames(p));
    const auto truth = visual::to_unit_range(data::read_frames(r));
    if (gen.size(0) != truth.size(0)) {
      throw std::runtime_error("clip " + row.clip_id + ": generated and reference frame counts differ");
    }
    const auto count = gen.size(0);
    toyset::ToyConfig cfg;
    cfg.image_size = static_cast<int>(gen.size(3));
    std::vector<toyset::MouthLandmarks> pl, rl;
    double sum_psnr = 0.0, sum_ssim = 0.0;
    for (int64_t s = 0; s < count; ++s) {
      sum_psnr += psnr(gen[s], truth[s]);
      sum_ssim += ssim(gen[s], truth[s]);
      pl.push_back(toyset::estimate_landmarks(toyset::aperture_estimate(gen[s], cfg), cfg));
      rl.push_back(toyset::estimate_landmarks(toyset::aperture_estimate(truth[s], cfg), cfg));
    }
    row.psnr = sum_psnr / static_cast<double>(count);
    row.ssim = sum_ssim / static_cast<double>(count);
    row.lmd = lmd(pl, rl, cfg.image_size);

    const auto wav = fs::exists(p / "audio.wav") ? p / "audio.wav" : r / "audio.wav";
    const auto mel = audio::melspectrogram(audio::resample(audio::read_wav(wav)), range);
    const auto windows = audio::frame_windows(mel, static_cast<int>(count));
    const auto scores = sync_metrics(gen, windows, expert);
    row.sync_c = scores.sync_c;
    row.sync_d = scores.sync_d;
    rows.push_back(row);
  }
  if (rows.empty()) {
    throw std::runtime_error("no generated clips found under " + pred.string());
  }
  return rows;
}

json aggregate(const std::vector<ClipReport>& rows) {
  double n = static_cast<double>(rows.size());
  ClipReport m;
  for (const auto& r : rows) {
    m.psnr += r.psnr / n;
    m.ssim += r.ssim / n;
    m.lmd += r.lmd / n;
    m.sync_c += r.sync_c / n;
    m.sync_d += r.sync_d / n;
  }
  return json{{"clips", rows.size()}, {"psnr", m.psnr}, {"ssim", m.ssim},
              {"lmd", m.lmd},         {"sync_c", m.sync_c}, {"sync_d", m.sync_d}};
}

void write_report(const fs::path& out_csv, const std::vector<ClipReport>& rows) {
  if (out_csv.has_parent_path()) {
    fs::create_directories(out_csv.parent_path());
  }
  std::ofstream csv(out_csv);
  csv.precision(9);
  csv << "clip_id,psnr,ssim,lmd,sync_c,sync_d\n";
  for (const auto& r : rows) {
    csv << r.clip_id << "," << r.psnr << "," << r.ssim << "," << r.lmd << "," << r.sync_c << ","
        << r.sync_d << "\n";
  }
  const auto agg = aggregate(rows);
  csv << "mean," << agg["psnr"].get<double>() << "," << agg["ssim"].get<double>() << ","
      << agg["lmd"].get<double>() << "," << agg["sync_c"].get<double>() << ","
      << agg["sync_d"].get<double>() << "\n";
  if (!csv) {
    throw std::runtime_error("failed writing " + out_csv.string());
  }
  auto json_path = out_csv;
  json_path.replace_extension(".json");
  std::ofstream(json_path) << agg.dump(2) << "\n";
}

}  // namespace lipsync::eval

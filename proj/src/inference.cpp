#include "lipsync/inference.hpp"

#include <cstdio>
#include <stdexcept>
#include <thread>

#include "lipsync/dataset.hpp"
#include "lipsync/rng.hpp"
#include "lipsync/training.hpp"
#include "lipsync/visual.hpp"

namespace lipsync::infer {
namespace {

namespace fs = std::filesystem;

}  // namespace

Predictor network_predictor(model::Denoiser net) {
  return [net](const torch::Tensor& x_t, const torch::Tensor& x_ref, const torch::Tensor& audio,
               diffusion::StepIndex t) mutable {
    auto steps = torch::full({x_t.size(0)}, static_cast<int64_t>(t.value), torch::kLong);
    return net->forward(x_t, x_ref, audio, steps);
  };
}

torch::Tensor sync_frame(const torch::Tensor& v_s, const torch::Tensor& x_r, const torch::Tensor& a_s,
                         const Predictor& predict, const diffusion::NoiseSchedule& sched,
                         const torch::Tensor& eta, const SampleOptions& opts,
                         torch::Generator* renoise_gen) {
  if (v_s.dim() != 3 || v_s.size(0) != 3 || x_r.sizes() != v_s.sizes()) {
    throw std::invalid_argument("sync_frame: v_s and x_r must both be [3, H, W]");
  }
  if (a_s.dim() != 2 || a_s.size(0) != audio::kWindowFrames || a_s.size(1) != audio::kMelBins) {
    throw std::invalid_argument("sync_frame: audio window must be [16, 80]");
  }
  if (opts.known == KnownRegion::Renoise && renoise_gen == nullptr) {
    throw std::invalid_argument("sync_frame: re-noising the known region needs a generator");
  }
  torch::NoGradGuard guard;
  const auto mask = visual::lower_half_mask(static_cast<int>(v_s.size(1)), static_cast<int>(v_s.size(2)));
  const auto v = v_s.unsqueeze(0);
  const auto ref = x_r.unsqueeze(0);
  const auto audio = a_s.unsqueeze(0);
  const auto ts = diffusion::strided_timesteps(sched.steps(), opts.steps);

  auto x = visual::noise_mask(v, mask, eta.reshape_as(v));
  for (size_t i = 0; i < ts.size(); ++i) {
    const auto t = ts[i];
    const auto t_prev = i + 1 < ts.size() ? ts[i + 1] : diffusion::StepIndex{0};
    auto eps_hat = predict(x, ref, audio, t);
    x = diffusion::ddim_step(x, eps_hat, t, t_prev, sched);
    if (opts.known == KnownRegion::Renoise && t_prev.value > 0) {
      auto xi = torch::randn(v.sizes(), *renoise_gen, v.scalar_type());
      x = visual::composite(x, diffusion::forward_sample(v, t_prev, xi, sched), mask);
    } else {
      x = visual::composite(x, v, mask);
    }
  }
  return visual::composite(x, v, mask).squeeze(0);
}

Mode parse_mode(const std::string& s) {
  if (s == "recon" || s == "reconstruction") {
    return Mode::Reconstruction;
  }
  if (s == "cross") {
    return Mode::Cross;
  }
  throw std::invalid_argument("mode must be \"recon\" or \"cross\", got \"" + s + "\"");
}

torch::Tensor sync_clip(const torch::Tensor& frames, const torch::Tensor& windows,
                        const Predictor& predict, const diffusion::NoiseSchedule& sched,
                        const ClipOptions& opts) {
  if (frames.dim() != 4 || frames.size(1) != 3) {
    throw std::invalid_argument("sync_clip: frames must be [S, 3, H, W]");
  }
  const auto count = frames.size(0);
  if (windows.dim() != 3 || windows.size(0) != count) {
    throw std::invalid_argument("sync_clip: need one audio window per frame");
  }
  if (opts.workers < 1) {
    throw std::invalid_argument("sync_clip: workers must be >= 1");
  }
  auto out = torch::empty_like(frames);
  auto work = [&](int64_t s) {
    const auto input = opts.mode == Mode::Reconstruction ? frames[0] : frames[s];
    auto gen = make_generator(derive_seed(opts.seed, static_cast<uint64_t>(s)));
    auto eta = torch::randn(input.sizes(), gen, input.scalar_type());
    out[s].copy_(sync_frame(input, input, windows[s], predict, sched, eta, opts.sample, &gen));
  };
  const auto workers = std::min<int64_t>(opts.workers, count);
  if (workers <= 1) {
    for (int64_t s = 0; s < count; ++s) {
      work(s);
    }
    return out;
  }
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  {
    std::vector<std::jthread> pool;
    for (int64_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          torch::NoGradGuard guard;
          for (int64_t s = w; s < count; s += workers) {
            work(s);
          }
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  return out;
}

int64_t sample_to_dir(const SampleRequest& req) {
  const auto gen = train::load_generator(req.checkpoint);
  if (gen.step < 1) {
    throw std::runtime_error("checkpoint " + req.checkpoint.string() + " has not been trained");
  }
  const auto meta = data::read_meta(req.video);
  if (meta.fps != 25) {
    throw std::runtime_error("clip fps is " + std::to_string(meta.fps) +
                             "; resample the video to 25 fps first");
  }
  const auto source = data::read_frames(req.video);
  const auto count = source.size(0);
  const int size = gen.config.model.image_size;
  std::vector<visual::Box> boxes = meta.crop_boxes;
  if (boxes.empty()) {
    if (source.size(2) != size || source.size(3) != size) {
      throw std::runtime_error("frames are not " + std::to_string(size) +
                               " pixels square and the clip has no crop boxes");
    }
    boxes.assign(static_cast<size_t>(count),
                 visual::Box{0, 0, static_cast<int>(source.size(3)), static_cast<int>(source.size(2))});
  }
  if (static_cast<int64_t>(boxes.size()) != count) {
    throw std::runtime_error("clip has " + std::to_string(boxes.size()) + " crop boxes for " +
                             std::to_string(count) + " frames");
  }
  std::vector<torch::Tensor> full(static_cast<size_t>(count)), crops(static_cast<size_t>(count));
  for (int64_t s = 0; s < count; ++s) {
    full[s] = visual::to_unit_range(source[s]);
    crops[s] = visual::crop_resize(full[s], boxes[s], size);
  }

  const auto wave = audio::resample(audio::read_wav(req.audio));
  const auto mel = audio::melspectrogram(wave, gen.mel_range);
  const auto windows = audio::frame_windows(mel, static_cast<int>(count), meta.fps);
  const auto sched =
      diffusion::make_schedule(gen.config.diffusion_steps, gen.config.beta_start, gen.config.beta_end);
  const auto result = sync_clip(torch::stack(crops), windows, network_predictor(gen.ema), sched, req.clip);

  fs::create_directories(req.out);
  data::write_frames(req.out, result);
  if (req.paste_back) {
    fs::create_directories(req.out / "pasted");
    for (int64_t s = 0; s < count; ++s) {
      const auto base = req.clip.mode == Mode::Reconstruction ? full[0] : full[s];
      char name[32];
      std::snprintf(name, sizeof(name), "%06lld.png", static_cast<long long>(s));
      visual::write_png(req.out / "pasted" / name, visual::paste_back(result[s], boxes[s], base));
    }
  }
  fs::copy_file(req.audio, req.out / "audio.wav", fs::copy_options::overwrite_existing);
  return count;
}

}  // namespace lipsync::infer

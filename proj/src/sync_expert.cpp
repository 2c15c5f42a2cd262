#include "lipsync/sync_expert.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lipsync::sync {
namespace {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

struct Stage {
  int in_ch, out_ch;
  std::vector<int64_t> stride;
};

// Batch statistics keep the per-sample level of a mel window, which is what
// separates speech from silence; per-sample normalisation would divide it out.
nn::Sequential conv_stack(const std::vector<Stage>& stages) {
  nn::Sequential seq;
  for (const auto& s : stages) {
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(s.in_ch, s.out_ch, 3).stride(s.stride).padding(1).bias(false)));
    seq->push_back(nn::BatchNorm2d(s.out_ch));
    seq->push_back(nn::ReLU());
  }
  seq->push_back(nn::AdaptiveAvgPool2d(1));
  return seq;
}

}  // namespace

SyncNetImpl::SyncNetImpl(SyncNetConfig cfg) : cfg_(cfg) {
  const int c = cfg_.channels;
  video_ = register_module(
      "video", conv_stack({{3 * kWindow, c, {1, 1}},
                           {c, 2 * c, {2, 2}},
                           {2 * c, 2 * c, {2, 2}},
                           {2 * c, 4 * c, {2, 2}},
                           {4 * c, 4 * c, {2, 2}}}));
  audio_ = register_module(
      "audio", conv_stack({{1, c, {1, 1}},
                           {c, 2 * c, {2, 2}},
                           {2 * c, 2 * c, {2, 2}},
                           {2 * c, 4 * c, {2, 2}},
                           {4 * c, 4 * c, {1, 2}}}));
  video_head_ = register_module("video_head", nn::Linear(4 * c, cfg_.embedding_width));
  audio_head_ = register_module("audio_head", nn::Linear(4 * c, cfg_.embedding_width));
}

torch::Tensor SyncNetImpl::embed_video(const torch::Tensor& frames) {
  if (frames.dim() != 5 || frames.size(1) != kWindow || frames.size(2) != 3) {
    std::ostringstream os;
    os << "embed_video expects [B, 5, 3, H, W], got " << frames.sizes();
    throw std::invalid_argument(os.str());
  }
  const auto h = frames.size(3);
  auto lower = frames.slice(3, h / 2, h);
  auto stacked = lower.reshape({frames.size(0), 3 * kWindow, lower.size(3), lower.size(4)});
  auto feat = video_->forward(stacked).flatten(1);
  return F::normalize(torch::relu(video_head_->forward(feat)), F::NormalizeFuncOptions().dim(1));
}

torch::Tensor SyncNetImpl::embed_audio(const torch::Tensor& mel) {
  if (mel.dim() != 3 || mel.size(1) != 16 || mel.size(2) != 80) {
    std::ostringstream os;
    os << "embed_audio expects [B, 16, 80], got " << mel.sizes();
    throw std::invalid_argument(os.str());
  }
  auto feat = audio_->forward(mel.unsqueeze(1)).flatten(1);
  return F::normalize(torch::relu(audio_head_->forward(feat)), F::NormalizeFuncOptions().dim(1));
}

torch::Tensor sync_prob(const torch::Tensor& v, const torch::Tensor& a) {
  return F::cosine_similarity(v, a, F::CosineSimilarityFuncOptions().dim(-1))
      .clamp(kProbFloor, 1.0);
}

torch::Tensor sync_loss(SyncNet& expert, const torch::Tensor& frames, const torch::Tensor& mel) {
  auto p = sync_prob(expert->embed_video(frames), expert->embed_audio(mel));
  return -torch::log(p).mean();
}

void check_contiguous(const std::vector<int64_t>& indices) {
  if (indices.size() != static_cast<size_t>(kWindow)) {
    throw std::invalid_argument("sync window needs exactly 5 frames");
  }
  for (size_t i = 1; i < indices.size(); ++i) {
    if (indices[i] != indices[i - 1] + 1) {
      throw std::invalid_argument("sync window frames must be contiguous");
    }
  }
}

PairSampler::PairSampler(const data::Corpus& corpus, std::vector<size_t> clips, uint64_t seed,
                         int min_offset)
    : corpus_(corpus), clips_(std::move(clips)), rng_(seed), min_offset_(min_offset) {
  std::erase_if(clips_, [&](size_t c) { return corpus_.clips[c].size() < kWindow; });
  if (clips_.empty()) {
    throw std::invalid_argument("PairSampler: no clip has at least 5 frames");
  }
  if (min_offset_ < 1) {
    throw std::invalid_argument("PairSampler: negative offset must be >= 1");
  }
}

SyncPair PairSampler::next(bool positive) {
  auto pick = [&](size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(rng_); };
  SyncPair p;
  p.clip = clips_[pick(clips_.size())];
  const auto last = corpus_.clips[p.clip].size() - kWindow;
  p.start = static_cast<int64_t>(pick(static_cast<size_t>(last) + 1));
  p.positive = positive;
  p.audio_clip = p.clip;
  p.audio_start = p.start;
  if (positive) {
    return p;
  }
  const bool same_clip = std::uniform_int_distribution<int>(0, 1)(rng_) == 0;
  if (same_clip) {
    std::vector<int64_t> candidates;
    for (int64_t s = 0; s <= last; ++s) {
      if (std::abs(s - p.start) >= min_offset_) {
        candidates.push_back(s);
      }
    }
    if (!candidates.empty()) {
      p.audio_start = candidates[pick(candidates.size())];
      return p;
    }
  }
  if (clips_.size() < 2) {
    throw std::runtime_error("PairSampler: cannot draw a negative from a single short clip");
  }
  do {
    p.audio_clip = clips_[pick(clips_.size())];
  } while (p.audio_clip == p.clip);
  const auto other_last = corpus_.clips[p.audio_clip].size() - kWindow;
  p.audio_start = static_cast<int64_t>(pick(static_cast<size_t>(other_last) + 1));
  return p;
}

std::vector<SyncPair> PairSampler::balanced(int count) {
  std::vector<SyncPair> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(next(i % 2 == 0));
  }
  return out;
}

PairBatch gather(const data::Corpus& corpus, const std::vector<SyncPair>& pairs) {
  std::vector<torch::Tensor> frames, mel, labels;
  for (const auto& p : pairs) {
    const auto& clip = corpus.clips[p.clip];
    frames.push_back(clip.frame_range(p.start, p.start + kWindow));
    mel.push_back(corpus.clips[p.audio_clip].windows[p.audio_start]);
    labels.push_back(torch::tensor(p.positive ? 1.0f : 0.0f));
  }
  return PairBatch{torch::stack(frames), torch::stack(mel), torch::stack(labels)};
}

double accuracy(SyncNet& expert, const data::Corpus& corpus, const std::vector<SyncPair>& pairs) {
  torch::NoGradGuard guard;
  const bool was_training = expert->is_training();
  expert->eval();
  int64_t correct = 0;
  constexpr size_t kChunk = 128;
  for (size_t i = 0; i < pairs.size(); i += kChunk) {
    std::vector<SyncPair> chunk(pairs.begin() + static_cast<std::ptrdiff_t>(i),
                                pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), i + kChunk)));
    auto batch = gather(corpus, chunk);
    auto p = sync_prob(expert->embed_video(batch.frames), expert->embed_audio(batch.mel));
    correct += ((p > 0.5).to(torch::kFloat32) == batch.labels).sum().item<int64_t>();
  }
  expert->train(was_training);
  return pairs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pairs.size());
}

ExpertReport train_expert(const data::Corpus& corpus, SyncNet& expert, const ExpertHyper& hyper,
                          const std::function<void(int, double)>& on_eval) {
  auto held_out_clips = corpus.held_out();
  if (held_out_clips.empty()) {
    throw std::invalid_argument("train_expert: corpus has no held-out clips");
  }
  PairSampler train_sampler(corpus, corpus.train, hyper.seed);
  PairSampler eval_sampler(corpus, held_out_clips, hyper.seed + 1);
  const auto eval_pairs = eval_sampler.balanced(hyper.eval_pairs);

  torch::optim::Adam opt(expert->parameters(), torch::optim::AdamOptions(hyper.lr));
  ExpertReport report;
  report.initial_accuracy = accuracy(expert, corpus, eval_pairs);
  double best = report.initial_accuracy;
  ckpt::Checkpoint best_state;
  ckpt::add_module(best_state, "expert", *expert);
  int stale = 0;
  int drops_left = hyper.lr_drops;
  double lr = hyper.lr;
  expert->train();
  for (int step = 1; step <= hyper.max_steps; ++step) {
    auto batch = gather(corpus, train_sampler.balanced(hyper.batch_size));
    auto p = sync_prob(expert->embed_video(batch.frames), expert->embed_audio(batch.mel));
    auto loss = F::binary_cross_entropy(p, batch.labels);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "train_expert: non-finite loss at step " << step << " (mean p "
         << p.mean().item<double>() << ")";
      throw std::runtime_error(os.str());
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    report.steps = step;
    if (step % hyper.eval_every == 0 || step == hyper.max_steps) {
      report.losses.emplace_back(step, value);
      const double acc = accuracy(expert, corpus, eval_pairs);
      report.history.emplace_back(step, acc);
      if (on_eval) {
        on_eval(step, acc);
      }
      if (acc > best + hyper.min_improvement) {
        best = acc;
        stale = 0;
        best_state.tensors.clear();
        ckpt::add_module(best_state, "expert", *expert);
      } else if (++stale >= hyper.patience) {
        if (drops_left == 0) {
          break;
        }
        --drops_left;
        stale = 0;
        lr *= hyper.lr_drop_factor;
        for (auto& group : opt.param_groups()) {
          static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
        }
      }
    }
  }
  ckpt::restore_module(best_state, "expert", *expert);
  expert->eval();
  report.held_out_accuracy = accuracy(expert, corpus, eval_pairs);
  return report;
}

void save_expert(const std::filesystem::path& dir, SyncNet& expert, const nlohmann::json& extra) {
  ckpt::Checkpoint c;
  c.role = kExpertRole;
  const auto& cfg = expert->config();
  c.config = {{"syncnet.image_size", cfg.image_size},
              {"syncnet.channels", cfg.channels},
              {"syncnet.embedding_width", cfg.embedding_width}};
  c.extra = extra;
  ckpt::add_module(c, "expert", *expert);
  ckpt::save(dir, c);
}

SyncNet load_expert(const std::filesystem::path& dir, nlohmann::json* extra) {
  auto c = ckpt::load(dir);
  if (c.role != kExpertRole) {
    throw std::runtime_error("checkpoint " + dir.string() + " has role '" + c.role +
                             "', expected '" + kExpertRole + "'");
  }
  SyncNetConfig cfg;
  cfg.image_size = c.config.value("syncnet.image_size", cfg.image_size);
  cfg.channels = c.config.value("syncnet.channels", cfg.channels);
  cfg.embedding_width = c.config.value("syncnet.embedding_width", cfg.embedding_width);
  SyncNet expert(cfg);
  ckpt::restore_module(c, "expert", *expert);
  for (auto& p : expert->parameters()) {
    p.set_requires_grad(false);
  }
  expert->eval();
  if (extra != nullptr) {
    *extra = c.extra;
  }
  return expert;
}

}  // namespace lipsync::sync

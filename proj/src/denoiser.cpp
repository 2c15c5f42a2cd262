#include "lipsync/denoiser.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lipsync::model {
namespace {

namespace nn = torch::nn;

int groups_for(int channels, int groups) { return std::gcd(channels, groups); }

nn::Conv2d conv3x3(int in_ch, int out_ch, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 3).stride(stride).padding(1));
}

}  // namespace

void DenoiserConfig::validate() const {
  std::ostringstream err;
  if (in_channels != 6) {
    err << "in_channels must be 6 (noisy frame ++ reference frame); ";
  }
  if (channel_mult.empty() || base_channels < 1 || embedding_width < 2 || num_res_blocks < 1) {
    err << "channel multipliers, base channels, embedding width and block count must be positive; ";
  }
  if (embedding_width % 2 != 0 || base_channels % 2 != 0) {
    err << "embedding width and base channels must be even; ";
  }
  const int factor = 1 << (levels() - 1);
  if (image_size < 1 || image_size % factor != 0) {
    err << "image size " << image_size << " not divisible by 2^(levels-1) = " << factor << "; ";
  }
  const auto msg = err.str();
  if (!msg.empty()) {
    throw std::invalid_argument("DenoiserConfig: " + msg);
  }
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim, double max_period) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(max_period) *
                          torch::arange(half, torch::TensorOptions().dtype(torch::kFloat32)) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) {
    emb = torch::cat({emb, torch::zeros({emb.size(0), 1})}, 1);
  }
  return emb;
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int emb_dim, int groups) {
  norm1_ = register_module("norm1", nn::GroupNorm(groups_for(in_ch, groups), in_ch));
  conv1_ = register_module("conv1", conv3x3(in_ch, out_ch));
  norm2_ = register_module("norm2", nn::GroupNorm(groups_for(out_ch, groups), out_ch));
  conv2_ = register_module("conv2", conv3x3(out_ch, out_ch));
  if (emb_dim > 0) {
    emb_proj_ = register_module("emb_proj", nn::Linear(emb_dim, 2 * out_ch));
  }
  if (in_ch != out_ch) {
    skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
  h = norm2_->forward(h);
  if (emb_proj_) {
    auto ss = emb_proj_->forward(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    auto parts = ss.chunk(2, 1);
    h = h * (1 + parts[0]) + parts[1];
  }
  h = conv2_->forward(torch::silu(h));
  return (skip_ ? skip_->forward(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int channels, int heads, int groups) : heads_(heads) {
  if (heads < 1 || channels % heads != 0) {
    throw std::invalid_argument("attention heads must divide the channel count");
  }
  norm_ = register_module("norm", nn::GroupNorm(groups_for(channels, groups), channels));
  qkv_ = register_module("qkv", nn::Conv1d(nn::Conv1dOptions(channels, 3 * channels, 1)));
  proj_ = register_module("proj", nn::Conv1d(nn::Conv1dOptions(channels, channels, 1)));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto flat = norm_->forward(x).reshape({b, c, h * w});
  auto qkv = qkv_->forward(flat).reshape({b * heads_, 3 * c / heads_, h * w});
  auto parts = qkv.chunk(3, 1);
  const double scale = 1.0 / std::sqrt(std::sqrt(static_cast<double>(c / heads_)));
  auto weight = torch::einsum("bct,bcs->bts", {parts[0] * scale, parts[1] * scale}).softmax(-1);
  auto out = torch::einsum("bts,bcs->bct", {weight, parts[2]}).reshape({b, c, h * w});
  return x + proj_->forward(out).reshape({b, c, h, w});
}

AudioEncoderImpl::AudioEncoderImpl(int channels, int out_dim, int groups) {
  stem_ = register_module("stem", conv3x3(1, channels));
  const std::vector<int> widths{channels, 2 * channels, 2 * channels, 4 * channels};
  int in_ch = channels;
  for (size_t i = 0; i < widths.size(); ++i) {
    blocks_.push_back(register_module("block" + std::to_string(i),
                                      ResBlock(in_ch, widths[i], 0, groups)));
    in_ch = widths[i];
    if (i + 1 < widths.size()) {
      downs_.push_back(register_module("down" + std::to_string(i), conv3x3(in_ch, in_ch, 2)));
    }
  }
  head_ = register_module("head", nn::Linear(in_ch, out_dim));
}

torch::Tensor AudioEncoderImpl::forward(const torch::Tensor& mel) {
  if (mel.dim() != 3 || mel.size(1) != 16 || mel.size(2) != 80) {
    std::ostringstream os;
    os << "audio encoder expects [B, 16, 80] mel windows, got " << mel.sizes();
    throw std::invalid_argument(os.str());
  }
  auto h = stem_->forward(mel.unsqueeze(1));
  for (size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i]->forward(h);
    if (i < downs_.size()) {
      h = downs_[i]->forward(h);
    }
  }
  return head_->forward(torch::silu(h.mean({2, 3})));
}

DenoiserImpl::DenoiserImpl(DenoiserConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int base = cfg_.base_channels;
  const int emb = cfg_.embedding_width;
  const int groups = cfg_.norm_groups;

  time_fc1_ = register_module("time_fc1", nn::Linear(base, emb));
  time_fc2_ = register_module("time_fc2", nn::Linear(emb, emb));
  audio_encoder_ = register_module("audio_encoder", AudioEncoder(cfg_.audio_channels, emb, groups));
  if (cfg_.fusion == EmbeddingFusion::Concat) {
    fuse_ = register_module("fuse", nn::Linear(2 * emb, emb));
  }
  in_conv_ = register_module("in_conv", conv3x3(cfg_.in_channels, base));

  auto wants_attention = [&](int res) {
    return std::find(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end(), res) !=
           cfg_.attention_resolutions.end();
  };

  std::vector<int> skip_channels{base};
  int ch = base;
  int res = cfg_.image_size;
  for (int level = 0; level < cfg_.levels(); ++level) {
    const int out_ch = base * cfg_.channel_mult[static_cast<size_t>(level)];
    for (int r = 0; r < cfg_.num_res_blocks; ++r) {
      Stage st;
      const auto name = "enc" + std::to_string(encoder_.size());
      st.res = register_module(name + "_res", ResBlock(ch, out_ch, emb, groups));
      ch = out_ch;
      if (wants_attention(res)) {
        st.attn = register_module(name + "_attn", AttentionBlock(ch, cfg_.attention_heads, groups));
      }
      encoder_.push_back(st);
      skip_channels.push_back(ch);
    }
    if (level + 1 < cfg_.levels()) {
      Stage st;
      st.resample = register_module("enc" + std::to_string(encoder_.size()) + "_down",
                                    conv3x3(ch, ch, 2));
      encoder_.push_back(st);
      skip_channels.push_back(ch);
      res /= 2;
    }
  }

  mid1_ = register_module("mid1", ResBlock(ch, ch, emb, groups));
  mid_attn_ = register_module("mid_attn", AttentionBlock(ch, cfg_.attention_heads, groups));
  mid2_ = register_module("mid2", ResBlock(ch, ch, emb, groups));

  for (int level = cfg_.levels() - 1; level >= 0; --level) {
    const int out_ch = base * cfg_.channel_mult[static_cast<size_t>(level)];
    for (int r = 0; r <= cfg_.num_res_blocks; ++r) {
      Stage st;
      const auto name = "dec" + std::to_string(decoder_.size());
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      st.res = register_module(name + "_res", ResBlock(ch + skip, out_ch, emb, groups));
      ch = out_ch;
      if (wants_attention(res)) {
        st.attn = register_module(name + "_attn", AttentionBlock(ch, cfg_.attention_heads, groups));
      }
      if (level > 0 && r == cfg_.num_res_blocks) {
        st.resample = register_module(name + "_up", conv3x3(ch, ch));
        res *= 2;
      }
      decoder_.push_back(st);
    }
  }

  out_norm_ = register_module("out_norm", nn::GroupNorm(groups_for(ch, groups), ch));
  out_conv_ = register_module("out_conv", conv3x3(ch, cfg_.out_channels));
}

torch::Tensor DenoiserImpl::encode_audio(const torch::Tensor& audio) {
  return audio_encoder_->forward(audio);
}

torch::Tensor DenoiserImpl::conditioning(const torch::Tensor& t, const torch::Tensor& audio_embedding) {
  auto temb = time_fc2_->forward(
      torch::silu(time_fc1_->forward(timestep_embedding(t, cfg_.base_channels).to(audio_embedding.dtype()))));
  if (cfg_.fusion == EmbeddingFusion::Concat) {
    return fuse_->forward(torch::cat({temb, audio_embedding}, 1));
  }
  return temb + audio_embedding;
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& x_ref,
                                    const torch::Tensor& audio, const torch::Tensor& t) {
  const auto n = x_t.size(0);
  if (x_t.dim() != 4 || x_t.sizes() != x_ref.sizes() || x_t.size(1) != 3 ||
      x_t.size(2) != cfg_.image_size || x_t.size(3) != cfg_.image_size || audio.size(0) != n ||
      t.dim() != 1 || t.size(0) != n) {
    std::ostringstream os;
    os << "denoise: inputs x_t " << x_t.sizes() << ", x_ref " << x_ref.sizes() << ", audio "
       << audio.sizes() << ", t " << t.sizes() << " do not match config image size "
       << cfg_.image_size;
    throw std::invalid_argument(os.str());
  }
  auto cond = conditioning(t, encode_audio(audio));
  auto h = in_conv_->forward(torch::cat({x_t, x_ref}, 1));
  std::vector<torch::Tensor> skips{h};
  for (auto& st : encoder_) {
    if (st.res) {
      h = st.res->forward(h, cond);
      if (st.attn) {
        h = st.attn->forward(h);
      }
    } else {
      h = st.resample->forward(h);
    }
    skips.push_back(h);
  }
  h = mid2_->forward(mid_attn_->forward(mid1_->forward(h, cond)), cond);
  for (auto& st : decoder_) {
    h = st.res->forward(torch::cat({h, skips.back()}, 1), cond);
    skips.pop_back();
    if (st.attn) {
      h = st.attn->forward(h);
    }
    if (st.resample) {
      h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
      h = st.resample->forward(h);
    }
  }
  return out_conv_->forward(torch::silu(out_norm_->forward(h)));
}

int64_t parameter_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) {
    n += p.numel();
  }
  return n;
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters();
  for (auto& item : dst.named_parameters()) {
    const auto* other = src_params.find(item.key());
    if (other == nullptr || other->sizes() != item.value().sizes()) {
      throw std::invalid_argument("copy_parameters: architecture mismatch at " + item.key());
    }
    item.value().copy_(*other);
  }
}

void ema_update(torch::nn::Module& shadow, const torch::nn::Module& live, double rate) {
  torch::NoGradGuard guard;
  auto live_params = live.named_parameters();
  for (auto& item : shadow.named_parameters()) {
    const auto* src = live_params.find(item.key());
    if (src == nullptr || src->sizes() != item.value().sizes()) {
      throw std::invalid_argument("ema_update: architecture mismatch at " + item.key());
    }
    if (rate == 0.0) {
      item.value().copy_(*src);
    } else {
      item.value().mul_(rate).add_(*src, 1.0 - rate);
    }
  }
}

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) {
    p.set_requires_grad(false);
  }
}

}  // namespace lipsync::model

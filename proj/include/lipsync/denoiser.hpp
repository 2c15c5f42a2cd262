#pragma once

#include <vector>

#include <torch/torch.h>

namespace lipsync::model {

enum class EmbeddingFusion { Sum, Concat };

/// Shape of the noise predictor. Every parameter and activation shape is a
/// pure function of this struct.
struct DenoiserConfig {
  int image_size = 64;
  int in_channels = 6;  // noisy frame ++ reference frame
  int out_channels = 3;
  int base_channels = 64;
  std::vector<int> channel_mult{1, 2, 3};
  int num_res_blocks = 2;
  /// Feature-map sizes (in pixels) that get a self-attention block.
  std::vector<int> attention_resolutions{32, 16};
  int attention_heads = 1;
  int embedding_width = 256;
  int norm_groups = 32;
  int audio_channels = 32;
  EmbeddingFusion fusion = EmbeddingFusion::Sum;

  int levels() const { return static_cast<int>(channel_mult.size()); }
  void validate() const;
};

/// Sinusoidal embedding with the 10000-base frequency ladder; t is [B].
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim, double max_period = 10000.0);

/// GroupNorm -> SiLU -> conv, twice, with the conditioning vector applied as a
/// per-channel scale-shift after the second normalisation.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_ch, int out_ch, int emb_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb = {});

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear emb_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int channels, int heads, int groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int heads_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv1d qkv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// Residual strided-convolution encoder from a [B, 16, 80] mel window to a
/// single embedding vector.
class AudioEncoderImpl : public torch::nn::Module {
 public:
  AudioEncoderImpl(int channels, int out_dim, int groups);
  torch::Tensor forward(const torch::Tensor& mel);

 private:
  torch::nn::Conv2d stem_{nullptr};
  std::vector<ResBlock> blocks_;
  std::vector<torch::nn::Conv2d> downs_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(AudioEncoder);

/// UNet noise predictor eps(x_t, x_ref, audio, t).
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(DenoiserConfig cfg);

  /// x_t, x_ref: [B, 3, H, W]; audio: [B, 16, 80]; t: [B] integer steps.
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& x_ref,
                        const torch::Tensor& audio, const torch::Tensor& t);

  /// [B, 16, 80] -> [B, embedding_width].
  torch::Tensor encode_audio(const torch::Tensor& audio);
  /// Time + audio conditioning vector.
  torch::Tensor conditioning(const torch::Tensor& t, const torch::Tensor& audio_embedding);

  const DenoiserConfig& config() const { return cfg_; }
  AudioEncoder audio_encoder() const { return audio_encoder_; }

 private:
  struct Stage {
    ResBlock res{nullptr};
    AttentionBlock attn{nullptr};
    torch::nn::Conv2d resample{nullptr};  // strided conv down / conv after upsampling
  };

  DenoiserConfig cfg_;
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr}, fuse_{nullptr};
  AudioEncoder audio_encoder_{nullptr};
  torch::nn::Conv2d in_conv_{nullptr}, out_conv_{nullptr};
  torch::nn::GroupNorm out_norm_{nullptr};
  std::vector<Stage> encoder_;
  ResBlock mid1_{nullptr}, mid2_{nullptr};
  AttentionBlock mid_attn_{nullptr};
  std::vector<Stage> decoder_;
};
TORCH_MODULE(Denoiser);

int64_t parameter_count(const torch::nn::Module& m);

/// Copies every parameter of `src` into `dst` (same architecture).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

/// dst = rate * dst + (1 - rate) * src, parameter-wise.
void ema_update(torch::nn::Module& shadow, const torch::nn::Module& live, double rate);

/// Disables gradients on every parameter.
void freeze(torch::nn::Module& m);

}  // namespace lipsync::model

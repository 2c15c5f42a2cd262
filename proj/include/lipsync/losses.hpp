#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace lipsync::losses {

struct LossWeights {
  double l2 = 1.0;
  double sync = 0.03;
  double lpips = 1.0;
  double gan = 0.01;

  void validate() const;
};

/// Mean squared error over masked elements only. `mask` is [H, W].
torch::Tensor masked_mse(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask);

/// Noise-prediction loss restricted to the mask.
torch::Tensor l_simple(const torch::Tensor& eps_hat, const torch::Tensor& eps,
                       const torch::Tensor& mask);
/// Clean-image loss on the one-shot x0 estimate, restricted to the mask.
torch::Tensor l2_x0(const torch::Tensor& x0_hat, const torch::Tensor& x0, const torch::Tensor& mask);

struct ExtractorConfig {
  std::vector<int> channels{16, 32, 64, 64};
  std::vector<int> used_layers{1, 2, 3};  // zero-based; layers 2-4
  uint64_t seed = 1234;
};

/// Frozen, seeded, strided convolutional feature stack.
class FeatureExtractorImpl : public torch::nn::Module {
 public:
  explicit FeatureExtractorImpl(ExtractorConfig cfg = {});
  /// Activations of the used layers.
  std::vector<torch::Tensor> forward(const torch::Tensor& x);
  /// Spatially pooled activations of the deepest layer, [B, C].
  torch::Tensor pooled(const torch::Tensor& x);
  const ExtractorConfig& config() const { return cfg_; }

 private:
  ExtractorConfig cfg_;
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(FeatureExtractor);

/// Sum over layers of the mean squared distance between channel-normalised
/// activations.
torch::Tensor l_perceptual(FeatureExtractor& phi, const torch::Tensor& x0_hat,
                           const torch::Tensor& x0);

struct DiscriminatorConfig {
  int frames = 5;
  int channels = 32;
};

/// Patch discriminator over 5 channel-stacked frames; returns a logit grid.
class SequenceDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit SequenceDiscriminatorImpl(DiscriminatorConfig cfg = {});
  /// seq: [B, 5, 3, H, W] -> [B, 1, h, w] logits.
  torch::Tensor forward(const torch::Tensor& seq);

 private:
  DiscriminatorConfig cfg_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(SequenceDiscriminator);

/// -E[log D(real)] - E[log(1 - D(fake))], averaged over patches.
torch::Tensor disc_loss_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
/// Non-saturating generator loss -E[log D(fake)].
torch::Tensor gen_adv_loss_from_logits(const torch::Tensor& fake_logits);

torch::Tensor disc_loss(SequenceDiscriminator& d, const torch::Tensor& real_seq,
                        const torch::Tensor& fake_seq);
torch::Tensor gen_adv_loss(SequenceDiscriminator& d, const torch::Tensor& fake_seq);

/// Loss terms by name: "simple", "l2", "sync", "lpips", "gan".
using LossParts = std::map<std::string, torch::Tensor>;

/// simple + l2*L2 + sync*Lsync + lpips*Llpips + gan*Lgan; absent terms count
/// as zero.
torch::Tensor total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace lipsync::losses

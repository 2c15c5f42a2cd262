#include "lipsync/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "lipsync/rng.hpp"

namespace lipsync::losses {
namespace {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void check_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw std::runtime_error(std::string(what) + ": non-finite discriminator logits");
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {l2, sync, lpips, gan}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw std::invalid_argument("loss weights must be finite and non-negative");
    }
  }
}

torch::Tensor masked_mse(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << "masked loss: shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
  if (mask.dim() != 2 || a.size(-2) != mask.size(0) || a.size(-1) != mask.size(1)) {
    throw std::invalid_argument("masked loss: mask does not match the spatial shape");
  }
  const double ones = mask.sum().item<double>();
  if (ones <= 0.0) {
    throw std::invalid_argument("masked loss: mask is empty");
  }
  const double per_mask = static_cast<double>(a.numel()) / static_cast<double>(mask.numel());
  auto sq = (a - b).pow(2) * mask.to(a.dtype());
  return sq.sum() / (ones * per_mask);
}

torch::Tensor l_simple(const torch::Tensor& eps_hat, const torch::Tensor& eps,
                       const torch::Tensor& mask) {
  return masked_mse(eps_hat, eps, mask);
}

torch::Tensor l2_x0(const torch::Tensor& x0_hat, const torch::Tensor& x0, const torch::Tensor& mask) {
  return masked_mse(x0_hat, x0, mask);
}

FeatureExtractorImpl::FeatureExtractorImpl(ExtractorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.channels.empty()) {
    throw std::invalid_argument("feature extractor needs at least one layer");
  }
  for (int layer : cfg_.used_layers) {
    if (layer < 0 || layer >= static_cast<int>(cfg_.channels.size())) {
      throw std::invalid_argument("feature extractor: used layer out of range");
    }
  }
  auto gen = make_generator(cfg_.seed);
  torch::NoGradGuard guard;
  int in_ch = 3;
  for (size_t i = 0; i < cfg_.channels.size(); ++i) {
    auto conv = nn::Conv2d(nn::Conv2dOptions(in_ch, cfg_.channels[i], 3).stride(2).padding(1));
    const double fan_in = 9.0 * in_ch;
    conv->weight.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
    conv->bias.zero_();
    convs_.push_back(register_module("conv" + std::to_string(i), conv));
    in_ch = cfg_.channels[i];
  }
  for (auto& p : parameters()) {
    p.set_requires_grad(false);
  }
}

std::vector<torch::Tensor> FeatureExtractorImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> out;
  auto h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    h = F::leaky_relu(convs_[i]->forward(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
    if (std::find(cfg_.used_layers.begin(), cfg_.used_layers.end(), static_cast<int>(i)) !=
        cfg_.used_layers.end()) {
      out.push_back(h);
    }
  }
  return out;
}

torch::Tensor FeatureExtractorImpl::pooled(const torch::Tensor& x) {
  return forward(x).back().mean({2, 3});
}

torch::Tensor l_perceptual(FeatureExtractor& phi, const torch::Tensor& x0_hat,
                           const torch::Tensor& x0) {
  auto fa = phi->forward(x0_hat);
  auto fb = phi->forward(x0);
  auto unit = [](const torch::Tensor& f) {
    return f / (f.pow(2).sum(1, true) + 1e-10).sqrt();
  };
  auto total = torch::zeros({}, x0_hat.options());
  for (size_t l = 0; l < fa.size(); ++l) {
    total = total + (unit(fa[l]) - unit(fb[l])).pow(2).mean();
  }
  return total;
}

SequenceDiscriminatorImpl::SequenceDiscriminatorImpl(DiscriminatorConfig cfg) : cfg_(cfg) {
  const int c = cfg_.channels;
  auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  net_ = register_module(
      "net", nn::Sequential(
                 nn::Conv2d(nn::Conv2dOptions(3 * cfg_.frames, c, 4).stride(2).padding(1)), lrelu(),
                 nn::Conv2d(nn::Conv2dOptions(c, 2 * c, 4).stride(2).padding(1)),
                 nn::GroupNorm(std::min(8, 2 * c), 2 * c), lrelu(),
                 nn::Conv2d(nn::Conv2dOptions(2 * c, 4 * c, 4).stride(1).padding(1)),
                 nn::GroupNorm(std::min(8, 4 * c), 4 * c), lrelu(),
                 nn::Conv2d(nn::Conv2dOptions(4 * c, 1, 4).stride(1).padding(1))));
}

torch::Tensor SequenceDiscriminatorImpl::forward(const torch::Tensor& seq) {
  if (seq.dim() != 5 || seq.size(1) != cfg_.frames || seq.size(2) != 3) {
    std::ostringstream os;
    os << "sequence discriminator expects [B, " << cfg_.frames << ", 3, H, W], got " << seq.sizes();
    throw std::invalid_argument(os.str());
  }
  return net_->forward(seq.reshape({seq.size(0), 3 * cfg_.frames, seq.size(3), seq.size(4)}));
}

torch::Tensor disc_loss_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  check_finite(real_logits, "disc_loss");
  check_finite(fake_logits, "disc_loss");
  return F::binary_cross_entropy_with_logits(real_logits, torch::ones_like(real_logits)) +
         F::binary_cross_entropy_with_logits(fake_logits, torch::zeros_like(fake_logits));
}

torch::Tensor gen_adv_loss_from_logits(const torch::Tensor& fake_logits) {
  check_finite(fake_logits, "gen_adv_loss");
  return F::binary_cross_entropy_with_logits(fake_logits, torch::ones_like(fake_logits));
}

torch::Tensor disc_loss(SequenceDiscriminator& d, const torch::Tensor& real_seq,
                        const torch::Tensor& fake_seq) {
  return disc_loss_from_logits(d->forward(real_seq), d->forward(fake_seq));
}

torch::Tensor gen_adv_loss(SequenceDiscriminator& d, const torch::Tensor& fake_seq) {
  return gen_adv_loss_from_logits(d->forward(fake_seq));
}

torch::Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  w.validate();
  const auto simple = parts.find("simple");
  if (simple == parts.end()) {
    throw std::invalid_argument("total_loss: the simple term is required");
  }
  for (const auto& [name, value] : parts) {
    if (!torch::isfinite(value).all().item<bool>()) {
      throw std::runtime_error("total_loss: term " + name + " is not finite");
    }
  }
  auto total = simple->second;
  const std::pair<const char*, double> weighted[] = {
      {"l2", w.l2}, {"sync", w.sync}, {"lpips", w.lpips}, {"gan", w.gan}};
  for (const auto& [name, weight] : weighted) {
    const auto it = parts.find(name);
    if (it != parts.end() && weight != 0.0) {
      total = total + weight * it->second;
    }
  }
  return total;
}

}  // namespace lipsync::losses

#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "lipsync/diffusion.hpp"

namespace lipsync::visual {

// Frames are float tensors [3, H, W] (or batched [B, 3, H, W]) with pixel
// values in [-1, 1]. Masks are float tensors [H, W] holding 0/1, 1 marking
// the region to generate; they broadcast over channel and batch dimensions.

struct Box {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  friend bool operator==(const Box&, const Box&) = default;
};

/// Rows floor(h/2)..h-1 set to 1.
torch::Tensor lower_half_mask(int height, int width);

/// v outside the mask, eta inside.
torch::Tensor noise_mask(const torch::Tensor& frame, const torch::Tensor& mask,
                         const torch::Tensor& eta);

/// Clean frame outside the mask, forward-noised to step t inside.
torch::Tensor forward_mask_noise(const torch::Tensor& frame, const torch::Tensor& mask,
                                 diffusion::StepIndex t, const torch::Tensor& eps,
                                 const diffusion::NoiseSchedule& sched);
/// Per-sample steps `t` ([B], integer) for batched frames.
torch::Tensor forward_mask_noise(const torch::Tensor& frames, const torch::Tensor& mask,
                                 const torch::Tensor& t, const torch::Tensor& eps,
                                 const diffusion::NoiseSchedule& sched);

/// orig outside the mask, gen inside. The unmasked region is copied bit-exact.
torch::Tensor composite(const torch::Tensor& gen, const torch::Tensor& orig,
                        const torch::Tensor& mask);

/// Bilinear crop of `box` from `image` ([3, H, W]) resized to size x size.
torch::Tensor crop_resize(const torch::Tensor& image, const Box& box, int size = 128);
/// Resizes `crop` back to the box size and writes it into a copy of `image`.
torch::Tensor paste_back(const torch::Tensor& crop, const Box& box, const torch::Tensor& image);

/// [-1, 1] float <-> 8-bit RGB PNG.
torch::Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const torch::Tensor& frame);

/// uint8 [3, H, W] <-> float [-1, 1].
torch::Tensor to_unit_range(const torch::Tensor& bytes);
torch::Tensor to_bytes(const torch::Tensor& frame);

}  // namespace lipsync::visual

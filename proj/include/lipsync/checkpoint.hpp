#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace lipsync::ckpt {

/// A checkpoint directory: `manifest.json` (role, config, step, tensor index)
/// plus one raw little-endian float32 blob per tensor under `tensors/`.
struct Checkpoint {
  std::string role;
  int64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor* find(const std::string& name) const;
};

void save(const std::filesystem::path& dir, const Checkpoint& ckpt);
/// Verifies sizes and checksums; errors name the offending tensor.
Checkpoint load(const std::filesystem::path& dir);

/// Appends every parameter and floating-point buffer of `m` under `prefix/`.
void add_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& m);
/// Copies `prefix/` tensors into `m`; refuses on missing names or shape mismatch.
void restore_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& m);

/// Adam moments stored as `prefix/<param>/exp_avg` and `.../exp_avg_sq`.
void add_adam_state(Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt,
                    const torch::nn::Module& m);
void restore_adam_state(const Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt,
                        torch::nn::Module& m);

/// Byte-level hash of parameters and buffers, used to confirm frozen weights.
std::string fingerprint(const torch::nn::Module& m);

}  // namespace lipsync::ckpt

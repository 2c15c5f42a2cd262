#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace lipsync {

/// splitmix64 finalizer; derives independent stream seeds from (base, index).
constexpr uint64_t derive_seed(uint64_t base, uint64_t index) {
  uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// A CPU torch generator seeded deterministically.
inline torch::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace lipsync

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>

#include <torch/torch.h>

#include "json.hpp"

namespace lipsync::testing {

inline nlohmann::json fixture(const std::string& name) {
  std::ifstream in(std::filesystem::path(LIPSYNC_FIXTURE_DIR) / name);
  if (!in) {
    throw std::runtime_error("missing fixture " + name);
  }
  return nlohmann::json::parse(in);
}

inline torch::Tensor to_tensor(const nlohmann::json& nested, torch::Dtype dtype = torch::kFloat64) {
  std::vector<int64_t> shape;
  const nlohmann::json* cur = &nested;
  while (cur->is_array()) {
    shape.push_back(static_cast<int64_t>(cur->size()));
    if (cur->empty()) {
      break;
    }
    cur = &(*cur)[0];
  }
  std::vector<double> flat;
  std::function<void(const nlohmann::json&)> walk = [&](const nlohmann::json& j) {
    if (j.is_array()) {
      for (const auto& e : j) {
        walk(e);
      }
    } else {
      flat.push_back(j.get<double>());
    }
  };
  walk(nested);
  return torch::tensor(flat, torch::kFloat64).view(shape).to(dtype);
}

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() /
            ("lipsync_" + tag + "_" + std::to_string(rng() % 1000000000ULL));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Largest deviation between the autograd gradient of `f` at `x` and central
/// differences, relative to the largest finite-difference component.
inline double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                             const torch::Tensor& x, double h = 1e-6) {
  auto input = x.detach().clone().to(torch::kFloat64).requires_grad_(true);
  auto analytic = torch::autograd::grad({f(input)}, {input})[0].detach();
  auto numeric = torch::zeros_like(analytic);
  auto base = x.detach().clone().to(torch::kFloat64);
  auto flat = base.view(-1);
  auto out = numeric.view(-1);
  torch::NoGradGuard guard;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double keep = flat[i].item<double>();
    flat[i] = keep + h;
    const double up = f(base).item<double>();
    flat[i] = keep - h;
    const double down = f(base).item<double>();
    flat[i] = keep;
    out[i] = (up - down) / (2.0 * h);
  }
  const double scale = std::max(numeric.abs().max().item<double>(), 1e-12);
  return (analytic - numeric).abs().max().item<double>() / scale;
}

}  // namespace lipsync::testing

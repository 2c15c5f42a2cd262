#include "lipsync/diffusion.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lipsync::diffusion {
namespace {

constexpr double kMinSignal = 1e-12;

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
}

void check_alpha_bar(AlphaBar ab, const char* what) {
  if (!(ab.value >= 0.0 && ab.value <= 1.0)) {
    throw std::invalid_argument(std::string(what) + ": alpha_bar outside [0, 1]");
  }
}

// Reshapes a per-sample coefficient vector [B] to broadcast against x [B, ...].
torch::Tensor per_sample(const torch::Tensor& coef, const torch::Tensor& x) {
  if (coef.dim() == 0) {
    return coef.to(x.scalar_type());
  }
  if (coef.dim() != 1 || coef.size(0) != x.size(0)) {
    throw std::invalid_argument("per-sample coefficient must have one entry per batch item");
  }
  std::vector<int64_t> shape(static_cast<size_t>(x.dim()), 1);
  shape[0] = coef.size(0);
  return coef.to(x.scalar_type()).view(shape);
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) {
    throw std::invalid_argument("make_schedule: step count must be >= 1");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> beta(static_cast<size_t>(steps));
  std::vector<double> alpha_bar(static_cast<size_t>(steps));
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    beta[i] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - beta[i];
    alpha_bar[i] = prod;
  }
  return NoiseSchedule(std::move(beta), std::move(alpha_bar));
}

void NoiseSchedule::check(StepIndex t) const {
  if (t.value < 0 || t.value > steps()) {
    std::ostringstream os;
    os << "step index " << t.value << " outside [0, " << steps() << "]";
    throw std::out_of_range(os.str());
  }
}

double NoiseSchedule::beta(StepIndex t) const {
  if (t.value < 1) {
    throw std::out_of_range("beta is defined for steps >= 1");
  }
  check(t);
  return beta_[static_cast<size_t>(t.value - 1)];
}

AlphaBar NoiseSchedule::alpha_bar(StepIndex t) const {
  check(t);
  return t.value == 0 ? AlphaBar{1.0} : AlphaBar{alpha_bar_[static_cast<size_t>(t.value - 1)]};
}

torch::Tensor NoiseSchedule::alpha_bar(const torch::Tensor& steps) const {
  auto idx = steps.to(torch::kLong).contiguous();
  if (idx.numel() > 0 && (idx.min().item<int64_t>() < 0 || idx.max().item<int64_t>() > this->steps())) {
    throw std::out_of_range("step index tensor outside [0, T]");
  }
  std::vector<double> table(alpha_bar_.size() + 1);
  table[0] = 1.0;
  std::copy(alpha_bar_.begin(), alpha_bar_.end(), table.begin() + 1);
  auto lut = torch::tensor(table, torch::kFloat64);
  return lut.index_select(0, idx.flatten()).view(idx.sizes());
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  return NoiseSchedule::linear(steps, beta_start, beta_end);
}

torch::Tensor forward_sample(const torch::Tensor& x0, AlphaBar ab, const torch::Tensor& eps) {
  check_same_shape(x0, eps, "forward_sample");
  check_alpha_bar(ab, "forward_sample");
  return std::sqrt(ab.value) * x0 + std::sqrt(1.0 - ab.value) * eps;
}

torch::Tensor forward_sample(const torch::Tensor& x0, const torch::Tensor& alpha_bar,
                             const torch::Tensor& eps) {
  check_same_shape(x0, eps, "forward_sample");
  auto ab = alpha_bar.to(torch::kFloat64);
  return per_sample(ab.sqrt(), x0) * x0 + per_sample((1.0 - ab).sqrt(), x0) * eps;
}

torch::Tensor forward_sample(const torch::Tensor& x0, StepIndex t, const torch::Tensor& eps,
                             const NoiseSchedule& sched) {
  return forward_sample(x0, sched.alpha_bar(t), eps);
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, AlphaBar ab) {
  check_same_shape(x_t, eps_hat, "predict_x0");
  check_alpha_bar(ab, "predict_x0");
  if (ab.value < kMinSignal) {
    throw std::domain_error("predict_x0: alpha_bar is numerically zero");
  }
  return (x_t - std::sqrt(1.0 - ab.value) * eps_hat) / std::sqrt(ab.value);
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat,
                         const torch::Tensor& alpha_bar) {
  check_same_shape(x_t, eps_hat, "predict_x0");
  auto ab = alpha_bar.to(torch::kFloat64);
  if (ab.numel() > 0 && ab.min().item<double>() < kMinSignal) {
    throw std::domain_error("predict_x0: alpha_bar is numerically zero");
  }
  return (x_t - per_sample((1.0 - ab).sqrt(), x_t) * eps_hat) / per_sample(ab.sqrt(), x_t);
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, StepIndex t,
                         const NoiseSchedule& sched) {
  return predict_x0(x_t, eps_hat, sched.alpha_bar(t));
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, AlphaBar ab_t,
                        AlphaBar ab_prev) {
  check_same_shape(x_t, eps_hat, "ddim_step");
  check_alpha_bar(ab_t, "ddim_step");
  check_alpha_bar(ab_prev, "ddim_step");
  if (ab_t.value < kMinSignal) {
    throw std::domain_error("ddim_step: alpha_bar is numerically zero");
  }
  if (ab_prev.value < ab_t.value) {
    throw std::invalid_argument("ddim_step: target level is noisier than the source");
  }
  const double scale = std::sqrt(ab_prev.value / ab_t.value);
  const double eps_coef = std::sqrt(1.0 - ab_prev.value) -
                          std::sqrt(ab_prev.value * (1.0 - ab_t.value) / ab_t.value);
  return scale * x_t + eps_coef * eps_hat;
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, StepIndex t,
                        StepIndex t_prev, const NoiseSchedule& sched) {
  if (t_prev.value > t.value) {
    throw std::invalid_argument("ddim_step: t_prev must not exceed t");
  }
  if (t_prev.value == t.value) {
    check_same_shape(x_t, eps_hat, "ddim_step");
    sched.check(t);
    return x_t;
  }
  return ddim_step(x_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

torch::Tensor ddim_general_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat,
                                AlphaBar ab_t, AlphaBar ab_prev, double sigma,
                                const torch::Tensor& xi) {
  check_same_shape(x_t, xi, "ddim_general_step");
  if (!(sigma >= 0.0)) {
    throw std::invalid_argument("ddim_general_step: sigma must be >= 0");
  }
  const double residual = 1.0 - ab_prev.value - sigma * sigma;
  if (residual < 0.0) {
    throw std::invalid_argument("ddim_general_step: sigma^2 exceeds 1 - alpha_bar_prev");
  }
  auto x0_hat = predict_x0(x_t, eps_hat, ab_t);
  return std::sqrt(ab_prev.value) * x0_hat + std::sqrt(residual) * eps_hat + sigma * xi;
}

torch::Tensor ddim_general_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat,
                                StepIndex t, StepIndex t_prev, double sigma,
                                const torch::Tensor& xi, const NoiseSchedule& sched) {
  if (t_prev.value >= t.value) {
    throw std::invalid_argument("ddim_general_step: t_prev must be < t");
  }
  return ddim_general_step(x_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev), sigma, xi);
}

double ddpm_sigma(AlphaBar ab_t, AlphaBar ab_prev) {
  check_alpha_bar(ab_t, "ddpm_sigma");
  check_alpha_bar(ab_prev, "ddpm_sigma");
  if (ab_t.value >= 1.0 || ab_prev.value <= 0.0) {
    throw std::domain_error("ddpm_sigma: degenerate levels");
  }
  const double ratio = std::max(0.0, 1.0 - ab_t.value / ab_prev.value);
  return std::sqrt((1.0 - ab_prev.value) / (1.0 - ab_t.value)) * std::sqrt(ratio);
}

double ddpm_sigma(StepIndex t, StepIndex t_prev, const NoiseSchedule& sched) {
  if (t_prev.value >= t.value) {
    throw std::invalid_argument("ddpm_sigma: t_prev must be < t");
  }
  return ddpm_sigma(sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

std::vector<StepIndex> strided_timesteps(int steps, int n) {
  if (steps < 1 || n < 1) {
    throw std::invalid_argument("strided_timesteps: need T >= 1 and n >= 1");
  }
  if (n > steps) {
    throw std::invalid_argument("strided_timesteps: more sampling steps than diffusion steps");
  }
  const int stride = steps / n;
  std::vector<StepIndex> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(StepIndex{steps - i * stride});
  }
  return out;
}

}  // namespace lipsync::diffusion

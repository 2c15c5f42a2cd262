#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

namespace lipsync::diffusion {

/// Diffusion step index. 0 is clean data, T is full noise.
struct StepIndex {
  int value = 0;
};

/// A cumulative signal level, i.e. alpha-bar at some step.
struct AlphaBar {
  double value = 1.0;
};

/// Linear-beta noise schedule with cumulative products.
///
/// alpha_bar(0) is defined as 1 so that step 0 denotes clean data; the noising
/// steps are 1-based.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

  /// Step t in [1, T].
  double beta(StepIndex t) const;
  /// Step t in [0, T].
  AlphaBar alpha_bar(StepIndex t) const;

  std::span<const double> betas() const { return beta_; }
  /// alpha-bar for steps 1..T (index i holds step i+1).
  std::span<const double> alpha_bars() const { return alpha_bar_; }

  /// Gathers alpha-bar for a batch of integer steps, returning a float64 tensor
  /// of the same shape.
  torch::Tensor alpha_bar(const torch::Tensor& steps) const;

  void check(StepIndex t) const;

 private:
  NoiseSchedule(std::vector<double> beta, std::vector<double> alpha_bar)
      : beta_(std::move(beta)), alpha_bar_(std::move(alpha_bar)) {}

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

NoiseSchedule make_schedule(int steps, double beta_start = 1e-4, double beta_end = 0.02);

// The tensor overloads taking `alpha_bar` as a tensor broadcast it over the
// leading (batch) dimension of the data, one value per sample.

torch::Tensor forward_sample(const torch::Tensor& x0, AlphaBar ab, const torch::Tensor& eps);
torch::Tensor forward_sample(const torch::Tensor& x0, const torch::Tensor& alpha_bar,
                             const torch::Tensor& eps);
torch::Tensor forward_sample(const torch::Tensor& x0, StepIndex t, const torch::Tensor& eps,
                             const NoiseSchedule& sched);

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, AlphaBar ab);
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat,
                         const torch::Tensor& alpha_bar);
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, StepIndex t,
                         const NoiseSchedule& sched);

/// Deterministic DDIM update from level `ab_t` to `ab_prev` (ab_prev >= ab_t).
torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, AlphaBar ab_t,
                        AlphaBar ab_prev);
/// Requires t_prev <= t; t_prev == t is the identity.
torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, StepIndex t,
                        StepIndex t_prev, const NoiseSchedule& sched);

/// DDIM update with an explicit posterior standard deviation `sigma` and a
/// caller-drawn standard normal `xi`.
torch::Tensor ddim_general_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat,
                                AlphaBar ab_t, AlphaBar ab_prev, double sigma,
                                const torch::Tensor& xi);
torch::Tensor ddim_general_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat,
                                StepIndex t, StepIndex t_prev, double sigma,
                                const torch::Tensor& xi, const NoiseSchedule& sched);

/// The sigma at which the general DDIM update coincides with ancestral DDPM.
double ddpm_sigma(AlphaBar ab_t, AlphaBar ab_prev);
double ddpm_sigma(StepIndex t, StepIndex t_prev, const NoiseSchedule& sched);

/// `n` descending steps with uniform stride floor(T/n), starting at T.
std::vector<StepIndex> strided_timesteps(int steps, int n);

}  // namespace lipsync::diffusion

#pragma once

// Shared noise schedule, forward diffusion, ancestral sampling step and the
// per-branch training objective.

#include <vector>

#include "mted/tensor.hpp"

namespace mted {

class NoiseSchedule {
 public:
  // Linear betas from beta_start to beta_end over T steps.
  static NoiseSchedule linear(int T = 200, double beta_start = 1e-4, double beta_end = 2e-2);
  // Explicit betas for steps 1..T. Zero betas are accepted only when
  // allow_degenerate is set (used to build identity schedules for tests).
  static NoiseSchedule from_betas(const std::vector<double>& betas, bool allow_degenerate = false);

  // Schedule over an increasing subsequence of this schedule's steps; step k
  // of the result jumps from timesteps[k-2] (or 0) to timesteps[k-1].
  NoiseSchedule respaced(const std::vector<int>& timesteps) const;
  // Evenly spaced subsequence of `count` steps ending at steps().
  std::vector<int> spaced_steps(int count) const;

  int steps() const { return static_cast<int>(beta_.size()); }
  // 1-based step index, matching the usual notation. alpha_bar(0) = 1.
  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;
  // Posterior standard deviation of the ancestral step.
  double sigma(int t) const;
  const std::vector<double>& betas() const { return beta_; }
  bool operator==(const NoiseSchedule&) const = default;

 private:
  void check_step(int t, const char* op) const;
  std::vector<double> beta_, alpha_, alpha_bar_;
};

// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
// x_{t-1} from x_t and the predicted noise; noise must be zeros (or undefined) at t = 1.
Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                 const Tensor& noise);
// Closed-form estimate of x0 from x_t and the predicted noise.
Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched);

// Mean squared error between the injected and predicted noise.
Tensor recon_loss(const Tensor& eps_true, const Tensor& eps_pred);

// Multi-stage feature extractor used by the perceptual part of the
// refinement loss.
class FeatureStages {
 public:
  virtual ~FeatureStages() = default;
  virtual int stage_count() const = 0;
  virtual std::vector<Tensor> features(const Tensor& x) const = 0;
};

inline constexpr int kPerceptualStages = 5;

// Pixel MSE plus the sum over stages of mean absolute feature differences.
Tensor refine_loss(const Tensor& c_hat, const Tensor& c_gt, const FeatureStages& extractor);
Tensor pixel_term(const Tensor& c_hat, const Tensor& c_gt);
Tensor perceptual_term(const Tensor& c_hat, const Tensor& c_gt, const FeatureStages& extractor);

inline constexpr double kLambdaRefine = 0.01;
Tensor branch_total(const Tensor& recon, const Tensor& refine, double lambda_refine = kLambdaRefine);

}  // namespace mted

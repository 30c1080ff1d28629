#include "mted/diffusion.hpp"

#include <cmath>
#include <string>

#include "mted/error.hpp"

namespace mted {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("noise schedule: T must be >= 1");
  std::vector<double> b(static_cast<size_t>(T));
  for (int i = 0; i < T; ++i) {
    b[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
  }
  return from_betas(b);
}

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas, bool allow_degenerate) {
  if (betas.empty()) throw ConfigError("noise schedule: no steps");
  NoiseSchedule s;
  double prev = 0, bar = 1;
  for (double b : betas) {
    const bool ok = allow_degenerate ? (b >= 0 && b < 1) : (b > 0 && b < 1);
    if (!ok) throw ConfigError("noise schedule: beta must lie in (0, 1), got " + std::to_string(b));
    if (b < prev) throw ConfigError("noise schedule: betas must be nondecreasing");
    prev = b;
    bar *= 1 - b;
    s.beta_.push_back(b);
    s.alpha_.push_back(1 - b);
    s.alpha_bar_.push_back(bar);
  }
  return s;
}

NoiseSchedule NoiseSchedule::respaced(const std::vector<int>& timesteps) const {
  if (timesteps.empty()) throw ConfigError("respaced schedule: no steps");
  NoiseSchedule s;
  int prev = 0;
  for (int t : timesteps) {
    if (t <= prev || t > steps()) throw ConfigError("respaced schedule: steps must increase within [1, T]");
    const double bar = alpha_bar(t);
    const double a = bar / alpha_bar(prev);
    s.beta_.push_back(1 - a);
    s.alpha_.push_back(a);
    s.alpha_bar_.push_back(bar);
    prev = t;
  }
  return s;
}

std::vector<int> NoiseSchedule::spaced_steps(int count) const {
  const int T = steps();
  if (count < 1 || count > T) throw ConfigError("step count must be in [1, " + std::to_string(T) + "]");
  std::vector<int> out;
  for (int k = 1; k <= count; ++k) {
    out.push_back(static_cast<int>((static_cast<int64_t>(k) * T + count - 1) / count));
  }
  return out;
}

void NoiseSchedule::check_step(int t, const char* op) const {
  if (t < 1 || t > steps()) {
    throw DomainError(std::string(op) + ": step " + std::to_string(t) + " outside [1, " +
                      std::to_string(steps()) + "]");
  }
}

double NoiseSchedule::beta(int t) const {
  check_step(t, "beta");
  return beta_[t - 1];
}

double NoiseSchedule::alpha(int t) const {
  check_step(t, "alpha");
  return alpha_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check_step(t, "alpha_bar");
  return alpha_bar_[t - 1];
}

double NoiseSchedule::sigma(int t) const {
  check_step(t, "sigma");
  const double denom = 1 - alpha_bar(t);
  if (denom == 0) return 0;
  return std::sqrt(beta(t) * (1 - alpha_bar(t - 1)) / denom);
}

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

}  // namespace

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  same_shape(x0, eps, "q_sample");
  if (t < 1 || t > sched.steps()) {
    throw DomainError("q_sample: step " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps()) + "]");
  }
  const double ab = sched.alpha_bar(t);
  return x0 * std::sqrt(ab) + eps * std::sqrt(1 - ab);
}

Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                 const Tensor& noise) {
  same_shape(x_t, eps_hat, "ddpm_step");
  const double b = sched.beta(t), ab = sched.alpha_bar(t);
  const double coef = b == 0 ? 0.0 : b / std::sqrt(1 - ab);
  Tensor mean = (x_t - eps_hat * coef) * (1.0 / std::sqrt(sched.alpha(t)));
  if (!noise.defined()) return mean;
  same_shape(x_t, noise, "ddpm_step");
  const double sigma = sched.sigma(t);
  if (sigma == 0) return mean;
  return mean + noise * sigma;
}

Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
  same_shape(x_t, eps_hat, "predict_x0");
  const double ab = sched.alpha_bar(t);
  return (x_t - eps_hat * std::sqrt(1 - ab)) * (1.0 / std::sqrt(ab));
}

Tensor recon_loss(const Tensor& eps_true, const Tensor& eps_pred) {
  same_shape(eps_true, eps_pred, "recon_loss");
  return mean(square(eps_pred - eps_true));
}

Tensor pixel_term(const Tensor& c_hat, const Tensor& c_gt) {
  same_shape(c_hat, c_gt, "refine_loss");
  return mean(square(c_hat - c_gt));
}

Tensor perceptual_term(const Tensor& c_hat, const Tensor& c_gt, const FeatureStages& extractor) {
  same_shape(c_hat, c_gt, "refine_loss");
  if (extractor.stage_count() != kPerceptualStages) {
    throw ConfigError("refine_loss: feature extractor must expose " + std::to_string(kPerceptualStages) +
                      " stages, has " + std::to_string(extractor.stage_count()));
  }
  const std::vector<Tensor> fa = extractor.features(c_hat);
  const std::vector<Tensor> fb = extractor.features(c_gt);
  Tensor total;
  for (size_t m = 0; m < fa.size(); ++m) {
    Tensor term = mean(abs(fa[m] - fb[m]));
    total = total.defined() ? total + term : term;
  }
  return total;
}

Tensor refine_loss(const Tensor& c_hat, const Tensor& c_gt, const FeatureStages& extractor) {
  Tensor perceptual = perceptual_term(c_hat, c_gt, extractor);
  return pixel_term(c_hat, c_gt) + perceptual;
}

Tensor branch_total(const Tensor& recon, const Tensor& refine, double lambda_refine) {
  if (!(lambda_refine >= 0)) {
    throw ConfigError("branch_total: lambda_refine must be non-negative, got " + std::to_string(lambda_refine));
  }
  if (!std::isfinite(recon.item()) || !std::isfinite(refine.item())) {
    throw NumericError("branch_total: non-finite loss term");
  }
  return recon + refine * lambda_refine;
}

}  // namespace mted

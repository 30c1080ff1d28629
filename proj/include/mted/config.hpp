#pragma once

// Run configuration: every tunable of synthesis, models, schedule and
// training in one JSON document. Unknown keys are rejected; overrides use
// dotted paths ("training.stages.4.epochs=2").

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mted/networks.hpp"
#include "mted/scene.hpp"

namespace mted {

struct StageSettings {
  int epochs = 1;
  int batch_size = 1;
  double lr = 1e-4;  // before lr_scale
};

// Per-stage learning rate, epochs and batch size from the reference schedule.
inline constexpr std::array<StageSettings, 5> kReferenceStages = {{
    {40, 2, 4.5e-5},
    {100, 2, 4.0e-5},
    {40, 2, 1.0e-5},
    {160, 2, 1.0e-5},
    {60, 1, 2.0e-5},
}};

struct RunConfig {
  uint64_t seed = 1;
  SynthConfig synth;

  VaeSpec image_vae;
  VaeSpec range_vae;
  DenoiserSpec denoiser;

  int diffusion_steps = 200;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  std::array<StageSettings, 5> stages = kReferenceStages;
  // Toy-scale multiplier on every stage learning rate (ratios are kept).
  double lr_scale = 20.0;
  double epoch_scale = 1.0;
  // Extra per-stage epoch multiplier on top of epoch_scale. The range VAE
  // needs far more passes than the rest to resolve object edges, and the
  // range denoiser a few more.
  std::array<double, 5> stage_epoch_scale = {48, 3, 1, 1, 1};
  double clip_norm = 1.0;
  double augment_prob = 0.2;
  double lambda_refine = 0.01;
  int image_vae_epochs = 40;
  double image_vae_lr = 4.5e-5;

  int median_k = 3;
  int sample_steps = 0;  // 0 = full schedule

  RunConfig();

  const StageSettings& stage(int id) const;
  int epochs(int stage_id) const;
  double learning_rate(int stage_id) const;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys take defaults; unknown keys throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  // FNV-1a of the canonical JSON dump.
  uint64_t hash() const;
};

// Applies "dotted.path=value" overrides to a user JSON document. Values are
// parsed as JSON when possible, otherwise taken as strings.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

}  // namespace mted

#pragma once

// Five-stage training: model bundle, Adam, augmentation, checkpoints and the
// stage runner.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mted/config.hpp"
#include "mted/diffusion.hpp"
#include "mted/networks.hpp"
#include "mted/rng.hpp"
#include "mted/scene.hpp"

namespace mted {

// Every network of the framework; deterministic given the config seed.
struct Models {
  Vae image_vae, range_vae;
  Discriminator range_disc;
  Denoiser image_net, range_net;
  FeatureExtractor image_features, range_features;

  explicit Models(const RunConfig& cfg);
  // Names are prefixed by component ("image_net.block1a.w", ...).
  ParamList all() const;
  // Copy sharing every tensor except the two gates, which are zeroed.
  Models with_gates_off() const;
};

NoiseSchedule make_schedule(const RunConfig& cfg);

// ---- optimizer ------------------------------------------------------------------

class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  Adam() = default;
  Adam(ParamList params, double lr, double clip_norm);
  // Clips the global gradient norm, updates, clears gradients. Returns the
  // norm before clipping.
  double step();
  void zero_grad();
  int64_t steps_taken() const { return t_; }
  const ParamList& params() const { return params_; }
  // Moments are exported as "<prefix>m.<name>" / "<prefix>v.<name>".
  void export_state(ParamList& out, const std::string& prefix) const;
  void import_state(const ParamList& in, const std::string& prefix, int64_t steps);

 private:
  ParamList params_;
  std::vector<Tensor> m_, v_;
  double lr_ = 0, clip_ = 0;
  int64_t t_ = 0;
};

// ---- augmentation -----------------------------------------------------------------

Image adjust_brightness_contrast(const Image& img, double brightness, double contrast);
// Rotation about the image center, bilinear, zero fill.
Image rotate_image(const Image& img, double degrees);
Image box_blur3(const Image& img);

enum class AugmentBranch { kImage, kRange };

// Each transform fires independently with probability p; the range branch
// only rotates.
Image augment(const Image& object_rgb, Rng& rng, AugmentBranch branch = AugmentBranch::kImage, double p = 0.2);

// ---- checkpoints ---------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  int stage = 0;
  int epochs_done = 0;
  int epochs_total = 0;
  int64_t step = 0;
  uint64_t config_hash = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::string rng_state;
  ParamList tensors;

  bool complete() const { return epochs_total > 0 && epochs_done >= epochs_total; }
  const Tensor* find(const std::string& name) const;
};

// Little-endian; written to a temporary file and renamed into place.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
// Throws IoError when unreadable, FormatError on bad magic, version,
// checksum or structure.
Checkpoint load_checkpoint(const std::string& path);
// Copies checkpoint tensors into params by name (FormatError if missing or
// mismatched).
void restore(const ParamList& params, const Checkpoint& ck);
std::string checkpoint_path(const std::string& dir, int stage);

// ---- stages ---------------------------------------------------------------------------

enum class DataVariant { kShadowed, kShadowFree };

struct StagePlan {
  int stage = 1;
  int epochs = 1;
  int batch_size = 1;
  double lr = 0;
  DataVariant variant = DataVariant::kShadowed;
  bool recon = true;
  bool refine = true;
  std::vector<std::string> trainable;  // name prefixes
  std::vector<std::string> excluded;   // prefixes carved out of trainable
  std::vector<int> prerequisites;

  static StagePlan for_stage(int stage, const RunConfig& cfg);
  bool trains(const std::string& name) const;
};

struct EpochLoss {
  double recon = 0, refine = 0, kl = 0, adv = 0;
};

struct StageReport {
  std::string checkpoint;
  std::vector<EpochLoss> epochs;  // epochs run in this call
  int64_t steps = 0;
  bool resumed = false;
};

struct StageOptions {
  bool resume = true;
  // Stop after this many epochs in total (checkpoint left incomplete); 0 = all.
  int stop_after = 0;
  std::function<void(const std::string&)> log;
};

// Trains one stage on the train split of the corpus. Writes
// <out>/stage<k>.ckpt at every epoch boundary and <out>/stage<k>_loss.csv.
StageReport run_stage(int stage, const RunConfig& cfg, const std::vector<Sample>& train, const std::string& out_dir,
                      const StageOptions& options = {});

// Loads a stage checkpoint into a fresh model bundle.
Models load_models(const RunConfig& cfg, const std::string& path, Checkpoint* out = nullptr);

// Cached per-sample tensors for denoiser training; VAEs are frozen by then.
struct BranchData {
  Tensor z_gt, z_pasted, h_p, target;
};
struct PreparedSample {
  std::string id;
  Image crop;  // object crop, unaugmented
  BranchData image, range;
  CrossMaps maps;
};
PreparedSample prepare_sample(const Sample& s, const Models& m, const RunConfig& cfg, DataVariant variant,
                              bool need_image = true, bool need_range = true);

}  // namespace mted

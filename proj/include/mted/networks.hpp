#pragma once

// Learned components: VAEs, patch discriminator, frozen surrogate encoders,
// the depth-guided deformable cross-modality module and the two conditional
// U-Net denoisers.

#include <string>
#include <vector>

#include "mted/diffusion.hpp"
#include "mted/geometry.hpp"
#include "mted/tensor.hpp"

namespace mted {

class Rng;

// trainable = false marks buffers and frozen weights; they are checkpointed
// but never handed to an optimizer.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;
  ParamList parameters(const std::string& prefix = "") const;
};

struct Conv : Module {
  Tensor w, b;
  int stride = 1;
  bool frozen = false;
  Conv() = default;
  Conv(int in, int out, int k, int stride, Rng& rng, DType dtype, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const override;
};

struct Dense : Module {
  Tensor w, b;
  Dense() = default;
  Dense(int in, int out, Rng& rng, DType dtype, double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  void collect(ParamList& out, const std::string& prefix) const override;
};

// Enables gradient tracking on every trainable entry, disables it elsewhere.
void enable_grads(const ParamList& params, bool on);
// FNV-1a over names, shapes and raw values.
uint64_t params_checksum(const ParamList& params);

// ---- VAE ----------------------------------------------------------------------

inline constexpr int kLatentDownsample = 4;

struct VaeSpec {
  int in_channels = 3;
  int latent_channels = 4;
  int width1 = 16;
  int width2 = 32;
  double kl_weight = 1e-4;
  // Range VAE only.
  bool adversarial = false;
  double adv_weight = 0.5;
  int adv_warmup = 1000;
};

struct Encoded {
  Tensor mu, logvar;
};

class Vae : public Module {
 public:
  Vae() = default;
  Vae(const VaeSpec& spec, Rng& rng, DType dtype = DType::kF32);

  const VaeSpec& spec() const { return spec_; }
  // Throws DimensionError unless both spatial extents are divisible by 4.
  Encoded encode(const Tensor& x) const;
  Tensor decode(const Tensor& z) const;
  // Reparameterized draw mu + exp(logvar / 2) * eps.
  Tensor sample(const Encoded& e, Rng& rng) const;
  // Scaled posterior mean, the latent the denoisers operate on.
  Tensor latent(const Tensor& x) const;
  Tensor decode_latent(const Tensor& scaled) const;
  double latent_scale() const { return scale_.item(); }
  void set_latent_scale(double s);

  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  VaeSpec spec_;
  Conv e0_, e1_, e2_, e3_, e4_;
  Conv d0_, d1_, d2_, d3_;
  Tensor scale_;
};

// Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).
Tensor kl_divergence(const Tensor& mu, const Tensor& logvar);

class Discriminator : public Module {
 public:
  Discriminator() = default;
  Discriminator(int in_channels, Rng& rng, DType dtype = DType::kF32);
  // Patch logits at 1/8 of the input extents.
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  Conv c0_, c1_, c2_;
};

Tensor hinge_d_loss(const Tensor& real_logits, const Tensor& fake_logits);
Tensor hinge_g_loss(const Tensor& fake_logits);

struct VaeLoss {
  Tensor total, recon, kl, adv;
  Tensor x_hat;
};
// L1 reconstruction + kl_weight * KL, plus adv_weight * generator hinge term
// when a discriminator is given and adv_active is set.
VaeLoss vae_loss(const Vae& vae, const Tensor& x, Rng& rng, const Discriminator* disc,
                 bool adv_active);

// ---- frozen surrogates ---------------------------------------------------------

inline constexpr int kSemanticDim = 128;
inline constexpr int kSemanticInput = 64;

// Random-weight conv tower (frozen) feeding a trainable MLP; one token of
// kSemanticDim per sample.
class SemanticEncoder : public Module {
 public:
  SemanticEncoder() = default;
  SemanticEncoder(Rng& rng, DType dtype = DType::kF32);
  // crop [B, 3, 64, 64] -> [B, 128]
  Tensor embed(const Tensor& crop) const;
  Tensor tower(const Tensor& crop) const;
  uint64_t frozen_checksum() const;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  std::vector<Conv> tower_;
  Dense fc0_, fc1_;
};

// Bounding-box crop of the silhouette resized to size x size (bilinear),
// as a [1, 3, size, size] tensor.
Tensor object_crop(const Grid<float>& rgb, const Grid<uint8_t>& silhouette, int size = kSemanticInput,
                   DType dtype = DType::kF32);

class FeatureExtractor : public FeatureStages, public Module {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(int in_channels, Rng& rng, DType dtype = DType::kF32);
  int stage_count() const override { return static_cast<int>(stages_.size()); }
  std::vector<Tensor> features(const Tensor& x) const override;
  uint64_t frozen_checksum() const;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  std::vector<Conv> stages_;
};

// Concatenation of the VAE latent of the pasted input and the mask reduced to
// latent resolution (area average, then >= 0.5).
Tensor pixel_condition(const Tensor& x_pasted, const Tensor& mask, const Vae& vae);
Tensor downsample_mask(const Tensor& mask, int factor);

// ---- cross-modality module ---------------------------------------------------

inline constexpr int kDeformPoints = 4;

class CrossModality : public Module {
 public:
  CrossModality() = default;
  CrossModality(int channels, Rng& rng, DType dtype = DType::kF32);

  // query [N, C], other [C, H, W], refs [N, 2] as (x, y) in the other map,
  // valid [N] (1/0). Rows with valid = 0 are zero.
  Tensor dattn(const Tensor& query, const Tensor& other, const Tensor& refs,
               const std::vector<uint8_t>& valid) const;
  // z_self + tanh(alpha) * dattn for every cell, maps[b] giving per-cell
  // references into z_other for batch element b.
  Tensor update(const Tensor& z_self, const Tensor& z_other,
                const std::vector<const CorrespondenceMap*>& maps) const;

  Tensor alpha;
  Dense offset, attn, value;
  void collect(ParamList& out, const std::string& prefix) const override;
};

// ---- denoiser -------------------------------------------------------------------

struct DenoiserSpec {
  int latent_channels = 4;
  int width1 = 32;
  int width2 = 64;
  int time_dim = 64;
  int time_hidden = 128;
};

// Encoder outputs kept for the decoder; mid is the exchanged feature map.
struct MidState {
  Tensor skip, mid, temb, sem;
};

class Denoiser : public Module {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserSpec& spec, Rng& rng, DType dtype = DType::kF32);

  // z_t [B, 4, h, w], h_p [B, 5, h, w], crop [B, 3, 64, 64] (semantic source).
  // Throws ConfigError when a condition is missing.
  // t holds one timestep per batch element, or a single shared one.
  MidState encode(const Tensor& z_t, const std::vector<int>& t, const Tensor& h_p,
                  const Tensor& crop) const;
  Tensor decode(const MidState& state, const Tensor& mid) const;
  // Single-branch prediction, no exchange.
  Tensor operator()(const Tensor& z_t, const std::vector<int>& t, const Tensor& h_p,
                    const Tensor& crop) const;

  const DenoiserSpec& spec() const { return spec_; }
  SemanticEncoder semantic;
  CrossModality cross;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  Tensor time_embedding(const std::vector<int>& t, int64_t batch) const;
  Tensor block(const Conv& a, const Conv& b, const Dense& tp, const Tensor& x, const Tensor& temb) const;
  Tensor inject(const Dense& v, const Dense& o, const Tensor& x, const Tensor& sem) const;

  DenoiserSpec spec_;
  DType dtype_ = DType::kF32;
  Dense t0_, t1_;
  Conv in_, b1a_, b1b_, down_, b2a_, b2b_, up_, merge_, b3a_, b3b_, out_;
  Dense tp1_, tp2_, tp3_;
  Dense sv1_, so1_, sv2_, so2_, sv3_, so3_;
};

// Per-sample correspondence maps at mid-block resolution.
struct CrossMaps {
  std::vector<CorrespondenceMap> image_to_range;  // image mid cell -> range mid coords
  std::vector<CorrespondenceMap> range_to_image;  // range mid cell -> image mid coords
};
// Builds both directions from range images at full resolution.
CrossMaps build_cross_maps(const std::vector<RangeImage>& ranges, const Calibration& calib);

struct JointInput {
  Tensor z_image, z_range;
  Tensor hp_image, hp_range;
  Tensor hs_image, hs_range;  // object crops [B, 3, 64, 64]
};

struct JointEps {
  Tensor image, range;
};

// Both denoisers with the mid-block exchange; each direction reads the other
// branch's pre-exchange features.
JointEps joint_denoise(const Denoiser& image_net, const Denoiser& range_net, const JointInput& in,
                       const std::vector<int>& t, const CrossMaps& maps);

}  // namespace mted

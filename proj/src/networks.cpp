#include "mted/networks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mted/conditions.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"
#include "mted/rng.hpp"

namespace mted {

ParamList Module::parameters(const std::string& prefix) const {
  ParamList out;
  collect(out, prefix);
  return out;
}

namespace {

Tensor scaled_normal(const Shape& shape, double stddev, Rng& rng, DType dtype) {
  return mul(Tensor::randn(shape, rng, dtype), stddev);
}

void push(ParamList& out, const std::string& name, const Tensor& t, bool trainable = true) {
  out.push_back({name, t, trainable});
}

// [B, C] -> [B, C, 1, 1] for per-channel broadcasting.
Tensor as_bias(const Tensor& v) { return reshape(v, {v.size(0), v.size(1), 1, 1}); }

void require_rank4(const Tensor& x, const char* what) {
  if (!x.defined()) throw ConfigError(std::string(what) + ": input missing");
  if (x.dim() != 4) throw DimensionError(std::string(what) + ": expected [B,C,H,W], got " + shape_str(x.shape()));
}

}  // namespace

// ---- layers -------------------------------------------------------------------------

Conv::Conv(int in, int out, int k, int s, Rng& rng, DType dtype, double gain) : stride(s) {
  const double fan_in = static_cast<double>(in) * k * k;
  w = scaled_normal({out, in, k, k}, gain * std::sqrt(2.0 / fan_in), rng, dtype);
  b = Tensor::zeros({out}, dtype);
}

Tensor Conv::operator()(const Tensor& x) const {
  return conv2d(x, w, b, stride, w.size(2) / 2);
}

void Conv::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix + "w", w, !frozen);
  push(out, prefix + "b", b, !frozen);
}

Dense::Dense(int in, int out, Rng& rng, DType dtype, double gain) {
  w = scaled_normal({out, in}, gain * std::sqrt(1.0 / in), rng, dtype);
  b = Tensor::zeros({out}, dtype);
}

void Dense::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix + "w", w);
  push(out, prefix + "b", b);
}

void enable_grads(const ParamList& params, bool on) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(on && p.trainable);
  }
}

uint64_t params_checksum(const ParamList& params) {
  uint64_t h = fnv1a64(nullptr, 0);
  for (const auto& p : params) {
    h = fnv1a64(p.name.data(), p.name.size(), h);
    const auto& shape = p.tensor.shape();
    h = fnv1a64(shape.data(), shape.size() * sizeof(int64_t), h);
    if (p.tensor.dtype() == DType::kF32) {
      auto d = p.tensor.data<float>();
      h = fnv1a64(d.data(), d.size_bytes(), h);
    } else {
      auto d = p.tensor.data<double>();
      h = fnv1a64(d.data(), d.size_bytes(), h);
    }
  }
  return h;
}

// ---- VAE ----------------------------------------------------------------------------

Vae::Vae(const VaeSpec& spec, Rng& rng, DType dtype) : spec_(spec) {
  if (spec.in_channels < 1 || spec.latent_channels < 1 || spec.width1 < 1 || spec.width2 < 1) {
    throw ConfigError("vae: channel counts must be positive");
  }
  if (spec.kl_weight < 0 || spec.adv_weight < 0 || spec.adv_warmup < 0) {
    throw ConfigError("vae: weights and warm-up must be non-negative");
  }
  const int c = spec.in_channels, w1 = spec.width1, w2 = spec.width2, l = spec.latent_channels;
  e0_ = Conv(c, w1, 3, 1, rng, dtype);
  e1_ = Conv(w1, w1, 3, 2, rng, dtype);
  e2_ = Conv(w1, w2, 3, 1, rng, dtype);
  e3_ = Conv(w2, w2, 3, 2, rng, dtype);
  e4_ = Conv(w2, 2 * l, 3, 1, rng, dtype, 0.5);
  d0_ = Conv(l, w2, 3, 1, rng, dtype);
  d1_ = Conv(w2, w1, 3, 1, rng, dtype);
  d2_ = Conv(w1, w1, 3, 1, rng, dtype);
  d3_ = Conv(w1, c, 3, 1, rng, dtype, 0.5);
  scale_ = Tensor::scalar(1.0, dtype);
}

Encoded Vae::encode(const Tensor& x) const {
  require_rank4(x, "vae_encode");
  if (x.size(1) != spec_.in_channels) {
    throw DimensionError("vae_encode: expected " + std::to_string(spec_.in_channels) + " channels, got " +
                         shape_str(x.shape()));
  }
  if (x.size(2) % kLatentDownsample != 0 || x.size(3) % kLatentDownsample != 0) {
    throw DimensionError("vae_encode: extents " + shape_str(x.shape()) + " not divisible by 4");
  }
  Tensor h = silu(e0_(x));
  h = silu(e1_(h));
  h = silu(e2_(h));
  h = silu(e3_(h));
  h = e4_(h);
  const int l = spec_.latent_channels;
  return {slice(h, 1, 0, l), slice(h, 1, l, l)};
}

Tensor Vae::decode(const Tensor& z) const {
  require_rank4(z, "vae_decode");
  if (z.size(1) != spec_.latent_channels) {
    throw DimensionError("vae_decode: expected " + std::to_string(spec_.latent_channels) +
                         " latent channels, got " + shape_str(z.shape()));
  }
  Tensor h = silu(d0_(z));
  h = upsample2x(h);
  h = silu(d1_(h));
  h = upsample2x(h);
  h = silu(d2_(h));
  return d3_(h);
}

Tensor Vae::sample(const Encoded& e, Rng& rng) const {
  Tensor eps = Tensor::randn(e.mu.shape(), rng, e.mu.dtype());
  return e.mu + exp(e.logvar * 0.5) * eps;
}

Tensor Vae::latent(const Tensor& x) const { return mul(encode(x).mu, scale_.detach()); }

Tensor Vae::decode_latent(const Tensor& scaled) const {
  return decode(mul(scaled, 1.0 / latent_scale()));
}

void Vae::set_latent_scale(double s) {
  if (!(s > 0) || !std::isfinite(s)) throw DomainError("vae: latent scale must be positive and finite");
  scale_.set(0, s);
}

void Vae::collect(ParamList& out, const std::string& prefix) const {
  const Conv* convs[] = {&e0_, &e1_, &e2_, &e3_, &e4_, &d0_, &d1_, &d2_, &d3_};
  const char* names[] = {"enc0.", "enc1.", "enc2.", "enc3.", "enc4.", "dec0.", "dec1.", "dec2.", "dec3."};
  for (int i = 0; i < 9; ++i) convs[i]->collect(out, prefix + names[i]);
  push(out, prefix + "latent_scale", scale_, false);
}

Tensor kl_divergence(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape()) throw DimensionError("kl_divergence: mu/logvar shape mismatch");
  return mean((square(mu) + exp(logvar) - logvar - 1.0) * 0.5);
}

Discriminator::Discriminator(int in_channels, Rng& rng, DType dtype) {
  c0_ = Conv(in_channels, 16, 3, 2, rng, dtype);
  c1_ = Conv(16, 32, 3, 2, rng, dtype);
  c2_ = Conv(32, 1, 3, 2, rng, dtype);
}

Tensor Discriminator::operator()(const Tensor& x) const {
  require_rank4(x, "discriminator");
  if (x.size(2) % 8 != 0 || x.size(3) % 8 != 0) {
    throw DimensionError("discriminator: extents " + shape_str(x.shape()) + " not divisible by 8");
  }
  return c2_(silu(c1_(silu(c0_(x)))));
}

void Discriminator::collect(ParamList& out, const std::string& prefix) const {
  c0_.collect(out, prefix + "c0.");
  c1_.collect(out, prefix + "c1.");
  c2_.collect(out, prefix + "c2.");
}

Tensor hinge_d_loss(const Tensor& real_logits, const Tensor& fake_logits) {
  return mean(relu(-real_logits + 1.0)) + mean(relu(fake_logits + 1.0));
}

Tensor hinge_g_loss(const Tensor& fake_logits) { return -mean(fake_logits); }

VaeLoss vae_loss(const Vae& vae, const Tensor& x, Rng& rng, const Discriminator* disc, bool adv_active) {
  const Encoded e = vae.encode(x);
  const Tensor x_hat = vae.decode(vae.sample(e, rng));
  VaeLoss out;
  out.x_hat = x_hat;
  out.recon = mean(abs(x_hat - x));
  out.kl = kl_divergence(e.mu, e.logvar);
  out.total = out.recon + out.kl * vae.spec().kl_weight;
  if (disc && adv_active) {
    out.adv = hinge_g_loss((*disc)(x_hat));
    out.total = out.total + out.adv * vae.spec().adv_weight;
  } else {
    out.adv = Tensor::scalar(0.0, x.dtype());
  }
  return out;
}

// ---- frozen surrogates --------------------------------------------------------------

SemanticEncoder::SemanticEncoder(Rng& rng, DType dtype) {
  const int widths[] = {3, 8, 16, 32, 32, 32};
  for (int i = 0; i < 5; ++i) {
    tower_.emplace_back(widths[i], widths[i + 1], 3, 2, rng, dtype);
    tower_.back().frozen = true;
  }
  fc0_ = Dense(128, 128, rng, dtype);
  fc1_ = Dense(128, kSemanticDim, rng, dtype);
}

Tensor SemanticEncoder::tower(const Tensor& crop) const {
  require_rank4(crop, "semantic_condition");
  if (crop.size(1) != 3 || crop.size(2) != kSemanticInput || crop.size(3) != kSemanticInput) {
    throw DimensionError("semantic_condition: expected [B,3,64,64], got " + shape_str(crop.shape()));
  }
  Tensor h = crop;
  for (const auto& c : tower_) h = relu(c(h));
  return reshape(h, {crop.size(0), 128});
}

Tensor SemanticEncoder::embed(const Tensor& crop) const {
  return fc1_(silu(fc0_(tower(crop))));
}

uint64_t SemanticEncoder::frozen_checksum() const {
  ParamList p;
  for (size_t i = 0; i < tower_.size(); ++i) tower_[i].collect(p, "tower" + std::to_string(i) + ".");
  return params_checksum(p);
}

void SemanticEncoder::collect(ParamList& out, const std::string& prefix) const {
  for (size_t i = 0; i < tower_.size(); ++i) tower_[i].collect(out, prefix + "tower" + std::to_string(i) + ".");
  fc0_.collect(out, prefix + "fc0.");
  fc1_.collect(out, prefix + "fc1.");
}

Tensor object_crop(const Grid<float>& rgb, const Grid<uint8_t>& silhouette, int size, DType dtype) {
  return image_to_tensor(crop_object(rgb, silhouette, size), dtype);
}

FeatureExtractor::FeatureExtractor(int in_channels, Rng& rng, DType dtype) {
  const int widths[] = {8, 16, 16, 32, 32};
  int prev = in_channels;
  for (int i = 0; i < kPerceptualStages; ++i) {
    stages_.emplace_back(prev, widths[i], 3, i == 0 ? 1 : 2, rng, dtype);
    stages_.back().frozen = true;
    prev = widths[i];
  }
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
  std::vector<Tensor> out;
  Tensor h = x;
  for (const auto& s : stages_) {
    h = relu(s(h));
    out.push_back(h);
  }
  return out;
}

uint64_t FeatureExtractor::frozen_checksum() const { return params_checksum(parameters()); }

void FeatureExtractor::collect(ParamList& out, const std::string& prefix) const {
  for (size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(out, prefix + "stage" + std::to_string(i) + ".");
}

Tensor downsample_mask(const Tensor& mask, int factor) {
  require_rank4(mask, "downsample_mask");
  if (mask.size(1) != 1) throw DimensionError("downsample_mask: expected one channel");
  const int64_t B = mask.size(0), H = mask.size(2), W = mask.size(3);
  if (factor < 1 || H % factor || W % factor) {
    throw DimensionError("downsample_mask: extents " + shape_str(mask.shape()) + " not divisible");
  }
  const int64_t h = H / factor, w = W / factor;
  const std::vector<double> m = mask.to_vector();
  std::vector<double> out(static_cast<size_t>(B * h * w));
  // Window centered on full-resolution cell factor*i, matching the latent grid.
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double s = 0;
        int n = 0;
        for (int64_t r = i * factor - factor / 2; r < i * factor - factor / 2 + factor; ++r) {
          for (int64_t c = j * factor - factor / 2; c < j * factor - factor / 2 + factor; ++c) {
            if (r < 0 || r >= H || c < 0 || c >= W) continue;
            s += m[static_cast<size_t>((b * H + r) * W + c)];
            ++n;
          }
        }
        out[static_cast<size_t>((b * h + i) * w + j)] = (n > 0 && s / n >= 0.5) ? 1.0 : 0.0;
      }
    }
  }
  return Tensor::from_vector({B, 1, h, w}, out, mask.dtype());
}

Tensor pixel_condition(const Tensor& x_pasted, const Tensor& mask, const Vae& vae) {
  require_rank4(x_pasted, "pixel_condition");
  require_rank4(mask, "pixel_condition");
  if (mask.size(0) != x_pasted.size(0) || mask.size(2) != x_pasted.size(2) || mask.size(3) != x_pasted.size(3)) {
    throw DimensionError("pixel_condition: mask " + shape_str(mask.shape()) + " does not match input " +
                         shape_str(x_pasted.shape()));
  }
  return concat({vae.latent(x_pasted), downsample_mask(mask, kLatentDownsample)}, 1);
}

// ---- cross-modality module ----------------------------------------------------------

CrossModality::CrossModality(int channels, Rng& rng, DType dtype) {
  alpha = Tensor::zeros({1}, dtype);
  offset = Dense(channels, 2 * kDeformPoints, rng, dtype);
  offset.w = Tensor::zeros({2 * kDeformPoints, channels}, dtype);
  attn = Dense(channels, kDeformPoints, rng, dtype);
  attn.w = Tensor::zeros({kDeformPoints, channels}, dtype);
  value = Dense(channels, channels, rng, dtype);
}

Tensor CrossModality::dattn(const Tensor& query, const Tensor& other, const Tensor& refs,
                            const std::vector<uint8_t>& valid) const {
  if (query.dim() != 2 || other.dim() != 3 || query.size(1) != other.size(0)) {
    throw DimensionError("cross_dattn: query " + shape_str(query.shape()) + " vs map " + shape_str(other.shape()));
  }
  const int64_t N = query.size(0), C = query.size(1);
  if (refs.shape() != Shape{N, 2} || static_cast<int64_t>(valid.size()) != N) {
    throw DimensionError("cross_dattn: refs/valid do not match " + std::to_string(N) + " queries");
  }
  const Tensor offsets = reshape(offset(query), {N, kDeformPoints, 2});
  const Tensor points = reshape(reshape(refs, {N, 1, 2}) + offsets, {N * kDeformPoints, 2});
  const Tensor sampled = value(bilinear_sample(other, points));
  const Tensor weights = softmax(attn(query), 1);
  const Tensor out = weighted_sum(weights, reshape(sampled, {N, kDeformPoints, C}));
  std::vector<double> keep(valid.begin(), valid.end());
  return out * Tensor::from_vector({N, 1}, keep, query.dtype());
}

Tensor CrossModality::update(const Tensor& z_self, const Tensor& z_other,
                             const std::vector<const CorrespondenceMap*>& maps) const {
  require_rank4(z_self, "cross_modality_update");
  require_rank4(z_other, "cross_modality_update");
  const int64_t B = z_self.size(0), C = z_self.size(1), H = z_self.size(2), W = z_self.size(3);
  if (z_other.size(0) != B || z_other.size(1) != C) {
    throw DimensionError("cross_modality_update: batch/channel mismatch");
  }
  if (static_cast<int64_t>(maps.size()) != B) {
    throw DimensionError("cross_modality_update: one correspondence map per batch element required");
  }
  const Tensor gate = tanh(alpha);
  std::vector<Tensor> outs;
  for (int64_t b = 0; b < B; ++b) {
    const CorrespondenceMap& m = *maps[b];
    if (m.rows != H || m.cols != W) {
      throw DimensionError("cross_modality_update: map " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                           " vs features " + std::to_string(H) + "x" + std::to_string(W));
    }
    const Tensor self_b = slice(z_self, 0, b, 1);
    const Tensor other_b = reshape(slice(z_other, 0, b, 1), {C, z_other.size(2), z_other.size(3)});
    const Tensor query = reshape(permute(reshape(self_b, {C, H, W}), {1, 2, 0}), {H * W, C});
    std::vector<double> refs(static_cast<size_t>(2 * H * W), 0.0);
    std::vector<uint8_t> valid(static_cast<size_t>(H * W), 0);
    for (size_t i = 0; i < m.cells.size(); ++i) {
      if (!m.cells[i].valid) continue;
      refs[2 * i] = m.cells[i].x;
      refs[2 * i + 1] = m.cells[i].y;
      valid[i] = 1;
    }
    const Tensor delta = dattn(query, other_b, Tensor::from_vector({H * W, 2}, refs, z_self.dtype()), valid);
    const Tensor delta_map = reshape(permute(reshape(delta, {H, W, C}), {2, 0, 1}), {1, C, H, W});
    outs.push_back(self_b + delta_map * gate);
  }
  return B == 1 ? outs[0] : concat(outs, 0);
}

void CrossModality::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix + "alpha", alpha);
  offset.collect(out, prefix + "offset.");
  attn.collect(out, prefix + "attn.");
  value.collect(out, prefix + "value.");
}

// ---- denoiser -----------------------------------------------------------------------

Denoiser::Denoiser(const DenoiserSpec& spec, Rng& rng, DType dtype) : spec_(spec), dtype_(dtype) {
  if (spec.latent_channels < 1 || spec.width1 < 1 || spec.width2 < 1 || spec.time_dim < 2 ||
      spec.time_dim % 2 || spec.time_hidden < 1) {
    throw ConfigError("denoiser: bad widths");
  }
  const int l = spec.latent_channels, c1 = spec.width1, c2 = spec.width2, th = spec.time_hidden;
  semantic = SemanticEncoder(rng, dtype);
  t0_ = Dense(spec.time_dim, th, rng, dtype);
  t1_ = Dense(th, th, rng, dtype);
  in_ = Conv(2 * l + 1, c1, 3, 1, rng, dtype);
  b1a_ = Conv(c1, c1, 3, 1, rng, dtype);
  b1b_ = Conv(c1, c1, 3, 1, rng, dtype, 0.5);
  down_ = Conv(c1, c2, 3, 2, rng, dtype);
  b2a_ = Conv(c2, c2, 3, 1, rng, dtype);
  b2b_ = Conv(c2, c2, 3, 1, rng, dtype, 0.5);
  up_ = Conv(c2, c1, 3, 1, rng, dtype);
  merge_ = Conv(2 * c1, c1, 3, 1, rng, dtype);
  b3a_ = Conv(c1, c1, 3, 1, rng, dtype);
  b3b_ = Conv(c1, c1, 3, 1, rng, dtype, 0.5);
  out_ = Conv(c1, l, 3, 1, rng, dtype, 0.5);
  tp1_ = Dense(th, c1, rng, dtype);
  tp2_ = Dense(th, c2, rng, dtype);
  tp3_ = Dense(th, c1, rng, dtype);
  sv1_ = Dense(kSemanticDim, c1, rng, dtype);
  so1_ = Dense(c1, c1, rng, dtype, 0.5);
  sv2_ = Dense(kSemanticDim, c2, rng, dtype);
  so2_ = Dense(c2, c2, rng, dtype, 0.5);
  sv3_ = Dense(kSemanticDim, c1, rng, dtype);
  so3_ = Dense(c1, c1, rng, dtype, 0.5);
  cross = CrossModality(c2, rng, dtype);
}

Tensor Denoiser::time_embedding(const std::vector<int>& t, int64_t batch) const {
  if (t.empty() || (t.size() != 1 && static_cast<int64_t>(t.size()) != batch)) {
    throw DimensionError("denoise: need one timestep or one per batch element");
  }
  const int half = spec_.time_dim / 2;
  std::vector<double> v(t.size() * spec_.time_dim);
  for (size_t b = 0; b < t.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      v[b * spec_.time_dim + i] = std::sin(t[b] * freq);
      v[b * spec_.time_dim + half + i] = std::cos(t[b] * freq);
    }
  }
  const Tensor e = Tensor::from_vector({static_cast<int64_t>(t.size()), spec_.time_dim}, v, dtype_);
  return t1_(silu(t0_(e)));
}

Tensor Denoiser::block(const Conv& a, const Conv& b, const Dense& tp, const Tensor& x, const Tensor& temb) const {
  Tensor h = a(silu(x)) + as_bias(tp(silu(temb)));
  h = b(silu(h));
  return x + h;
}

// With a single key/value token the attention weights are identically 1, so
// cross-attention reduces to the projected value.
Tensor Denoiser::inject(const Dense& v, const Dense& o, const Tensor& x, const Tensor& sem) const {
  return x + as_bias(o(v(sem)));
}

MidState Denoiser::encode(const Tensor& z_t, const std::vector<int>& t, const Tensor& h_p,
                          const Tensor& crop) const {
  if (!z_t.defined()) throw ConfigError("denoise: noisy latent missing");
  if (!h_p.defined()) throw ConfigError("denoise: pixel condition missing");
  if (!crop.defined()) throw ConfigError("denoise: semantic condition missing");
  require_rank4(z_t, "denoise");
  require_rank4(h_p, "denoise");
  const int64_t B = z_t.size(0);
  if (z_t.size(1) != spec_.latent_channels || h_p.size(1) != spec_.latent_channels + 1 || h_p.size(0) != B ||
      h_p.size(2) != z_t.size(2) || h_p.size(3) != z_t.size(3)) {
    throw DimensionError("denoise: z_t " + shape_str(z_t.shape()) + " vs pixel condition " +
                         shape_str(h_p.shape()));
  }
  if (z_t.size(2) % 2 || z_t.size(3) % 2) throw DimensionError("denoise: latent extents must be even");
  if (crop.dim() != 4 || crop.size(0) != B) throw DimensionError("denoise: one semantic crop per batch element");
  MidState s;
  s.temb = time_embedding(t, B);
  s.sem = semantic.embed(crop);
  Tensor h = in_(concat({z_t, h_p}, 1));
  h = block(b1a_, b1b_, tp1_, h, s.temb);
  s.skip = inject(sv1_, so1_, h, s.sem);
  h = down_(silu(s.skip));
  h = block(b2a_, b2b_, tp2_, h, s.temb);
  s.mid = inject(sv2_, so2_, h, s.sem);
  return s;
}

Tensor Denoiser::decode(const MidState& s, const Tensor& mid) const {
  Tensor h = up_(upsample2x(mid));
  h = merge_(silu(concat({h, s.skip}, 1)));
  h = block(b3a_, b3b_, tp3_, h, s.temb);
  h = inject(sv3_, so3_, h, s.sem);
  return out_(silu(h));
}

Tensor Denoiser::operator()(const Tensor& z_t, const std::vector<int>& t, const Tensor& h_p,
                            const Tensor& crop) const {
  const MidState s = encode(z_t, t, h_p, crop);
  return decode(s, s.mid);
}

void Denoiser::collect(ParamList& out, const std::string& prefix) const {
  semantic.collect(out, prefix + "semantic.");
  t0_.collect(out, prefix + "time0.");
  t1_.collect(out, prefix + "time1.");
  const std::pair<const Conv*, const char*> convs[] = {
      {&in_, "in."},      {&b1a_, "block1a."}, {&b1b_, "block1b."}, {&down_, "down."},
      {&b2a_, "block2a."}, {&b2b_, "block2b."}, {&up_, "up."},      {&merge_, "merge."},
      {&b3a_, "block3a."}, {&b3b_, "block3b."}, {&out_, "out."}};
  for (const auto& [c, n] : convs) c->collect(out, prefix + n);
  const std::pair<const Dense*, const char*> dense[] = {
      {&tp1_, "temb1."}, {&tp2_, "temb2."}, {&tp3_, "temb3."}, {&sv1_, "sem1v."}, {&so1_, "sem1o."},
      {&sv2_, "sem2v."}, {&so2_, "sem2o."}, {&sv3_, "sem3v."}, {&so3_, "sem3o."}};
  for (const auto& [d, n] : dense) d->collect(out, prefix + n);
  cross.collect(out, prefix + "cross.");
}

CrossMaps build_cross_maps(const std::vector<RangeImage>& ranges, const Calibration& calib) {
  CrossMaps maps;
  for (const auto& ri : ranges) {
    maps.image_to_range.push_back(build_inverse_correspondence(ri, calib, kLatentDownsample).downsample2());
    maps.range_to_image.push_back(build_correspondence(ri, calib, kLatentDownsample).downsample2());
  }
  return maps;
}

JointEps joint_denoise(const Denoiser& image_net, const Denoiser& range_net, const JointInput& in,
                       const std::vector<int>& t, const CrossMaps& maps) {
  const MidState si = image_net.encode(in.z_image, t, in.hp_image, in.hs_image);
  const MidState sr = range_net.encode(in.z_range, t, in.hp_range, in.hs_range);
  std::vector<const CorrespondenceMap*> to_range, to_image;
  for (const auto& m : maps.image_to_range) to_range.push_back(&m);
  for (const auto& m : maps.range_to_image) to_image.push_back(&m);
  // Both directions read the pre-exchange mid features.
  const Tensor mid_i = image_net.cross.update(si.mid, sr.mid, to_range);
  const Tensor mid_r = range_net.cross.update(sr.mid, si.mid, to_image);
  return {image_net.decode(si, mid_i), range_net.decode(sr, mid_r)};
}

}  // namespace mted

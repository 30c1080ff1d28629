#include "mted/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "mted/conditions.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"

namespace mted {

using nlohmann::json;

// ---- models ------------------------------------------------------------------------------

Models::Models(const RunConfig& cfg) {
  const Rng root(mix_seed(cfg.seed, 0x6d6f64656cull));
  Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3), r4 = root.fork(4), r5 = root.fork(5),
      r6 = root.fork(6), r7 = root.fork(7);
  image_vae = Vae(cfg.image_vae, r1);
  range_vae = Vae(cfg.range_vae, r2);
  range_disc = Discriminator(1, r3);
  image_net = Denoiser(cfg.denoiser, r4);
  range_net = Denoiser(cfg.denoiser, r5);
  image_features = FeatureExtractor(3, r6);
  range_features = FeatureExtractor(1, r7);
}

ParamList Models::all() const {
  ParamList out;
  image_vae.collect(out, "image_vae.");
  range_vae.collect(out, "range_vae.");
  range_disc.collect(out, "range_disc.");
  image_net.collect(out, "image_net.");
  range_net.collect(out, "range_net.");
  image_features.collect(out, "image_features.");
  range_features.collect(out, "range_features.");
  return out;
}

Models Models::with_gates_off() const {
  Models m = *this;
  m.image_net.cross.alpha = Tensor::zeros(image_net.cross.alpha.shape(), image_net.cross.alpha.dtype());
  m.range_net.cross.alpha = Tensor::zeros(range_net.cross.alpha.shape(), range_net.cross.alpha.dtype());
  return m;
}

NoiseSchedule make_schedule(const RunConfig& cfg) {
  return NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
}

// ---- Adam ---------------------------------------------------------------------------------

Adam::Adam(ParamList params, double lr, double clip_norm) : params_(std::move(params)), lr_(lr), clip_(clip_norm) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
  }
}

namespace {

template <class T>
double grad_sq(detail::TensorImpl* impl) {
  if (!impl->grad) return 0;
  double s = 0;
  for (T g : impl->grad_values<T>()) s += static_cast<double>(g) * g;
  return s;
}

template <class T>
void adam_update(detail::TensorImpl* p, detail::TensorImpl* m, detail::TensorImpl* v, double scale, double lr,
                 double bc1, double bc2) {
  if (!p->grad) return;
  auto& w = p->values<T>();
  const auto& g = p->grad_values<T>();
  auto& mv = m->values<T>();
  auto& vv = v->values<T>();
  for (size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]) * scale;
    const double mi = Adam::kBeta1 * mv[i] + (1 - Adam::kBeta1) * gi;
    const double vi = Adam::kBeta2 * vv[i] + (1 - Adam::kBeta2) * gi * gi;
    mv[i] = static_cast<T>(mi);
    vv[i] = static_cast<T>(vi);
    w[i] = static_cast<T>(w[i] - lr * (mi / bc1) / (std::sqrt(vi / bc2) + Adam::kEps));
  }
}

}  // namespace

double Adam::step() {
  double sq = 0;
  for (const auto& p : params_) {
    sq += p.tensor.dtype() == DType::kF32 ? grad_sq<float>(p.tensor.impl()) : grad_sq<double>(p.tensor.impl());
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("adam: non-finite gradient norm");
  const double scale = norm > clip_ ? clip_ / (norm + 1e-6) : 1.0;
  ++t_;
  const double bc1 = 1 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(kBeta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i].tensor.impl();
    if (params_[i].tensor.dtype() == DType::kF32) {
      adam_update<float>(p, m_[i].impl(), v_[i].impl(), scale, lr_, bc1, bc2);
    } else {
      adam_update<double>(p, m_[i].impl(), v_[i].impl(), scale, lr_, bc1, bc2);
    }
  }
  zero_grad();
  return norm;
}

void Adam::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void Adam::export_state(ParamList& out, const std::string& prefix) const {
  for (size_t i = 0; i < params_.size(); ++i) {
    out.push_back({prefix + "m." + params_[i].name, m_[i], false});
    out.push_back({prefix + "v." + params_[i].name, v_[i], false});
  }
  out.push_back({prefix + "t", Tensor::scalar(static_cast<double>(t_), DType::kF64), false});
}

void Adam::import_state(const ParamList& in, const std::string& prefix, int64_t steps) {
  ParamList dst;
  for (size_t i = 0; i < params_.size(); ++i) {
    dst.push_back({prefix + "m." + params_[i].name, m_[i], false});
    dst.push_back({prefix + "v." + params_[i].name, v_[i], false});
  }
  Checkpoint tmp;
  tmp.tensors = in;
  restore(dst, tmp);
  t_ = steps;
}

// ---- augmentation ----------------------------------------------------------------------------

Image adjust_brightness_contrast(const Image& img, double brightness, double contrast) {
  Image out = img;
  for (auto& v : out.data) {
    v = static_cast<float>(std::clamp((v - 0.5) * (1.0 + contrast) + 0.5 + brightness, 0.0, 1.0));
  }
  return out;
}

Image rotate_image(const Image& img, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cx = (img.cols - 1) / 2.0, cy = (img.rows - 1) / 2.0;
  Image out(img.rows, img.cols, img.channels, 0.0f);
  auto px = [&](int r, int c, int ch) -> double {
    return img.contains(r, c) ? static_cast<double>(img.at(r, c, ch)) : 0.0;
  };
  for (int r = 0; r < img.rows; ++r) {
    for (int c = 0; c < img.cols; ++c) {
      const double dx = c - cx, dy = r - cy;
      const double sx = ca * dx + sa * dy + cx;
      const double sy = -sa * dx + ca * dy + cy;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (int ch = 0; ch < img.channels; ++ch) {
        const double v = (1 - fx) * (1 - fy) * px(y0, x0, ch) + fx * (1 - fy) * px(y0, x0 + 1, ch) +
                         (1 - fx) * fy * px(y0 + 1, x0, ch) + fx * fy * px(y0 + 1, x0 + 1, ch);
        out.at(r, c, ch) = static_cast<float>(v);
      }
    }
  }
  return out;
}

Image box_blur3(const Image& img) {
  Image out = img;
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) {
        double s = 0;
        int n = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (!img.contains(r + dr, c + dc)) continue;
            s += img.at(r + dr, c + dc, ch);
            ++n;
          }
        out.at(r, c, ch) = static_cast<float>(s / n);
      }
  return out;
}

Image augment(const Image& object_rgb, Rng& rng, AugmentBranch branch, double p) {
  Image out = object_rgb;
  if (branch == AugmentBranch::kRange) {
    if (rng.uniform() < p) out = rotate_image(out, rng.uniform(-15.0, 15.0));
    return out;
  }
  if (rng.uniform() < p) {
    const double b = rng.uniform(-0.2, 0.2), c = rng.uniform(-0.2, 0.2);
    out = adjust_brightness_contrast(out, b, c);
  }
  if (rng.uniform() < p) out = rotate_image(out, rng.uniform(-15.0, 15.0));
  if (rng.uniform() < p) out = box_blur3(out);
  return out;
}

// ---- checkpoints ----------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'T', 'E', 'D'};

class Writer {
 public:
  template <class T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<uint32_t>(static_cast<uint32_t>(s.size()));
    buf_.append(s);
  }
  void raw(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, size_t end, std::string path) : d_(data), end_(end), path_(std::move(path)) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, d_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const uint32_t n = pod<uint32_t>();
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* take(size_t n) {
    need(n);
    const char* p = d_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(size_t n) const {
    if (n > end_ - pos_) throw FormatError("checkpoint " + path_ + ": truncated");
  }
  const std::string& d_;
  size_t pos_ = 0, end_;
  std::string path_;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  Writer w;
  w.raw(kMagic, 4);
  w.pod<uint32_t>(kCheckpointVersion);
  w.pod<uint32_t>(static_cast<uint32_t>(ck.stage));
  w.pod<uint32_t>(static_cast<uint32_t>(ck.epochs_done));
  w.pod<uint32_t>(static_cast<uint32_t>(ck.epochs_total));
  w.pod<int64_t>(ck.step);
  w.pod<uint64_t>(ck.config_hash);
  w.str(ck.meta.dump());
  w.str(ck.rng_state);
  w.pod<uint64_t>(ck.tensors.size());
  for (const auto& t : ck.tensors) {
    w.str(t.name);
    w.pod<uint8_t>(static_cast<uint8_t>(t.tensor.dtype()));
    w.pod<uint32_t>(static_cast<uint32_t>(t.tensor.dim()));
    for (int64_t d : t.tensor.shape()) w.pod<uint64_t>(static_cast<uint64_t>(d));
    if (t.tensor.dtype() == DType::kF32) {
      auto d = t.tensor.data<float>();
      w.raw(d.data(), d.size_bytes());
    } else {
      auto d = t.tensor.data<double>();
      w.raw(d.data(), d.size_bytes());
    }
  }
  std::string& buf = w.buffer();
  const uint64_t sum = fnv1a64(buf.data(), buf.size());
  buf.append(reinterpret_cast<const char*>(&sum), sizeof(sum));
  write_file_atomic(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  if (data.size() < 12 || std::memcmp(data.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint " + path + ": bad magic");
  }
  const size_t body = data.size() - sizeof(uint64_t);
  uint64_t stored;
  std::memcpy(&stored, data.data() + body, sizeof(stored));
  Reader r(data, body, path);
  r.take(4);
  const uint32_t version = r.pod<uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  if (fnv1a64(data.data(), body) != stored) throw FormatError("checkpoint " + path + ": checksum mismatch");
  Checkpoint ck;
  ck.stage = static_cast<int>(r.pod<uint32_t>());
  ck.epochs_done = static_cast<int>(r.pod<uint32_t>());
  ck.epochs_total = static_cast<int>(r.pod<uint32_t>());
  ck.step = r.pod<int64_t>();
  ck.config_hash = r.pod<uint64_t>();
  try {
    ck.meta = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path + ": bad metadata: " + e.what());
  }
  ck.rng_state = r.str();
  const uint64_t count = r.pod<uint64_t>();
  for (uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const uint8_t code = r.pod<uint8_t>();
    if (code > 1) throw FormatError("checkpoint " + path + ": bad dtype code for " + t.name);
    const uint32_t rank = r.pod<uint32_t>();
    if (rank > 8) throw FormatError("checkpoint " + path + ": bad rank for " + t.name);
    Shape shape;
    for (uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int64_t>(r.pod<uint64_t>()));
    const int64_t n = shape_numel(shape);
    if (code == 0) {
      std::vector<float> v(static_cast<size_t>(n));
      std::memcpy(v.data(), r.take(v.size() * sizeof(float)), v.size() * sizeof(float));
      t.tensor = Tensor::from_floats(shape, std::move(v));
    } else {
      const char* p = r.take(static_cast<size_t>(n) * sizeof(double));
      t.tensor = Tensor::zeros(shape, DType::kF64);
      std::memcpy(t.tensor.data<double>().data(), p, static_cast<size_t>(n) * sizeof(double));
    }
    t.trainable = false;
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("checkpoint " + path + ": trailing bytes");
  return ck;
}

void restore(const ParamList& params, const Checkpoint& ck) {
  std::unordered_map<std::string, const Tensor*> index;
  for (const auto& t : ck.tensors) index[t.name] = &t.tensor;
  for (const auto& p : params) {
    auto it = index.find(p.name);
    if (it == index.end()) throw FormatError("checkpoint lacks tensor " + p.name);
    const Tensor& src = *it->second;
    if (src.shape() != p.tensor.shape() || src.dtype() != p.tensor.dtype()) {
      throw FormatError("checkpoint tensor " + p.name + " is " + shape_str(src.shape()) + ", expected " +
                        shape_str(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    dst.copy_(src);
  }
}

std::string checkpoint_path(const std::string& dir, int stage) {
  return dir + "/stage" + std::to_string(stage) + ".ckpt";
}

Models load_models(const RunConfig& cfg, const std::string& path, Checkpoint* out) {
  Models m(cfg);
  Checkpoint ck = load_checkpoint(path);
  restore(m.all(), ck);
  if (out) *out = std::move(ck);
  return m;
}

// ---- plans ----------------------------------------------------------------------------------

StagePlan StagePlan::for_stage(int stage, const RunConfig& cfg) {
  StagePlan p;
  p.stage = stage;
  p.epochs = cfg.epochs(stage);
  p.batch_size = cfg.stage(stage).batch_size;
  p.lr = cfg.learning_rate(stage);
  switch (stage) {
    case 1:
      p.trainable = {"range_vae.", "range_disc."};
      break;
    case 2:
      p.trainable = {"range_net."};
      p.excluded = {"range_net.cross."};
      p.prerequisites = {1};
      break;
    case 3:
      p.trainable = {"image_vae.", "image_net."};
      p.excluded = {"image_net.cross."};
      p.prerequisites = {2};
      break;
    case 4:
      p.trainable = {"image_net."};
      p.excluded = {"image_net.cross."};
      p.variant = DataVariant::kShadowFree;
      p.recon = false;
      p.prerequisites = {3};
      break;
    case 5:
      p.trainable = {"image_net.", "range_net."};
      p.variant = DataVariant::kShadowFree;
      p.prerequisites = {2, 4};
      break;
    default:
      throw UsageError("stage must be in 1..5, got " + std::to_string(stage));
  }
  return p;
}

bool StagePlan::trains(const std::string& name) const {
  auto starts = [&](const std::string& pre) { return name.compare(0, pre.size(), pre) == 0; };
  return std::any_of(trainable.begin(), trainable.end(), starts) &&
         std::none_of(excluded.begin(), excluded.end(), starts);
}

// ---- data -----------------------------------------------------------------------------------

PreparedSample prepare_sample(const Sample& s, const Models& m, const RunConfig& cfg, DataVariant variant,
                              bool need_image, bool need_range) {
  NoGradGuard guard;
  const Calibration& calib = cfg.synth.calib;
  PreparedSample p;
  p.id = s.id;
  p.crop = crop_object(s.object_rgb, s.object_silhouette, kSemanticInput);
  if (need_image) {
    const Image& base = variant == DataVariant::kShadowed ? s.image : s.image_shadow_free;
    const Image pasted = paste_image(base, s.background, s.object_rgb, s.object_silhouette, s.mask_image);
    p.image.target = image_to_tensor(s.image);
    p.image.z_gt = m.image_vae.latent(p.image.target);
    p.image.z_pasted = m.image_vae.latent(image_to_tensor(pasted));
    p.image.h_p = concat({p.image.z_pasted, downsample_mask(mask_to_tensor(s.mask_image), kLatentDownsample)}, 1);
  }
  if (need_range) {
    const RangeImage pasted = paste_depth(s.background_range, s.object_depth, s.mask_range, calib, cfg.median_k);
    p.range.target = range_to_tensor(s.range);
    p.range.z_gt = m.range_vae.latent(p.range.target);
    p.range.z_pasted = m.range_vae.latent(range_to_tensor(pasted));
    p.range.h_p = concat({p.range.z_pasted, downsample_mask(mask_to_tensor(s.mask_range), kLatentDownsample)}, 1);
    p.maps = build_cross_maps({pasted}, calib);
  }
  return p;
}

// ---- stage runner ---------------------------------------------------------------------------

namespace {

std::vector<size_t> permutation(size_t n, uint64_t seed) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.integer(0, i - 1))]);
  return order;
}

Tensor q_sample_batch(const Tensor& x0, const std::vector<int>& ts, const Tensor& eps, const NoiseSchedule& s) {
  std::vector<Tensor> parts;
  for (size_t i = 0; i < ts.size(); ++i) {
    const auto k = static_cast<int64_t>(i);
    parts.push_back(q_sample(slice(x0, 0, k, 1), ts[i], slice(eps, 0, k, 1), s));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor predict_x0_batch(const Tensor& x_t, const Tensor& eps_hat, const std::vector<int>& ts, const NoiseSchedule& s) {
  std::vector<Tensor> parts;
  for (size_t i = 0; i < ts.size(); ++i) {
    const auto k = static_cast<int64_t>(i);
    parts.push_back(predict_x0(slice(x_t, 0, k, 1), slice(eps_hat, 0, k, 1), ts[i], s));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor cat0(const std::vector<Tensor>& parts) { return parts.size() == 1 ? parts[0] : concat(parts, 0); }

struct StepLoss {
  double recon = 0, refine = 0, kl = 0, adv = 0, total = 0;
};

// Mean-of-mu standard deviation over the training set, used to bring latents
// to roughly unit variance.
void calibrate_latent_scale(Vae& vae, const std::vector<Tensor>& inputs) {
  NoGradGuard guard;
  vae.set_latent_scale(1.0);
  double s = 0, s2 = 0;
  int64_t n = 0;
  for (const Tensor& x : inputs) {
    for (double v : vae.encode(x).mu.to_vector()) {
      s += v;
      s2 += v * v;
      ++n;
    }
  }
  const double mean = s / n;
  const double sd = std::sqrt(std::max(s2 / n - mean * mean, 1e-12));
  vae.set_latent_scale(1.0 / sd);
}

class StageRunner {
 public:
  StageRunner(int stage, const RunConfig& cfg, const std::vector<Sample>& train, const std::string& out,
              const StageOptions& opt)
      : plan_(StagePlan::for_stage(stage, cfg)), cfg_(cfg), train_(train), out_(out), opt_(opt), models_(cfg),
        sched_(make_schedule(cfg)), rng_(mix_seed(cfg.seed, 0x747261696eull + static_cast<uint64_t>(stage))) {}

  StageReport run() {
    if (train_.empty()) throw UsageError("training needs at least one train sample");
    make_dirs(out_);
    const std::string path = checkpoint_path(out_, plan_.stage);
    Checkpoint ck;
    bool resumed = false;
    if (opt_.resume && std::filesystem::exists(path)) {
      ck = load_checkpoint(path);
      resumed = !ck.complete() && ck.stage == plan_.stage;
    }
    if (!resumed) {
      ck = Checkpoint{};
      for (int pre : plan_.prerequisites) {
        const std::string p = checkpoint_path(out_, pre);
        if (!std::filesystem::exists(p)) {
          throw SequencingError("stage " + std::to_string(plan_.stage) + " requires the stage " + std::to_string(pre) +
                                " checkpoint (" + p + ")");
        }
        const Checkpoint pc = load_checkpoint(p);
        if (!pc.complete()) {
          throw SequencingError("stage " + std::to_string(pre) + " checkpoint " + p + " is incomplete");
        }
        if (pre == plan_.prerequisites.back()) ck = pc;
      }
      if (!plan_.prerequisites.empty()) {
        restore(models_.all(), ck);
        log("loaded " + checkpoint_path(out_, plan_.prerequisites.back()));
      }
    } else {
      restore(models_.all(), ck);
      rng_.set_state(ck.rng_state);
      log("resuming stage " + std::to_string(plan_.stage) + " after epoch " + std::to_string(ck.epochs_done));
    }

    const ParamList all = models_.all();
    enable_grads(all, false);
    setup_optimizers();
    for (auto* o : optimizers()) enable_grads(o->params(), true);
    if (resumed) {
      for (auto& [name, o] : named_optimizers()) {
        const Tensor* t = ck.find(name + "t");
        if (!t) throw FormatError("checkpoint lacks optimizer state " + name);
        o->import_state(ck.tensors, name, static_cast<int64_t>(t->item()));
      }
    }
    const uint64_t frozen_before = frozen_checksum();

    StageReport report;
    report.resumed = resumed;
    report.checkpoint = path;
    step_ = resumed ? ck.step : 0;
    int epoch = resumed ? ck.epochs_done : 0;
    prelude_done_ = resumed && ck.meta.value("prelude_done", false);

    if (plan_.stage == 3 && !prelude_done_) {
      image_vae_prelude();
      prelude_done_ = true;
      save(epoch);
    }
    prepare();

    std::ofstream csv(out_ + "/stage" + std::to_string(plan_.stage) + "_loss.csv",
                      resumed ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write loss log in " + out_);
    if (!resumed) csv << "step,stage,loss_recon,loss_refine,loss_kl,loss_adv\n";

    const int end = opt_.stop_after > 0 ? std::min(opt_.stop_after, plan_.epochs) : plan_.epochs;
    for (; epoch < end; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto order = permutation(train_.size(), mix_seed(cfg_.seed, 100000ull * plan_.stage + epoch));
      EpochLoss sum;
      int batches = 0;
      for (size_t b = 0; b < order.size(); b += plan_.batch_size) {
        std::vector<size_t> batch(order.begin() + b, order.begin() + std::min(order.size(), b + plan_.batch_size));
        const StepLoss l = train_step(batch, epoch);
        char row[256];
        std::snprintf(row, sizeof(row), "%lld,%d,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(step_), plan_.stage,
                      l.recon, l.refine, l.kl, l.adv);
        csv << row;
        sum.recon += l.recon;
        sum.refine += l.refine;
        sum.kl += l.kl;
        sum.adv += l.adv;
        ++batches;
        ++step_;
      }
      csv.flush();
      sum.recon /= batches;
      sum.refine /= batches;
      sum.kl /= batches;
      sum.adv /= batches;
      report.epochs.push_back(sum);
      if (epoch + 1 == plan_.epochs) finalize();
      save(epoch + 1);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char msg[256];
      std::snprintf(msg, sizeof(msg), "stage %d epoch %d/%d recon %.5f refine %.5f kl %.4f adv %.4f (%.1f s)",
                    plan_.stage, epoch + 1, plan_.epochs, sum.recon, sum.refine, sum.kl, sum.adv, secs);
      log(msg);
    }
    if (frozen_checksum() != frozen_before) throw NumericError("frozen parameters changed during training");
    report.steps = step_;
    return report;
  }

 private:
  void log(const std::string& s) const {
    if (opt_.log) opt_.log(s);
  }

  ParamList trainable_params(const std::string& prefix) const {
    ParamList out;
    for (const auto& p : models_.all()) {
      if (p.trainable && plan_.trains(p.name) && p.name.compare(0, prefix.size(), prefix) == 0) out.push_back(p);
    }
    return out;
  }

  void setup_optimizers() {
    const double clip = cfg_.clip_norm;
    switch (plan_.stage) {
      case 1:
        main_ = Adam(trainable_params("range_vae."), plan_.lr, clip);
        disc_ = Adam(trainable_params("range_disc."), plan_.lr, clip);
        break;
      case 3:
        vae_ = Adam(trainable_params("image_vae."), cfg_.image_vae_lr * cfg_.lr_scale, clip);
        main_ = Adam(trainable_params("image_net."), plan_.lr, clip);
        break;
      default:
        main_ = Adam(trainable_params(""), plan_.lr, clip);
    }
  }

  std::vector<Adam*> optimizers() {
    std::vector<Adam*> out{&main_};
    if (plan_.stage == 1) out.push_back(&disc_);
    if (plan_.stage == 3) out.push_back(&vae_);
    return out;
  }

  std::vector<std::pair<std::string, Adam*>> named_optimizers() {
    std::vector<std::pair<std::string, Adam*>> out{{"opt.main.", &main_}};
    if (plan_.stage == 1) out.emplace_back("opt.disc.", &disc_);
    if (plan_.stage == 3) out.emplace_back("opt.vae.", &vae_);
    return out;
  }

  uint64_t frozen_checksum() const {
    ParamList frozen;
    for (const auto& p : models_.all())
      if (!(p.trainable && plan_.trains(p.name)) && p.name.find("latent_scale") == std::string::npos) {
        frozen.push_back(p);
      }
    return params_checksum(frozen);
  }

  void save(int epochs_done) {
    Checkpoint ck;
    ck.stage = plan_.stage;
    ck.epochs_done = epochs_done;
    ck.epochs_total = plan_.epochs;
    ck.step = step_;
    ck.config_hash = cfg_.hash();
    ck.meta = {{"prelude_done", prelude_done_},
               {"schedule", {{"steps", cfg_.diffusion_steps}, {"beta_start", cfg_.beta_start}, {"beta_end", cfg_.beta_end}}},
               {"plan",
                {{"epochs", plan_.epochs},
                 {"batch_size", plan_.batch_size},
                 {"lr", plan_.lr},
                 {"trainable", plan_.trainable},
                 {"excluded", plan_.excluded},
                 {"variant", plan_.variant == DataVariant::kShadowed ? "shadowed" : "shadow-free"}}},
               {"config", cfg_.to_json()}};
    ck.rng_state = rng_.state();
    ck.tensors = models_.all();
    for (auto& [name, o] : named_optimizers()) o->export_state(ck.tensors, name);
    save_checkpoint(ck, checkpoint_path(out_, plan_.stage));
  }

  void image_vae_prelude() {
    std::vector<Tensor> images;
    for (const auto& s : train_) images.push_back(image_to_tensor(s.image));
    const int bs = plan_.batch_size;
    for (int epoch = 0; epoch < cfg_.image_vae_epochs; ++epoch) {
      const auto order = permutation(images.size(), mix_seed(cfg_.seed, 0x696d766165ull + epoch));
      double recon = 0;
      int n = 0;
      for (size_t b = 0; b < order.size(); b += bs) {
        std::vector<Tensor> xs;
        for (size_t i = b; i < std::min(order.size(), b + bs); ++i) xs.push_back(images[order[i]]);
        const VaeLoss l = vae_loss(models_.image_vae, cat0(xs), rng_, nullptr, false);
        require_finite(l.total.item(), {}, epoch);
        l.total.backward();
        vae_.step();
        recon += l.recon.item();
        ++n;
      }
      if ((epoch + 1) % 10 == 0 || epoch + 1 == cfg_.image_vae_epochs) {
        char msg[128];
        std::snprintf(msg, sizeof(msg), "image vae epoch %d/%d recon %.5f", epoch + 1, cfg_.image_vae_epochs, recon / n);
        log(msg);
      }
    }
    calibrate_latent_scale(models_.image_vae, images);
    enable_grads(vae_.params(), false);
  }

  void prepare() {
    if (plan_.stage == 1) {
      for (const auto& s : train_) ranges_.push_back(range_to_tensor(s.range));
      return;
    }
    const bool img = plan_.stage >= 3, rng = plan_.stage == 2 || plan_.stage == 5;
    for (const auto& s : train_) prepared_.push_back(prepare_sample(s, models_, cfg_, plan_.variant, img, rng));
  }

  void finalize() {
    if (plan_.stage == 1) calibrate_latent_scale(models_.range_vae, ranges_);
  }

  [[noreturn]] void fail_non_finite(const std::vector<size_t>& batch, int epoch, const std::string& what) {
    json dump = {{"stage", plan_.stage}, {"epoch", epoch}, {"step", step_}, {"loss", what}};
    json ids = json::array();
    for (size_t i : batch) ids.push_back(train_[i].id);
    dump["batch"] = ids;
    const std::string p = out_ + "/stage" + std::to_string(plan_.stage) + "_nan_dump.json";
    write_file_atomic(p, dump.dump(2));
    throw NumericError("non-finite " + what + " loss at stage " + std::to_string(plan_.stage) + " step " +
                       std::to_string(step_) + " (batch " + ids.dump() + "); dump written to " + p);
  }

  void require_finite(double v, const std::vector<size_t>& batch, int epoch, const std::string& what = "total") {
    if (!std::isfinite(v)) fail_non_finite(batch, epoch, what);
  }

  StepLoss train_step(const std::vector<size_t>& batch, int epoch) {
    return plan_.stage == 1 ? vae_step(batch, epoch) : plan_.stage == 5 ? joint_step(batch, epoch)
                                                                          : branch_step(batch, epoch);
  }

  StepLoss vae_step(const std::vector<size_t>& batch, int epoch) {
    std::vector<Tensor> xs;
    for (size_t i : batch) xs.push_back(ranges_[i]);
    const Tensor x = cat0(xs);
    const bool active = step_ >= cfg_.range_vae.adv_warmup;
    const VaeLoss l = vae_loss(models_.range_vae, x, rng_, &models_.range_disc, active);
    StepLoss out{l.recon.item(), 0, l.kl.item(), l.adv.item(), l.total.item()};
    require_finite(out.total, batch, epoch);
    l.total.backward();
    main_.step();
    disc_.zero_grad();
    if (active) {
      const Tensor d = hinge_d_loss(models_.range_disc(x), models_.range_disc(l.x_hat.detach()));
      require_finite(d.item(), batch, epoch, "discriminator");
      d.backward();
      disc_.step();
    }
    return out;
  }

  struct BranchBatch {
    Tensor z_gt, z_pasted, h_p, target, crop;
  };

  BranchBatch gather(const std::vector<size_t>& batch, bool range_branch) {
    std::vector<Tensor> zg, zp, hp, tg, cr;
    for (size_t i : batch) {
      const PreparedSample& p = prepared_[i];
      const BranchData& d = range_branch ? p.range : p.image;
      zg.push_back(d.z_gt);
      zp.push_back(d.z_pasted);
      hp.push_back(d.h_p);
      tg.push_back(d.target);
      cr.push_back(image_to_tensor(
          augment(p.crop, rng_, range_branch ? AugmentBranch::kRange : AugmentBranch::kImage, cfg_.augment_prob)));
    }
    return {cat0(zg), cat0(zp), cat0(hp), cat0(tg), cat0(cr)};
  }

  std::vector<int> draw_timesteps(size_t n) {
    std::vector<int> ts;
    for (size_t i = 0; i < n; ++i) ts.push_back(static_cast<int>(rng_.integer(1, sched_.steps())));
    return ts;
  }

  StepLoss branch_step(const std::vector<size_t>& batch, int epoch) {
    const bool range_branch = plan_.stage == 2;
    const Denoiser& net = range_branch ? models_.range_net : models_.image_net;
    const Vae& vae = range_branch ? models_.range_vae : models_.image_vae;
    const FeatureStages& features = range_branch ? static_cast<const FeatureStages&>(models_.range_features)
                                                 : models_.image_features;
    const BranchBatch b = gather(batch, range_branch);
    const std::vector<int> ts = draw_timesteps(batch.size());
    StepLoss out;
    Tensor total;
    if (plan_.recon) {
      const Tensor eps = Tensor::randn(b.z_gt.shape(), rng_);
      const Tensor pred = net(q_sample_batch(b.z_gt, ts, eps, sched_), ts, b.h_p, b.crop);
      total = recon_loss(pred, eps);
      out.recon = total.item();
      require_finite(out.recon, batch, epoch, "recon");
    }
    if (plan_.refine) {
      const Tensor eps = Tensor::randn(b.z_pasted.shape(), rng_);
      const Tensor z_t = q_sample_batch(b.z_pasted, ts, eps, sched_);
      const Tensor x0 = predict_x0_batch(z_t, net(z_t, ts, b.h_p, b.crop), ts, sched_);
      const Tensor refine = refine_loss(vae.decode_latent(x0), b.target, features);
      out.refine = refine.item();
      require_finite(out.refine, batch, epoch, "refine");
      total = plan_.recon ? branch_total(total, refine, cfg_.lambda_refine) : refine;
    }
    out.total = total.item();
    total.backward();
    main_.step();
    return out;
  }

  StepLoss joint_step(const std::vector<size_t>& batch, int epoch) {
    const BranchBatch bi = gather(batch, false);
    const BranchBatch br = gather(batch, true);
    CrossMaps maps;
    for (size_t i : batch) {
      for (const auto& m : prepared_[i].maps.image_to_range) maps.image_to_range.push_back(m);
      for (const auto& m : prepared_[i].maps.range_to_image) maps.range_to_image.push_back(m);
    }
    const std::vector<int> ts = draw_timesteps(batch.size());
    StepLoss out;

    const Tensor eps_i = Tensor::randn(bi.z_gt.shape(), rng_);
    const Tensor eps_r = Tensor::randn(br.z_gt.shape(), rng_);
    const JointInput recon_in{q_sample_batch(bi.z_gt, ts, eps_i, sched_), q_sample_batch(br.z_gt, ts, eps_r, sched_),
                              bi.h_p, br.h_p, bi.crop, br.crop};
    const JointEps e = joint_denoise(models_.image_net, models_.range_net, recon_in, ts, maps);
    const Tensor recon_c = recon_loss(e.image, eps_i), recon_r = recon_loss(e.range, eps_r);

    const Tensor pe_i = Tensor::randn(bi.z_pasted.shape(), rng_);
    const Tensor pe_r = Tensor::randn(br.z_pasted.shape(), rng_);
    const JointInput refine_in{q_sample_batch(bi.z_pasted, ts, pe_i, sched_),
                               q_sample_batch(br.z_pasted, ts, pe_r, sched_), bi.h_p, br.h_p, bi.crop, br.crop};
    const JointEps f = joint_denoise(models_.image_net, models_.range_net, refine_in, ts, maps);
    const Tensor refine_c = refine_loss(
        models_.image_vae.decode_latent(predict_x0_batch(refine_in.z_image, f.image, ts, sched_)), bi.target,
        models_.image_features);
    const Tensor refine_r = refine_loss(
        models_.range_vae.decode_latent(predict_x0_batch(refine_in.z_range, f.range, ts, sched_)), br.target,
        models_.range_features);
    out.recon = recon_c.item() + recon_r.item();
    out.refine = refine_c.item() + refine_r.item();
    require_finite(out.recon, batch, epoch, "recon");
    require_finite(out.refine, batch, epoch, "refine");
    const Tensor total = branch_total(recon_c, refine_c, cfg_.lambda_refine) +
                         branch_total(recon_r, refine_r, cfg_.lambda_refine);
    out.total = total.item();
    total.backward();
    main_.step();
    return out;
  }

  StagePlan plan_;
  const RunConfig& cfg_;
  const std::vector<Sample>& train_;
  std::string out_;
  StageOptions opt_;
  Models models_;
  NoiseSchedule sched_;
  Rng rng_;
  Adam main_, disc_, vae_;
  int64_t step_ = 0;
  bool prelude_done_ = false;
  std::vector<Tensor> ranges_;
  std::vector<PreparedSample> prepared_;
};

}  // namespace

StageReport run_stage(int stage, const RunConfig& cfg, const std::vector<Sample>& train, const std::string& out_dir,
                      const StageOptions& options) {
  StageRunner runner(stage, cfg, train, out_dir, options);
  return runner.run();
}

}  // namespace mted

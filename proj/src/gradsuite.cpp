#include "mted/gradsuite.hpp"

#include <chrono>
#include <cmath>

#include "mted/diffusion.hpp"
#include "mted/error.hpp"
#include "mted/networks.hpp"
#include "mted/rng.hpp"

namespace mted {

namespace {

constexpr DType kF64 = DType::kF64;

Tensor param(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor t = mul(Tensor::randn(s, rng, kF64), scale).detach();
  t.set_requires_grad(true);
  return t;
}

// Values kept away from zero so kinked ops are probed on smooth pieces.
Tensor away_from_zero(const Shape& s, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.2, 1.5);
  Tensor t = Tensor::from_vector(s, v, kF64);
  t.set_requires_grad(true);
  return t;
}

Tensor probe(const Tensor& y, uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Tensor::randn(y.shape(), rng, y.dtype())));
}

// Fractional references, a fifth of the cells invalid.
CorrespondenceMap random_map(int rows, int cols, int other_rows, int other_cols, uint64_t seed) {
  Rng rng(seed);
  CorrespondenceMap m(rows, cols);
  for (auto& c : m.cells) {
    c.valid = rng.uniform() >= 0.2;
    c.x = std::floor(rng.uniform(0, other_cols - 1)) + rng.uniform(0.2, 0.8);
    c.y = std::floor(rng.uniform(0, other_rows - 1)) + rng.uniform(0.2, 0.8);
    c.depth = 10;
  }
  return m;
}

void add_params(const ParamList& params, std::vector<Tensor>& wrt, std::vector<std::string>& names) {
  enable_grads(params, true);
  for (const auto& p : params) {
    if (!p.trainable) continue;
    wrt.push_back(p.tensor);
    names.push_back(p.name);
  }
}

struct Case {
  std::string name;
  double tolerance;
  std::function<GradCheckResult()> run;
};

GradCheckResult unary(Tensor (*op)(const Tensor&), bool positive, uint64_t seed) {
  Rng rng(seed);
  Tensor x = positive ? param({3, 4}, rng).detach() : away_from_zero({3, 4}, rng);
  if (positive) {
    x = add(abs(x), 0.3).detach();
    x.set_requires_grad(true);
  }
  return check_gradients([&] { return probe(op(x), seed + 1); }, {x}, {"x"});
}

template <class F>
GradCheckResult binary(F op, const Shape& sa, const Shape& sb, uint64_t seed, bool positive_b = false) {
  Rng rng(seed);
  Tensor a = param(sa, rng);
  Tensor b = param(sb, rng);
  if (positive_b) {
    b = add(abs(b), 0.5).detach();
    b.set_requires_grad(true);
  }
  return check_gradients([&] { return probe(op(a, b), seed + 1); }, {a, b}, {"a", "b"});
}

GradCheckResult denoiser_case(bool joint, bool image_branch) {
  Rng rng(31);
  DenoiserSpec spec;
  Denoiser img(spec, rng, kF64), rng_net(spec, rng, kF64);
  // move the gates and offsets off their zero init so every path carries gradient
  for (Denoiser* d : {&img, &rng_net}) {
    d->cross.alpha.set(0, 0.4);
    d->cross.offset.w.copy_(Tensor::randn(d->cross.offset.w.shape(), rng, kF64) * 0.05);
    d->cross.attn.w.copy_(Tensor::randn(d->cross.attn.w.shape(), rng, kF64) * 0.1);
  }
  const int batch = 1, ih = 8, iw = 8, rh = 4, rw = 8;
  JointInput in;
  in.z_image = param({batch, 4, ih, iw}, rng);
  in.z_range = param({batch, 4, rh, rw}, rng);
  in.hp_image = Tensor::randn({batch, 5, ih, iw}, rng, kF64);
  in.hp_range = Tensor::randn({batch, 5, rh, rw}, rng, kF64);
  in.hs_image = Tensor::uniform({batch, 3, 64, 64}, rng, 0, 1, kF64);
  in.hs_range = in.hs_image;
  CrossMaps maps;
  maps.image_to_range.push_back(random_map(ih / 2, iw / 2, rh / 2, rw / 2, 40));
  maps.range_to_image.push_back(random_map(rh / 2, rw / 2, ih / 2, iw / 2, 41));
  const std::vector<int> t{70};

  std::vector<Tensor> wrt{in.z_image, in.z_range};
  std::vector<std::string> names{"z_image", "z_range"};
  if (joint || image_branch) add_params(img.parameters("image."), wrt, names);
  if (joint || !image_branch) add_params(rng_net.parameters("range."), wrt, names);
  GradCheckOptions opts;
  opts.max_elements_per_tensor = 3;
  const Tensor wi = Tensor::randn(in.z_image.shape(), rng, kF64);
  const Tensor wr = Tensor::randn(in.z_range.shape(), rng, kF64);
  if (!joint) {
    const Denoiser& net = image_branch ? img : rng_net;
    if (image_branch) {
      wrt.erase(wrt.begin() + 1);
      names.erase(names.begin() + 1);
    } else {
      wrt.erase(wrt.begin());
      names.erase(names.begin());
    }
    return check_gradients(
        [&] {
          return image_branch ? sum(net(in.z_image, t, in.hp_image, in.hs_image) * wi)
                              : sum(net(in.z_range, t, in.hp_range, in.hs_range) * wr);
        },
        wrt, names, opts);
  }
  return check_gradients(
      [&] {
        const JointEps e = joint_denoise(img, rng_net, in, t, maps);
        return sum(e.image * wi) + sum(e.range * wr);
      },
      wrt, names, opts);
}

std::vector<Case> build_cases() {
  std::vector<Case> c;
  const double tol = kGradTolerance, stol = kGradToleranceSampling;
  c.push_back({"add", tol, [] { return binary([](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 4}, {4}, 1); }});
  c.push_back({"sub", tol, [] { return binary([](const Tensor& a, const Tensor& b) { return sub(a, b); }, {2, 1, 4}, {3, 1}, 2); }});
  c.push_back({"mul", tol, [] { return binary([](const Tensor& a, const Tensor& b) { return mul(a, b); }, {3, 4}, {3, 4}, 3); }});
  c.push_back({"div", tol, [] { return binary([](const Tensor& a, const Tensor& b) { return div(a, b); }, {3, 4}, {4}, 4, true); }});
  c.push_back({"scalar_ops", tol, [] {
                 Rng rng(5);
                 Tensor x = param({5}, rng);
                 return check_gradients([&] { return probe(neg(add(mul(x, 2.5), -0.7)), 6); }, {x}, {"x"});
               }});
  c.push_back({"exp", tol, [] { return unary(exp, false, 7); }});
  c.push_back({"log", tol, [] { return unary(log, true, 8); }});
  c.push_back({"tanh", tol, [] { return unary(tanh, false, 9); }});
  c.push_back({"sigmoid", tol, [] { return unary(sigmoid, false, 10); }});
  c.push_back({"silu", tol, [] { return unary(silu, false, 11); }});
  c.push_back({"relu", tol, [] { return unary(relu, false, 12); }});
  c.push_back({"abs", tol, [] { return unary(abs, false, 13); }});
  c.push_back({"square", tol, [] { return unary(square, false, 14); }});
  c.push_back({"sqrt", tol, [] { return unary(sqrt, true, 15); }});
  c.push_back({"reductions", tol, [] {
                 Rng rng(16);
                 Tensor x = param({3, 5}, rng);
                 return check_gradients([&] { return sum(square(x)) * mean(x); }, {x}, {"x"});
               }});
  c.push_back({"reshape_permute_transpose", tol, [] {
                 Rng rng(17);
                 Tensor x = param({2, 3, 4}, rng);
                 return check_gradients(
                     [&] { return probe(transpose(permute(reshape(x, {4, 3, 2}), {2, 0, 1})), 18); }, {x}, {"x"});
               }});
  c.push_back({"concat_slice", tol, [] {
                 Rng rng(19);
                 Tensor a = param({2, 3}, rng), b = param({2, 2}, rng);
                 return check_gradients([&] { return probe(slice(concat({a, b}, 1), 1, 1, 3), 20); }, {a, b}, {"a", "b"});
               }});
  c.push_back({"matmul", tol, [] {
                 Rng rng(21);
                 Tensor a = param({2, 3, 4}, rng), b = param({4, 5}, rng);
                 return check_gradients([&] { return probe(matmul(a, b), 22); }, {a, b}, {"a", "b"});
               }});
  c.push_back({"linear", tol, [] {
                 Rng rng(23);
                 Tensor x = param({3, 4}, rng), w = param({5, 4}, rng), b = param({5}, rng);
                 return check_gradients([&] { return probe(linear(x, w, b), 24); }, {x, w, b}, {"x", "w", "b"});
               }});
  c.push_back({"conv2d", tol, [] {
                 Rng rng(25);
                 Tensor x = param({2, 3, 6, 5}, rng), w = param({4, 3, 3, 3}, rng), b = param({4}, rng);
                 return check_gradients([&] { return probe(conv2d(x, w, b, 1, 1), 26); }, {x, w, b}, {"x", "w", "b"});
               }});
  c.push_back({"conv2d_stride2", tol, [] {
                 Rng rng(27);
                 Tensor x = param({1, 2, 8, 6}, rng), w = param({3, 2, 3, 3}, rng), b = param({3}, rng);
                 return check_gradients([&] { return probe(conv2d(x, w, b, 2, 1), 28); }, {x, w, b}, {"x", "w", "b"});
               }});
  c.push_back({"upsample2x", tol, [] {
                 Rng rng(29);
                 Tensor x = param({1, 2, 3, 4}, rng);
                 return check_gradients([&] { return probe(upsample2x(x), 30); }, {x}, {"x"});
               }});
  c.push_back({"softmax", tol, [] {
                 Rng rng(31);
                 Tensor x = param({3, 5}, rng);
                 return check_gradients([&] { return probe(softmax(x, 1), 32); }, {x}, {"x"});
               }});
  c.push_back({"bilinear_sample", stol, [] {
                 Rng rng(33);
                 Tensor f = param({3, 5, 6}, rng);
                 std::vector<double> pts;
                 for (int i = 0; i < 7; ++i) {
                   pts.push_back(std::floor(rng.uniform(0, 5)) + rng.uniform(0.2, 0.8));
                   pts.push_back(std::floor(rng.uniform(0, 4)) + rng.uniform(0.2, 0.8));
                 }
                 pts.push_back(-0.5);  // half outside: reads zero padding
                 pts.push_back(2.3);
                 Tensor p = Tensor::from_vector({8, 2}, pts, kF64);
                 p.set_requires_grad(true);
                 return check_gradients([&] { return probe(bilinear_sample(f, p), 34); }, {f, p}, {"featmap", "points"});
               }});
  c.push_back({"weighted_sum", tol, [] {
                 Rng rng(35);
                 Tensor w = param({3, 4}, rng), v = param({3, 4, 5}, rng);
                 return check_gradients([&] { return probe(weighted_sum(w, v), 36); }, {w, v}, {"weights", "values"});
               }});
  c.push_back({"cross_dattn", stol, [] {
                 Rng rng(37);
                 CrossModality cm(4, rng, kF64);
                 cm.offset.w.copy_(Tensor::randn(cm.offset.w.shape(), rng, kF64) * 0.05);
                 cm.attn.w.copy_(Tensor::randn(cm.attn.w.shape(), rng, kF64) * 0.3);
                 Tensor q = param({5, 4}, rng), other = param({4, 6, 7}, rng);
                 std::vector<double> r;
                 for (int i = 0; i < 5; ++i) {
                   r.push_back(std::floor(rng.uniform(1, 5)) + rng.uniform(0.3, 0.7));
                   r.push_back(std::floor(rng.uniform(1, 4)) + rng.uniform(0.3, 0.7));
                 }
                 const Tensor refs = Tensor::from_vector({5, 2}, r, kF64);
                 std::vector<Tensor> wrt{q, other};
                 std::vector<std::string> names{"query", "other"};
                 add_params(cm.parameters("cross."), wrt, names);
                 return check_gradients([&] { return probe(cm.dattn(q, other, refs, {1, 1, 0, 1, 1}), 38); }, wrt, names);
               }});
  c.push_back({"cross_update", stol, [] {
                 Rng rng(39);
                 CrossModality cm(4, rng, kF64);
                 cm.alpha.set(0, 0.3);
                 cm.offset.w.copy_(Tensor::randn(cm.offset.w.shape(), rng, kF64) * 0.05);
                 cm.attn.w.copy_(Tensor::randn(cm.attn.w.shape(), rng, kF64) * 0.3);
                 Tensor zs = param({1, 4, 3, 4}, rng), zo = param({1, 4, 4, 5}, rng);
                 const CorrespondenceMap map = random_map(3, 4, 4, 5, 40);
                 std::vector<Tensor> wrt{zs, zo};
                 std::vector<std::string> names{"z_self", "z_other"};
                 add_params(cm.parameters("cross."), wrt, names);
                 return check_gradients([&] { return probe(cm.update(zs, zo, {&map}), 41); }, wrt, names);
               }});
  c.push_back({"vae", tol, [] {
                 Rng rng(42);
                 VaeSpec spec;
                 spec.in_channels = 1;
                 spec.width1 = 4;
                 spec.width2 = 6;
                 Vae vae(spec, rng, kF64);
                 const Tensor x = Tensor::uniform({1, 1, 8, 8}, rng, 0, 1, kF64);
                 const Tensor eps = Tensor::randn({1, 4, 2, 2}, rng, kF64);
                 std::vector<Tensor> wrt;
                 std::vector<std::string> names;
                 add_params(vae.parameters("vae."), wrt, names);
                 GradCheckOptions opts;
                 opts.max_elements_per_tensor = 6;
                 return check_gradients(
                     [&] {
                       const Encoded e = vae.encode(x);
                       const Tensor z = e.mu + exp(e.logvar * 0.5) * eps;
                       return probe(vae.decode(z), 43) + kl_divergence(e.mu, e.logvar);
                     },
                     wrt, names, opts);
               }});
  c.push_back({"discriminator", tol, [] {
                 Rng rng(44);
                 Discriminator d(1, rng, kF64);
                 const Tensor real = Tensor::uniform({1, 1, 16, 16}, rng, 0, 1, kF64);
                 Tensor fake = param({1, 1, 16, 16}, rng);
                 std::vector<Tensor> wrt{fake};
                 std::vector<std::string> names{"fake"};
                 add_params(d.parameters("disc."), wrt, names);
                 GradCheckOptions opts;
                 opts.max_elements_per_tensor = 12;
                 // smooth surrogate of the hinge objective; the kinks would dominate
                 return check_gradients([&] { return mean(square(d(real) - 1.0)) + mean(square(d(fake) + 1.0)); },
                                        wrt, names, opts);
               }});
  c.push_back({"refine_loss", tol, [] {
                 Rng rng(45);
                 const FeatureExtractor fx(3, rng, kF64);
                 Tensor c_hat = Tensor::uniform({1, 3, 16, 16}, rng, 0, 1, kF64);
                 c_hat.set_requires_grad(true);
                 const Tensor c_gt = Tensor::uniform({1, 3, 16, 16}, rng, 0, 1, kF64);
                 GradCheckOptions opts;
                 opts.max_elements_per_tensor = 40;
                 return check_gradients([&] { return refine_loss(c_hat, c_gt, fx); }, {c_hat}, {"c_hat"}, opts);
               }});
  c.push_back({"image_denoiser", stol, [] { return denoiser_case(false, true); }});
  c.push_back({"range_denoiser", stol, [] { return denoiser_case(false, false); }});
  c.push_back({"joint_denoisers", stol, [] { return denoiser_case(true, true); }});
  return c;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> out;
  for (const auto& c : build_cases()) out.push_back(c.name);
  return out;
}

std::vector<GradSuiteEntry> run_gradcheck_suite(const std::string& only,
                                                const std::function<void(const GradSuiteEntry&)>& progress) {
  std::vector<GradSuiteEntry> out;
  for (const auto& c : build_cases()) {
    if (!only.empty() && c.name != only) continue;
    GradSuiteEntry e;
    e.name = c.name;
    e.tolerance = c.tolerance;
    const auto t0 = std::chrono::steady_clock::now();
    e.result = c.run();
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    e.passed = std::isfinite(e.result.worst_relative_error) && e.result.worst_relative_error <= e.tolerance;
    if (progress) progress(e);
    out.push_back(std::move(e));
  }
  if (out.empty()) throw UsageError("unknown gradcheck op '" + only + "'");
  return out;
}

}  // namespace mted

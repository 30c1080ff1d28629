// Acceptance gate: eight criteria, one PASS/FAIL line each. Exit status is
// nonzero when any criterion fails.
//
//   acceptance [--only 1,2,...] [--work DIR] [--reuse]
//
// --reuse keeps checkpoints already present in the work directory (the
// default retrains from scratch so the wall-clock budget is measured).

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mted/conditions.hpp"
#include "mted/config.hpp"
#include "mted/corpus.hpp"
#include "mted/diffusion.hpp"
#include "mted/editing.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"
#include "mted/geometry.hpp"
#include "mted/gradsuite.hpp"
#include "mted/metrics.hpp"
#include "mted/networks.hpp"
#include "mted/rng.hpp"
#include "mted/training.hpp"

using namespace mted;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Collects sub-checks; the criterion passes when all of them do.
struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& note) {
    pass = pass && ok;
    notes.push_back(ok ? note : note + " [FAILED]");
  }
  std::string joined() const {
    std::string s;
    for (const auto& n : notes) s += (s.empty() ? "" : "; ") + n;
    return s;
  }
};

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  const auto x = a.to_vector(), y = b.to_vector();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

std::string slurp(const fs::path& p) { return read_file(p.string()); }

// Same relative file set with identical bytes.
bool same_tree(const fs::path& a, const fs::path& b) {
  std::set<std::string> seen;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) return false;
    seen.insert(rel.string());
  }
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file() && !seen.count(fs::relative(e.path(), b).string())) return false;
  return !seen.empty();
}

// ---- 1: geometry ------------------------------------------------------------------------

Verdict geometry_suite() {
  Verdict v;
  const auto t0 = Clock::now();
  const Calibration calib = Calibration::toy_default();
  Rng rng(101);

  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const Vec3 p{rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-20, 20)};
    const Spherical s = cartesian_to_spherical(p);
    worst = std::max(worst, (spherical_to_cartesian(s.phi, s.theta, s.r) - p).norm());
  }
  v.check(worst <= 1e-9, fmt("round trip %.1e", worst));

  // one point per encode so the cell always keeps it
  const RangeGrid& g = calib.grid;
  double worst_phi = 0, worst_theta = 0, worst_r = 0;
  for (int i = 0; i < 10000; ++i) {
    const double phi = rng.uniform(g.phi_min, g.phi_max), theta = rng.uniform(g.theta_min, g.theta_max);
    const double r = rng.uniform(1, 60);
    const PointCloud back = decode_range(encode_range(PointCloud{{spherical_to_cartesian(phi, theta, r)}}, calib), calib);
    if (back.size() != 1) {
      worst_phi = worst_theta = std::numeric_limits<double>::infinity();
      break;
    }
    const Spherical s = cartesian_to_spherical(back.points[0]);
    worst_phi = std::max(worst_phi, std::abs(s.phi - phi) / (0.5 * g.dphi()));
    worst_theta = std::max(worst_theta, std::abs(s.theta - theta) / (0.5 * g.dtheta()));
    worst_r = std::max(worst_r, std::abs(s.r - r) / r);
  }
  v.check(worst_phi <= 1 + 1e-9 && worst_theta <= 1 + 1e-9 && worst_r <= 1e-6,
          fmt("decode(encode) %.3f / %.3f of a half bin", worst_phi, worst_theta));

  // homogeneous 3x4 matrix K [R | t], written out by hand
  double P[3][4];
  const double Km[3][3] = {{calib.K.fx, 0, calib.K.cx}, {0, calib.K.fy, calib.K.cy}, {0, 0, 1}};
  const double t[3] = {calib.t_CR.x, calib.t_CR.y, calib.t_CR.z};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) {
      P[r][c] = 0;
      for (int k = 0; k < 3; ++k) P[r][c] += Km[r][k] * (c < 3 ? calib.R_CR[k][c] : t[k]);
    }
  double worst_proj = 0;
  int projected = 0;
  for (int i = 0; i < 10000; ++i) {
    const double x[4] = {rng.uniform(-20, 20), rng.uniform(1, 60), rng.uniform(-3, 3), 1};
    double h[3] = {0, 0, 0};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) h[r] += P[r][c] * x[c];
    const Projection p = project_to_image({x[0], x[1], x[2]}, calib);
    if ((h[2] > 0) != p.valid) {
      worst_proj = std::numeric_limits<double>::infinity();
      break;
    }
    if (!p.valid) continue;
    ++projected;
    worst_proj = std::max({worst_proj, std::abs(p.u - h[0] / h[2]), std::abs(p.v - h[1] / h[2]), std::abs(p.d - h[2])});
  }
  v.check(worst_proj <= 1e-9 && projected > 1000, fmt("projection vs matrix %.1e", worst_proj));

  // stride-4 correspondence against window minimum + projection
  RangeImage ri(g.n_phi, g.n_theta);
  for (int r = 0; r < g.n_phi; ++r)
    for (int c = 0; c < g.n_theta; ++c)
      if (rng.uniform() < 0.8) ri.set(r, c, static_cast<float>(rng.uniform(2, 40)));
  const int s = 4;
  const CorrespondenceMap map = build_correspondence(ri, calib, s);
  int mismatches = 0, valid = 0;
  for (int i = 0; i < map.rows; ++i)
    for (int j = 0; j < map.cols; ++j) {
      float rmin = -1;
      for (int r = s * i - s / 2; r < s * i + s / 2; ++r)
        for (int c = s * j - s / 2; c < s * j + s / 2; ++c) {
          if (r < 0 || c < 0 || r >= g.n_phi || c >= g.n_theta || !ri.valid(r, c)) continue;
          if (rmin < 0 || ri.range(r, c) < rmin) rmin = ri.range(r, c);
        }
      const Correspondence& e = map.at(i, j);
      if (rmin < 0) {
        mismatches += e.valid;
        continue;
      }
      const Projection p =
          project_to_image(spherical_to_cartesian(g.phi_center(s * i), g.theta_center(s * j), rmin), calib);
      const bool inside = p.valid && p.u >= -0.5 && p.u < calib.image_width - 0.5 && p.v >= -0.5 &&
                          p.v < calib.image_height - 0.5;
      if (e.valid != inside) {
        ++mismatches;
        continue;
      }
      if (!inside) continue;
      ++valid;
      mismatches += !(e.x == p.u / s && e.y == p.v / s && e.depth == p.d);
    }
  v.check(mismatches == 0 && valid > 0, fmt("correspondence %d cells, %d mismatches", valid, mismatches));

  const double secs = seconds_since(t0);
  v.check(secs < 10, fmt("%.2f s < 10 s", secs));
  return v;
}

// ---- 2: gradients -----------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  const auto t0 = Clock::now();
  const auto entries = run_gradcheck_suite();
  int failed = 0;
  double worst_ratio = 0;
  std::string worst_name;
  for (const auto& e : entries) {
    failed += !e.passed;
    const double ratio = e.result.worst_relative_error / e.tolerance;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst_name = e.name;
    }
  }
  v.check(failed == 0, fmt("%zu checks, %d failed, worst %s at %.2g of tolerance", entries.size(), failed,
                           worst_name.c_str(), worst_ratio));
  const bool has_both = std::any_of(entries.begin(), entries.end(), [](auto& e) { return e.name == "image_denoiser"; }) &&
                        std::any_of(entries.begin(), entries.end(), [](auto& e) { return e.name == "range_denoiser"; });
  v.check(has_both, "both full denoisers covered");
  const double secs = seconds_since(t0);
  v.check(secs < 300, fmt("%.1f s < 300 s", secs));
  return v;
}

// ---- 3: diffusion statistics ------------------------------------------------------------

Verdict diffusion_statistics() {
  Verdict v;
  const auto t0 = Clock::now();
  const NoiseSchedule s = NoiseSchedule::linear();
  const int n = 10000;
  const std::vector<double> x0v = {-1.5, 0.0, 0.7, 2.0};
  const Tensor x0 = Tensor::from_vector({4}, x0v, DType::kF64);
  Rng rng(303);
  double worst_mean = 0, worst_var = 0;
  for (int t : {1, 50, 120, s.steps()}) {
    const double sa = std::sqrt(s.alpha_bar(t)), sd = std::sqrt(1 - s.alpha_bar(t));
    std::vector<double> sum(4, 0), sq(4, 0);
    for (int k = 0; k < n; ++k) {
      const Tensor x = q_sample(x0, t, Tensor::randn({4}, rng, DType::kF64), s);
      for (int i = 0; i < 4; ++i) {
        sum[i] += x.at(i);
        sq[i] += x.at(i) * x.at(i);
      }
    }
    for (int i = 0; i < 4; ++i) {
      const double m = sum[i] / n, var = sq[i] / n - m * m;
      worst_mean = std::max(worst_mean, std::abs(m - sa * x0v[i]) / (4 * sd / std::sqrt(n)));
      worst_var = std::max(worst_var, std::abs(var - sd * sd) / (sd * sd));
    }
  }
  v.check(worst_mean <= 1, fmt("mean at %.2f of 4 sigma/sqrt(N)", worst_mean));
  v.check(worst_var <= 0.05, fmt("variance off by %.2f%%", 100 * worst_var));

  const Tensor z0 = Tensor::randn({2, 4, 8, 8}, rng, DType::kF64);
  Tensor x = q_sample(z0, s.steps(), Tensor::randn(z0.shape(), rng, DType::kF64), s);
  const Tensor zero = Tensor::zeros(z0.shape(), DType::kF64);
  for (int t = s.steps(); t >= 1; --t) {
    const Tensor eps = (x - z0 * std::sqrt(s.alpha_bar(t))) * (1.0 / std::sqrt(1 - s.alpha_bar(t)));
    x = ddpm_step(x, eps, t, s, zero);
  }
  double worst = 0;
  for (int64_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(x.at(i) - z0.at(i)));
  v.check(worst <= 1e-3, fmt("oracle-noise trajectory error %.1e", worst));
  const double secs = seconds_since(t0);
  v.check(secs < 60, fmt("%.1f s < 60 s", secs));
  return v;
}

// ---- 4: zero-gate isolation -------------------------------------------------------------

CorrespondenceMap random_map(int rows, int cols, int other_rows, int other_cols, Rng& rng) {
  CorrespondenceMap m(rows, cols);
  for (auto& c : m.cells) {
    c.valid = rng.uniform() >= 0.2;
    c.x = rng.uniform(0, other_cols - 1);
    c.y = rng.uniform(0, other_rows - 1);
    c.depth = 10;
  }
  return m;
}

Verdict zero_gate_isolation() {
  Verdict v;
  Rng rng(404);
  const DenoiserSpec spec;
  Denoiser img(spec, rng), rng_net(spec, rng);
  for (Denoiser* d : {&img, &rng_net})
    for (const auto& p : d->cross.parameters()) {
      if (!p.trainable) continue;
      Tensor t = p.tensor;
      t.copy_(t + Tensor::randn(t.shape(), rng, t.dtype()) * 0.2);
    }
  img.cross.alpha.set(0, 0.0);
  rng_net.cross.alpha.set(0, 0.0);

  const int batch = 2;
  JointInput in;
  in.z_image = Tensor::randn({batch, 4, 16, 16}, rng);
  in.z_range = Tensor::randn({batch, 4, 8, 16}, rng);
  in.hp_image = Tensor::randn({batch, 5, 16, 16}, rng);
  in.hp_range = Tensor::randn({batch, 5, 8, 16}, rng);
  in.hs_image = Tensor::uniform({batch, 3, 64, 64}, rng, 0, 1);
  in.hs_range = Tensor::uniform({batch, 3, 64, 64}, rng, 0, 1);
  CrossMaps maps;
  for (int b = 0; b < batch; ++b) {
    maps.image_to_range.push_back(random_map(8, 8, 4, 8, rng));
    maps.range_to_image.push_back(random_map(4, 8, 8, 8, rng));
  }
  const std::vector<int> t = {37, 150};
  const JointEps base = joint_denoise(img, rng_net, in, t, maps);

  int image_moved = 0, range_moved = 0;
  for (int trial = 0; trial < 4; ++trial) {
    JointInput other = in;
    other.z_range = in.z_range + Tensor::randn(in.z_range.shape(), rng);
    other.hp_range = in.hp_range + Tensor::randn(in.hp_range.shape(), rng);
    other.hs_range = Tensor::uniform(in.hs_range.shape(), rng, 0, 1);
    image_moved += !bit_equal(joint_denoise(img, rng_net, other, t, maps).image, base.image);
    other = in;
    other.z_image = in.z_image + Tensor::randn(in.z_image.shape(), rng);
    other.hp_image = in.hp_image + Tensor::randn(in.hp_image.shape(), rng);
    other.hs_image = Tensor::uniform(in.hs_image.shape(), rng, 0, 1);
    range_moved += !bit_equal(joint_denoise(img, rng_net, other, t, maps).range, base.range);
  }
  v.check(image_moved == 0 && range_moved == 0,
          fmt("alpha = 0: %d/%d image, %d/%d range outputs moved", image_moved, 4, range_moved, 4));

  // sanity: the same perturbation does reach the image branch with the gate open
  img.cross.alpha.set(0, 0.5);
  JointInput other = in;
  other.z_range = in.z_range + Tensor::randn(in.z_range.shape(), rng);
  v.check(!bit_equal(joint_denoise(img, rng_net, other, t, maps).image, base.image), "open gate couples");

  int exact = 0;
  for (DType dt : {DType::kF32, DType::kF64}) {
    CrossModality cm(8, rng, dt);
    const Tensor q = Tensor::randn({6, 8}, rng, dt);
    const Tensor feat = Tensor::randn({8, 5, 7}, rng, dt);
    std::vector<double> refs;
    for (int i = 0; i < 6; ++i) {
      refs.push_back(rng.uniform(-0.5, 6.5));
      refs.push_back(rng.uniform(-0.5, 4.5));
    }
    const Tensor r = Tensor::from_vector({6, 2}, refs, dt);
    exact += bit_equal(cm.dattn(q, feat, r, std::vector<uint8_t>(6, 1)), cm.value(bilinear_sample(feat, r)));
  }
  v.check(exact == 2, "deformable attention at init = bilinear sample + value projection (f32, f64)");
  return v;
}

// ---- 5: metric oracles ------------------------------------------------------------------

double chamfer_loop(const PointCloud& a, const PointCloud& b) {
  auto directed = [](const PointCloud& p, const PointCloud& q) {
    double s = 0;
    for (const Vec3& x : p.points) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& y : q.points) best = std::min(best, std::sqrt((x - y).dot(x - y)));
      s += best;
    }
    return s / p.points.size();
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

double das_loop(const PointCloud& pc, const DepthMap& ref, const Calibration& calib, const Mask* mask) {
  double s = 0;
  int n = 0;
  for (const Vec3& p : pc.points) {
    const Vec3 c = calib.to_camera(p);
    if (c.z <= 0) continue;
    const long col = std::lround(calib.K.fx * c.x / c.z + calib.K.cx);
    const long row = std::lround(calib.K.fy * c.y / c.z + calib.K.cy);
    if (col < 0 || row < 0 || col >= ref.cols || row >= ref.rows) continue;
    if (mask && !mask->at(int(row), int(col))) continue;
    if (ref.at(int(row), int(col)) <= 0) continue;
    s += std::abs(c.z - ref.at(int(row), int(col)));
    ++n;
  }
  return s / n;
}

Vec3 back_project(const Calibration& calib, double col, double row, double z) {
  return calib.to_lidar({(col - calib.K.cx) / calib.K.fx * z, (row - calib.K.cy) / calib.K.fy * z, z});
}

Verdict metric_oracles() {
  Verdict v;
  Rng rng(505);
  const Calibration calib = Calibration::toy_default();
  double cd_err = 0;
  for (int trial = 0; trial < 10; ++trial) {
    PointCloud a, b;
    for (int i = 0; i < 200; ++i) {
      a.points.push_back({rng.uniform(-5, 5), rng.uniform(0, 10), rng.uniform(-1, 2)});
      b.points.push_back({rng.uniform(-5, 5), rng.uniform(0, 10), rng.uniform(-1, 2)});
    }
    cd_err = std::max(cd_err, std::abs(chamfer(a, b) - chamfer_loop(a, b)));
  }
  v.check(cd_err <= 1e-9, fmt("CD vs double loop %.1e", cd_err));

  DepthMap ref(calib.image_height, calib.image_width);
  for (int r = 8; r < ref.rows; ++r)
    for (int c = 0; c < ref.cols; ++c) ref.at(r, c) = static_cast<float>(6 + 0.05 * c + 0.3 * std::sin(0.2 * r));
  Mask mask(ref.rows, ref.cols);
  for (int r = 20; r < 50; ++r)
    for (int c = 10; c < 40; ++c) mask.at(r, c) = 1;
  double das_err = 0;
  for (int trial = 0; trial < 10; ++trial) {
    PointCloud pc;
    for (int i = 0; i < 200; ++i)
      pc.points.push_back(back_project(calib, rng.uniform(-3, 66), rng.uniform(-3, 66), rng.uniform(3, 15)));
    das_err = std::max({das_err, std::abs(das(pc, ref, calib) - das_loop(pc, ref, calib, nullptr)),
                        std::abs(das(pc, ref, calib, &mask) - das_loop(pc, ref, calib, &mask))});
  }
  v.check(das_err <= 1e-9, fmt("DAS vs double loop %.1e", das_err));

  double shift_err = 0;
  for (double delta : {0.1, 0.5, 2.0}) {
    PointCloud pc;
    for (int r = 8; r < ref.rows; r += 2)
      for (int c = 0; c < ref.cols; c += 2) pc.points.push_back(back_project(calib, c, r, ref.at(r, c) + delta));
    shift_err = std::max(shift_err, std::abs(das(pc, ref, calib) - delta));
  }
  v.check(shift_err <= 1e-5, fmt("shift delta -> DAS delta within %.1e", shift_err));
  return v;
}

// ---- 6 and 7: trained pipeline ----------------------------------------------------------

struct Pipeline {
  RunConfig cfg;
  std::vector<Sample> train, test;
  std::string dir;
  double train_seconds = 0;
  bool trained = false;
  std::string error;
};

Pipeline& pipeline(const std::string& work, bool reuse) {
  static Pipeline p;
  static bool done = false;
  if (done) return p;
  done = true;
  p.dir = work + "/pipeline";
  if (!reuse) fs::remove_all(p.dir);
  make_dirs(p.dir);
  const auto all = synth_corpus(p.cfg.seed, 64, 32, p.cfg.synth);
  for (const auto& s : all) (s.split == "train" ? p.train : p.test).push_back(s);
  StageOptions opt;
  opt.log = [](const std::string& line) {
    std::fprintf(stderr, "  %s\n", line.c_str());
  };
  const auto t0 = Clock::now();
  try {
    for (int k = 1; k <= 5; ++k) run_stage(k, p.cfg, p.train, p.dir, opt);
    p.trained = true;
  } catch (const std::exception& e) {
    p.error = e.what();
  }
  p.train_seconds = seconds_since(t0);
  return p;
}

double psnr_of(double mse) { return 10 * std::log10(1 / std::max(mse, 1e-20)); }

Verdict overfit_pipeline(const std::string& work, bool reuse) {
  Verdict v;
  Pipeline& p = pipeline(work, reuse);
  if (!p.trained) {
    v.check(false, "training failed: " + p.error);
    return v;
  }
  v.check(p.train_seconds <= 7200, fmt("stages 1-5 on %zu samples in %.0f s (budget 7200 s)%s", p.train.size(),
                                       p.train_seconds, reuse ? " (reused)" : ""));

  // (a) range VAE reconstruction through the deterministic latent path
  const Models m1 = load_models(p.cfg, checkpoint_path(p.dir, 1));
  double sum = 0, worst = 1e9;
  for (const Sample& s : p.train) {
    NoGradGuard ng;
    const Tensor x = range_to_tensor(s.range);
    const auto a = x.to_vector(), b = m1.range_vae.decode_latent(m1.range_vae.latent(x)).to_vector();
    double mse = 0;
    for (size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    const double db = psnr_of(mse / a.size());
    sum += db;
    worst = std::min(worst, db);
  }
  const double vae_db = sum / p.train.size();
  v.check(vae_db >= 25, fmt("(a) range VAE PSNR %.2f dB (worst %.2f) >= 25", vae_db, worst));

  // (b, c) held-in reconstructions against ground truth and a noise baseline
  const Models m = load_models(p.cfg, checkpoint_path(p.dir, 5));
  const RangeGrid& g = p.cfg.synth.calib.grid;
  double psnr_sum = 0, cd_sum = 0, noise_sum = 0;
  int n = 0;
  for (size_t i = 0; i < p.train.size(); ++i) {
    const Sample& s = p.train[i];
    const EditResult r = run_edit(reconstruction_request(s, 100 + i), m, p.cfg);
    psnr_sum += masked_psnr(r.image, s.image, s.mask_image);
    const PointCloud truth = range_points(s.range, g, &s.mask_range);
    cd_sum += chamfer(range_points(r.range, g, &s.mask_range), truth);

    // the sampler's starting point: a pure Gaussian latent, decoded and stitched
    Rng nr(mix_seed(500, i));
    EditResult noise;
    noise.decoded_image = r.decoded_image;
    const Shape latent{1, p.cfg.range_vae.latent_channels, g.n_phi / kLatentDownsample, g.n_theta / kLatentDownsample};
    noise.decoded_range = tensor_to_range(m.range_vae.decode_latent(Tensor::randn(latent, nr)));
    noise.mask_image = r.mask_image;
    noise.mask_range = r.mask_range;
    stitch(noise, s, EditMode::kMaskBounded);
    const PointCloud np = range_points(noise.range, g, &s.mask_range);
    noise_sum += np.empty() ? std::numeric_limits<double>::infinity() : chamfer(np, truth);
    ++n;
  }
  const double held_db = psnr_sum / n, cd = cd_sum / n, cd_noise = noise_sum / n;
  v.check(held_db >= 20, fmt("(b) held-in masked PSNR %.2f dB >= 20 over %d", held_db, n));
  v.check(cd * 10 <= cd_noise, fmt("(c) masked CD %.3f vs noise %.3f (%.1fx >= 10x)", cd, cd_noise, cd_noise / cd));
  return v;
}

Verdict directional_das(const std::string& work, bool reuse) {
  Verdict v;
  Pipeline& p = pipeline(work, reuse);
  if (!p.trained) {
    v.check(false, "training failed: " + p.error);
    return v;
  }
  const Models m = load_models(p.cfg, checkpoint_path(p.dir, 5));
  const Models off = m.with_gates_off();
  const Calibration& calib = p.cfg.synth.calib;
  v.check(m.image_net.cross.alpha.item() != 0 || m.range_net.cross.alpha.item() != 0,
          fmt("gates active (%.4f, %.4f)", m.image_net.cross.alpha.item(), m.range_net.cross.alpha.item()));
  double joint = 0, ablated = 0;
  int wins = 0;
  for (size_t i = 0; i < p.test.size(); ++i) {
    const Sample& s = p.test[i];
    const EditRequest req = reconstruction_request(s, 1000 + i);
    const DepthMap truth = oracle_depth(req, p.cfg);
    const EditResult a = run_edit(req, m, p.cfg, true);
    const EditResult b = run_edit(req, off, p.cfg, false);
    const double dj = das(range_points(a.range, calib.grid, &a.mask_range), truth, calib, &a.mask_image);
    const double da = das(range_points(b.range, calib.grid, &b.mask_range), truth, calib, &b.mask_image);
    joint += dj;
    ablated += da;
    wins += dj < da;
  }
  const double n = static_cast<double>(p.test.size());
  v.check(p.test.size() >= 32, fmt("%zu test edits", p.test.size()));
  v.check(joint / n < ablated / n, fmt("mean DAS joint %.4f m vs independent %.4f m (gap %.2e m, joint better on %d)",
                                       joint / n, ablated / n, ablated / n - joint / n, wins));
  return v;
}

// ---- 8: determinism and formats ---------------------------------------------------------

RunConfig small_config() {
  RunConfig cfg;
  cfg.image_vae.width1 = cfg.image_vae.width2 = 8;
  cfg.range_vae.width1 = cfg.range_vae.width2 = 8;
  cfg.denoiser.width1 = 8;
  cfg.denoiser.width2 = 16;
  cfg.denoiser.time_dim = cfg.denoiser.time_hidden = 16;
  cfg.diffusion_steps = 30;
  return cfg;
}

Verdict determinism_and_formats(const std::string& work) {
  Verdict v;
  const fs::path dir = fs::path(work) / "formats";
  fs::remove_all(dir);
  make_dirs(dir.string());
  const RunConfig cfg = small_config();

  const auto samples = synth_corpus(7, 4, 2, cfg.synth);
  write_corpus(synth_corpus(7, 4, 2, cfg.synth), (dir / "synth_a").string(), cfg.synth, 7);
  write_corpus(samples, (dir / "synth_b").string(), cfg.synth, 7);
  v.check(same_tree(dir / "synth_a", dir / "synth_b"), "synth rerun byte-identical");

  // corpus round trip: read back, compare, write again
  const CorpusReader reader((dir / "synth_a").string());
  const auto back = reader.read_all();
  bool same = back.size() == samples.size();
  for (size_t i = 0; same && i < back.size(); ++i) {
    const Sample &a = back[i], &b = samples[i];
    same = a.id == b.id && a.pose == b.pose && a.image == b.image && a.image_shadow_free == b.image_shadow_free &&
           a.background == b.background && a.range == b.range && a.background_range == b.background_range &&
           a.depth == b.depth && a.mask_image == b.mask_image && a.mask_range == b.mask_range &&
           a.object_rgb == b.object_rgb;
  }
  write_corpus(back, (dir / "synth_c").string(), cfg.synth, 7);
  v.check(same && same_tree(dir / "synth_a", dir / "synth_c"), "corpus round trip bit-exact");

  // edits with the same seed
  const Models m(cfg);
  std::vector<EditRequest> reqs;
  for (const Sample& s : samples)
    if (s.split == "test") reqs.push_back(reconstruction_request(s, 42));
  auto run_all = [&](const std::string& name) {
    std::vector<EditResult> rs;
    for (const auto& r : reqs) rs.push_back(run_edit(r, m, cfg));
    write_edits(reqs, rs, cfg, (dir / name).string(), {{"checkpoint", "untrained"}});
  };
  run_all("edit_a");
  run_all("edit_b");
  v.check(same_tree(dir / "edit_a", dir / "edit_b"), "edit rerun byte-identical");

  // checkpoint round trip
  Checkpoint ck;
  ck.stage = 3;
  ck.epochs_done = 2;
  ck.epochs_total = 5;
  ck.step = 77;
  ck.config_hash = cfg.hash();
  ck.meta = {{"note", "round trip"}};
  ck.rng_state = "state";
  ck.tensors = m.all();
  const std::string ck_a = (dir / "a.ckpt").string(), ck_b = (dir / "b.ckpt").string();
  save_checkpoint(ck, ck_a);
  const Checkpoint got = load_checkpoint(ck_a);
  bool tensors_same = got.tensors.size() == ck.tensors.size();
  for (size_t i = 0; tensors_same && i < got.tensors.size(); ++i) {
    // trainability belongs to the model, not the file
    tensors_same = got.tensors[i].name == ck.tensors[i].name && bit_equal(got.tensors[i].tensor, ck.tensors[i].tensor);
  }
  save_checkpoint(got, ck_b);
  v.check(tensors_same && got.step == 77 && got.meta == ck.meta && slurp(ck_a) == slurp(ck_b),
          fmt("checkpoint round trip bit-exact (%zu tensors)", got.tensors.size()));

  // kill a writer mid-save; the final path must always hold a whole checkpoint
  Rng rng(808);
  Checkpoint old_ck, big;
  old_ck.stage = 1;
  old_ck.tensors = {{"w", Tensor::randn({4, 4}, rng), true}};
  big.stage = 2;
  big.tensors = {{"w", Tensor::randn({24, 1024, 1024}, rng), true}};
  const std::string final_path = (dir / "interrupted.ckpt").string();
  int killed = 0, intact = 0, trials = 0;
  for (int delay_ms : {2, 10, 30, 60, 120, 250}) {
    save_checkpoint(old_ck, final_path);
    std::fflush(nullptr);
    const pid_t pid = fork();
    if (pid == 0) {
      save_checkpoint(big, final_path);
      _exit(0);
    }
    usleep(static_cast<useconds_t>(delay_ms) * 1000);
    kill(pid, SIGKILL);
    int status = 0;
    waitpid(pid, &status, 0);
    killed += WIFSIGNALED(status);
    ++trials;
    try {
      const Checkpoint after = load_checkpoint(final_path);
      intact += after.stage == 1 || (after.stage == 2 && bit_equal(after.tensors.at(0).tensor, big.tensors[0].tensor));
    } catch (const Error&) {
    }
  }
  v.check(killed > 0 && intact == trials,
          fmt("interrupted saves: %d of %d writers killed, final path intact %d/%d", killed, trials, intact, trials));
  fs::remove_all(dir);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "mted_acceptance").string();
  bool reuse = false;
  app.add_option("--only", only, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 8));
  app.add_option("--work", work, "Working directory");
  app.add_flag("--reuse", reuse, "Keep existing checkpoints");
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "geometry suite", geometry_suite},
      {2, "gradient suite", gradient_suite},
      {3, "diffusion statistics", diffusion_statistics},
      {4, "zero-gate isolation", zero_gate_isolation},
      {5, "metric oracles", metric_oracles},
      {6, "overfit pipeline", [&] { return overfit_pipeline(work, reuse); }},
      {7, "joint vs independent DAS", [&] { return directional_das(work, reuse); }},
      {8, "determinism and formats", [&] { return determinism_and_formats(work); }},
  };

  make_dirs(work);
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.check(false, std::string("threw: ") + e.what());
    }
    failed += !v.pass;
    std::printf("%s  criterion %d  %-26s %s  (%.1f s)\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.joined().c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%s\n", failed == 0 ? "all criteria passed" : fmt("%d criterion/criteria failed", failed).c_str());
  return failed == 0 ? 0 : 1;
}

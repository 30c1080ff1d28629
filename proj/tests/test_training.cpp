#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "mted/config.hpp"
#include "mted/corpus.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"
#include "mted/training.hpp"

using namespace mted;
namespace fs = std::filesystem;

namespace {

std::string scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mted_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  const auto x = a.to_vector(), y = b.to_vector();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

// Small widths so a whole stage runs in a second or two.
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 5;
  cfg.image_vae.width1 = 8;
  cfg.image_vae.width2 = 8;
  cfg.range_vae.width1 = 8;
  cfg.range_vae.width2 = 8;
  cfg.denoiser.width1 = 8;
  cfg.denoiser.width2 = 16;
  cfg.denoiser.time_dim = 16;
  cfg.denoiser.time_hidden = 16;
  cfg.diffusion_steps = 50;
  for (auto& s : cfg.stages) s.epochs = 2;
  cfg.stage_epoch_scale.fill(1.0);
  cfg.image_vae_epochs = 1;
  return cfg;
}

const std::vector<Sample>& tiny_corpus() {
  static const std::vector<Sample> samples = synth_corpus(11, 3, 0, RunConfig().synth);
  return samples;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

std::vector<double> csv_column(const std::string& path, int col) {
  std::vector<double> out;
  const auto lines = read_lines(path);
  for (size_t i = 1; i < lines.size(); ++i) {
    std::stringstream ss(lines[i]);
    std::string cell;
    for (int k = 0; k <= col; ++k) std::getline(ss, cell, ',');
    out.push_back(std::stod(cell));
  }
  return out;
}

StageOptions quiet(int stop_after = 0) {
  StageOptions o;
  o.stop_after = stop_after;
  return o;
}

}  // namespace

TEST_CASE("reference schedule values") {
  const RunConfig cfg;
  const int epochs[] = {40, 100, 40, 160, 60};
  const int batch[] = {2, 2, 2, 2, 1};
  const double lr[] = {4.5e-5, 4.0e-5, 1.0e-5, 1.0e-5, 2.0e-5};
  for (int k = 1; k <= 5; ++k) {
    CHECK(cfg.stage(k).epochs == epochs[k - 1]);
    CHECK(cfg.stage(k).batch_size == batch[k - 1]);
    CHECK(cfg.stage(k).lr == lr[k - 1]);
    CHECK(cfg.learning_rate(k) == doctest::Approx(lr[k - 1] * cfg.lr_scale));
  }
  CHECK(cfg.lambda_refine == 0.01);
  CHECK(cfg.augment_prob == 0.2);
  CHECK(cfg.range_vae.adv_warmup == 1000);
  CHECK(cfg.range_vae.adversarial);
  CHECK_FALSE(cfg.image_vae.adversarial);
  CHECK_THROWS_AS(cfg.stage(0), UsageError);
  CHECK_THROWS_AS(cfg.stage(6), UsageError);
}

TEST_CASE("config json round trip, overrides and strictness") {
  RunConfig cfg;
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.hash() == cfg.hash());

  nlohmann::json j = nlohmann::json::object();
  apply_overrides(j, {"training.stages.4.epochs=3", "seed=9", "training.lambda_refine=0.5"});
  const RunConfig o = RunConfig::from_json(j);
  CHECK(o.stage(4).epochs == 3);
  CHECK(o.stage(3).epochs == 40);
  CHECK(o.seed == 9);
  CHECK(o.lambda_refine == 0.5);
  CHECK(o.hash() != cfg.hash());

  CHECK_THROWS_AS(RunConfig::from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"training", {{"lamda_refine", 0.1}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"editing", {{"median_k", 4}}}}), ConfigError);
  nlohmann::json bad = nlohmann::json::object();
  CHECK_THROWS_AS(apply_overrides(bad, {"no_equals_sign"}), UsageError);
}

TEST_CASE("per-stage epoch multiplier") {
  nlohmann::json j = nlohmann::json::object();
  CHECK(RunConfig().epochs(1) == 1920);
  CHECK(RunConfig().epochs(2) == 300);
  CHECK(RunConfig().epochs(3) == 40);

  apply_overrides(j, {"training.stage_epoch_scale=[3,1,1,0.5,1]", "training.epoch_scale=0.5"});
  const RunConfig c = RunConfig::from_json(j);
  CHECK(c.epochs(1) == 60);  // 40 * 0.5 * 3
  CHECK(c.epochs(2) == 50);
  CHECK(c.epochs(4) == 40);
  CHECK(c.stage(1).epochs == 40);  // the schedule itself is untouched
  CHECK(RunConfig::from_json(c.to_json()).hash() == c.hash());

  CHECK_THROWS_AS(RunConfig::from_json({{"training", {{"stage_epoch_scale", {1, 1}}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"training", {{"stage_epoch_scale", {1, 1, 0, 1, 1}}}}}), ConfigError);
}

TEST_CASE("augmentation examples") {
  Image img(8, 8, 3, 0.5f);
  img.at(2, 3, 0) = 0.9f;

  SUBCASE("all draws above p leave the crop untouched") {
    Rng rng(3);
    CHECK(augment(img, rng, AugmentBranch::kImage, 0.0).data == img.data);
    CHECK(augment(img, rng, AugmentBranch::kRange, 0.0).data == img.data);
  }
  SUBCASE("brightness +0.2 maps 0.5 to 0.7") {
    const Image out = adjust_brightness_contrast(img, 0.2, 0.0);
    CHECK(out.at(0, 0, 1) == 0.7f);
    CHECK(adjust_brightness_contrast(img, 0.0, 0.0).data == img.data);
    // contrast stretches about 0.5, clamped to [0, 1]
    CHECK(adjust_brightness_contrast(img, 0.0, 0.2).at(2, 3, 0) == doctest::Approx(0.98f));
    CHECK(adjust_brightness_contrast(img, 0.6, 0.0).at(2, 3, 0) == 1.0f);
  }
  SUBCASE("zero rotation is the identity") {
    const Image out = rotate_image(img, 0.0);
    for (size_t i = 0; i < img.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(img.data[i]).epsilon(1e-6));
  }
  SUBCASE("rotation by 90 degrees moves a corner pixel") {
    Image dot(5, 5, 3, 0.0f);
    dot.at(0, 2, 0) = 1.0f;
    const Image out = rotate_image(dot, 90.0);
    double peak = 0;
    int pr = -1, pc = -1;
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c)
        if (out.at(r, c, 0) > peak) peak = out.at(r, c, 0), pr = r, pc = c;
    CHECK(peak == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(pr == 2);
    CHECK((pc == 0 || pc == 4));
  }
  SUBCASE("box blur preserves a constant image") {
    Image flat(6, 6, 3, 0.3f);
    const Image out = box_blur3(flat);
    for (float v : out.data) CHECK(v == doctest::Approx(0.3f));
  }
  SUBCASE("p = 1 always transforms; the range branch only rotates") {
    Rng a(4), b(4);
    const Image full = augment(img, a, AugmentBranch::kImage, 1.0);
    CHECK(full.data != img.data);
    // range branch consumes two draws (gate + angle)
    augment(img, b, AugmentBranch::kRange, 1.0);
    Rng c(4);
    c.uniform();
    c.uniform();
    CHECK(b.uniform() == c.uniform());
  }
  SUBCASE("firing frequency matches p") {
    Rng rng(8);
    int fired = 0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
      if (augment(img, rng, AugmentBranch::kRange, 0.2).data != img.data) ++fired;
    }
    // 0.2 +- 4 sigma
    CHECK(std::abs(fired / double(n) - 0.2) < 4 * std::sqrt(0.16 / n));
  }
}

TEST_CASE("adam minimises a quadratic and clips the global norm") {
  Tensor w = Tensor::from_vector({3}, {4.0, -2.0, 1.0}, DType::kF64);
  w.set_requires_grad(true);
  Adam opt({{"w", w}}, 0.1, 1.0);
  double first_norm = 0;
  for (int i = 0; i < 300; ++i) {
    const Tensor loss = sum(w * w);
    loss.backward();
    const double n = opt.step();
    if (i == 0) first_norm = n;
  }
  CHECK(first_norm == doctest::Approx(2 * std::sqrt(21.0)));
  for (double v : w.to_vector()) CHECK(std::abs(v) < 0.05);
  CHECK(opt.steps_taken() == 300);
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("adam state export and import resume identically") {
  auto make = [] {
    Tensor w = Tensor::from_vector({2}, {1.0, 2.0}, DType::kF64);
    w.set_requires_grad(true);
    return w;
  };
  auto run = [](Adam& opt, Tensor& w, int n) {
    for (int i = 0; i < n; ++i) {
      (sum(w * w * w)).backward();
      opt.step();
    }
  };
  Tensor a = make();
  Adam oa({{"w", a}}, 0.05, 10.0);
  run(oa, a, 6);

  Tensor b = make();
  Adam ob({{"w", b}}, 0.05, 10.0);
  run(ob, b, 3);
  ParamList state;
  ob.export_state(state, "opt.");
  Tensor c = b.detach();
  c = Tensor::from_vector({2}, c.to_vector(), DType::kF64);
  c.set_requires_grad(true);
  Adam oc({{"w", c}}, 0.05, 10.0);
  oc.import_state(state, "opt.", 3);
  run(oc, c, 3);
  CHECK(bit_equal(a.detach(), c.detach()));
}

TEST_CASE("checkpoint round trip and corruption") {
  const std::string dir = scratch("ckpt");
  Checkpoint ck;
  ck.stage = 2;
  ck.epochs_done = 3;
  ck.epochs_total = 5;
  ck.step = 42;
  ck.config_hash = 0x1234abcdull;
  ck.meta = {{"k", "v"}};
  ck.rng_state = "rng state";
  Rng rng(1);
  ck.tensors.push_back({"a.w", Tensor::randn({2, 3}, rng), false});
  ck.tensors.push_back({"b", Tensor::randn({4}, rng, DType::kF64), false});
  ck.tensors.push_back({"s", Tensor::scalar(2.5, DType::kF64), false});
  const std::string path = dir + "/x.ckpt";
  save_checkpoint(ck, path);

  // only the final file remains
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    CHECK(e.path().filename() == "x.ckpt");
    ++files;
  }
  CHECK(files == 1);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.stage == 2);
  CHECK(back.epochs_done == 3);
  CHECK(back.epochs_total == 5);
  CHECK_FALSE(back.complete());
  CHECK(back.step == 42);
  CHECK(back.config_hash == 0x1234abcdull);
  CHECK(back.meta == ck.meta);
  CHECK(back.rng_state == "rng state");
  REQUIRE(back.tensors.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(bit_equal(back.tensors[i].tensor, ck.tensors[i].tensor));
  }
  CHECK(back.find("b") != nullptr);
  CHECK(back.find("missing") == nullptr);

  const std::string bytes = read_file(path);
  SUBCASE("flipped payload byte") {
    std::string bad = bytes;
    bad[bad.size() / 2] ^= 0x5a;
    write_file_atomic(dir + "/bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), FormatError);
  }
  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    write_file_atomic(dir + "/bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), FormatError);
  }
  SUBCASE("unknown version") {
    std::string bad = bytes;
    bad[4] = 9;
    write_file_atomic(dir + "/bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), FormatError);
  }
  SUBCASE("truncated") {
    write_file_atomic(dir + "/bad.ckpt", bytes.substr(0, bytes.size() - 20));
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(dir + "/nope.ckpt"), IoError); }
  SUBCASE("restore checks names and shapes") {
    Tensor w = Tensor::zeros({2, 3});
    restore({{"a.w", w}}, back);
    CHECK(bit_equal(w, ck.tensors[0].tensor));
    Tensor wrong = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(restore({{"a.w", wrong}}, back), FormatError);
    CHECK_THROWS_AS(restore({{"zzz", wrong}}, back), FormatError);
  }
}

TEST_CASE("stage plans") {
  const RunConfig cfg;
  const StagePlan p1 = StagePlan::for_stage(1, cfg);
  CHECK(p1.trains("range_vae.enc1.w"));
  CHECK(p1.trains("range_disc.c0.w"));
  CHECK_FALSE(p1.trains("image_vae.enc1.w"));
  CHECK(p1.prerequisites.empty());

  const StagePlan p2 = StagePlan::for_stage(2, cfg);
  CHECK(p2.trains("range_net.block1a.w"));
  CHECK_FALSE(p2.trains("range_net.cross.alpha"));
  CHECK_FALSE(p2.trains("range_vae.enc1.w"));

  const StagePlan p4 = StagePlan::for_stage(4, cfg);
  CHECK_FALSE(p4.recon);
  CHECK(p4.refine);
  CHECK(p4.variant == DataVariant::kShadowFree);
  CHECK(StagePlan::for_stage(3, cfg).variant == DataVariant::kShadowed);

  const StagePlan p5 = StagePlan::for_stage(5, cfg);
  CHECK(p5.trains("image_net.cross.alpha"));
  CHECK(p5.trains("range_net.cross.alpha"));
  CHECK_FALSE(p5.trains("image_vae.dec1.w"));
  CHECK(p5.prerequisites == std::vector<int>{2, 4});
  CHECK(p5.batch_size == 1);
  CHECK_THROWS_AS(StagePlan::for_stage(6, cfg), UsageError);

  // every trainable parameter a stage names actually exists
  const Models m(tiny_config());
  for (int k = 1; k <= 5; ++k) {
    const StagePlan p = StagePlan::for_stage(k, cfg);
    int n = 0;
    for (const auto& q : m.all()) n += q.trainable && p.trains(q.name);
    CHECK(n > 0);
  }
}

TEST_CASE("stage sequencing") {
  const RunConfig cfg = tiny_config();
  const std::string dir = scratch("seq");
  CHECK_THROWS_AS(run_stage(2, cfg, tiny_corpus(), dir, quiet()), SequencingError);
  CHECK_THROWS_AS(run_stage(5, cfg, tiny_corpus(), dir, quiet()), SequencingError);

  // an incomplete prerequisite does not count
  run_stage(1, cfg, tiny_corpus(), dir, quiet(1));
  CHECK_THROWS_AS(run_stage(2, cfg, tiny_corpus(), dir, quiet()), SequencingError);
  run_stage(1, cfg, tiny_corpus(), dir, quiet());
  CHECK(load_checkpoint(checkpoint_path(dir, 1)).complete());
  run_stage(2, cfg, tiny_corpus(), dir, quiet());
  // stage 5 also needs stage 4
  CHECK_THROWS_AS(run_stage(5, cfg, tiny_corpus(), dir, quiet()), SequencingError);
  CHECK_THROWS_AS(run_stage(3, cfg, {}, dir, quiet()), UsageError);
}

TEST_CASE("full pipeline on a tiny corpus: isolation, logs, gates") {
  const RunConfig cfg = tiny_config();
  const std::string dir = scratch("pipe");
  for (int k = 1; k <= 5; ++k) {
    const StageReport r = run_stage(k, cfg, tiny_corpus(), dir, quiet());
    CHECK(r.epochs.size() == 2);
    CHECK_FALSE(r.resumed);
    const auto lines = read_lines(dir + "/stage" + std::to_string(k) + "_loss.csv");
    REQUIRE(lines.size() >= 2);
    CHECK(lines[0] == "step,stage,loss_recon,loss_refine,loss_kl,loss_adv");
    const int batches = (3 + cfg.stage(k).batch_size - 1) / cfg.stage(k).batch_size;
    CHECK(lines.size() == size_t(1 + 2 * batches));
  }
  std::vector<Checkpoint> ck(6);
  for (int k = 1; k <= 5; ++k) ck[k] = load_checkpoint(checkpoint_path(dir, k));

  // parameters outside a stage's trainable set are bit-identical to its
  // predecessor checkpoint
  const int prev[] = {0, 0, 1, 2, 3, 4};
  for (int k = 2; k <= 5; ++k) {
    const StagePlan p = StagePlan::for_stage(k, cfg);
    int frozen = 0, moved = 0;
    for (const auto& t : ck[prev[k]].tensors) {
      if (t.name.rfind("opt.", 0) == 0) continue;
      const Tensor* now = ck[k].find(t.name);
      REQUIRE(now != nullptr);
      const bool same = bit_equal(*now, t.tensor);
      if (p.trains(t.name) || (k == 3 && t.name.rfind("image_vae.", 0) == 0)) {
        moved += !same;
      } else {
        ++frozen;
        if (!same) FAIL_CHECK("stage " << k << " changed " << t.name);
      }
    }
    CHECK(frozen > 0);
    CHECK(moved > 0);
  }

  // gates are still exactly zero until stage 5 and move in stage 5
  for (int k = 1; k <= 4; ++k) {
    CHECK(ck[k].find("image_net.cross.alpha")->to_vector()[0] == 0.0);
    CHECK(ck[k].find("range_net.cross.alpha")->to_vector()[0] == 0.0);
  }
  CHECK(ck[5].find("image_net.cross.alpha")->to_vector()[0] != 0.0);
  CHECK(ck[5].find("range_net.cross.alpha")->to_vector()[0] != 0.0);

  // latent scales were calibrated
  const Models m = load_models(cfg, checkpoint_path(dir, 5));
  CHECK(m.range_vae.latent_scale() != 1.0);
  CHECK(m.image_vae.latent_scale() != 1.0);
  const Models off = m.with_gates_off();
  CHECK(off.image_net.cross.alpha.to_vector()[0] == 0.0);
  CHECK(m.image_net.cross.alpha.to_vector()[0] != 0.0);

  // refine-only stage logs no reconstruction loss
  for (double v : csv_column(dir + "/stage4_loss.csv", 2)) CHECK(v == 0.0);
  for (double v : csv_column(dir + "/stage4_loss.csv", 3)) CHECK(v > 0.0);
}

TEST_CASE("resume after interruption is bit-identical") {
  RunConfig cfg = tiny_config();
  cfg.stages[0].epochs = 3;
  const std::string a = scratch("resume_a"), b = scratch("resume_b");
  run_stage(1, cfg, tiny_corpus(), a, quiet());
  const StageReport first = run_stage(1, cfg, tiny_corpus(), b, quiet(1));
  CHECK(first.epochs.size() == 1);
  CHECK_FALSE(load_checkpoint(checkpoint_path(b, 1)).complete());
  const StageReport second = run_stage(1, cfg, tiny_corpus(), b, quiet());
  CHECK(second.resumed);
  CHECK(second.epochs.size() == 2);

  const Checkpoint ca = load_checkpoint(checkpoint_path(a, 1));
  const Checkpoint cb = load_checkpoint(checkpoint_path(b, 1));
  CHECK(ca.step == cb.step);
  CHECK(ca.rng_state == cb.rng_state);
  REQUIRE(ca.tensors.size() == cb.tensors.size());
  for (size_t i = 0; i < ca.tensors.size(); ++i) {
    CHECK(ca.tensors[i].name == cb.tensors[i].name);
    if (!bit_equal(ca.tensors[i].tensor, cb.tensors[i].tensor)) FAIL_CHECK("differs: " << ca.tensors[i].name);
  }
  CHECK(read_file(a + "/stage1_loss.csv") == read_file(b + "/stage1_loss.csv"));

  // a completed stage reruns from scratch and reproduces itself
  run_stage(1, cfg, tiny_corpus(), a, quiet());
  CHECK(read_file(checkpoint_path(a, 1)) == read_file(checkpoint_path(b, 1)));
}

TEST_CASE("discriminator switches on at the warm-up step") {
  RunConfig cfg = tiny_config();
  cfg.range_vae.adv_warmup = 3;
  cfg.stages[0].epochs = 3;
  const std::string dir = scratch("adv");
  run_stage(1, cfg, tiny_corpus(), dir, quiet());
  const auto steps = csv_column(dir + "/stage1_loss.csv", 0);
  const auto adv = csv_column(dir + "/stage1_loss.csv", 5);
  REQUIRE(steps.size() == 6);
  for (size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 3) {
      CHECK(adv[i] == 0.0);
    } else {
      CHECK(adv[i] != 0.0);
    }
  }
}

TEST_CASE("range vae loss falls over training") {
  RunConfig cfg = tiny_config();
  cfg.stages[0].epochs = 12;
  const std::string dir = scratch("trend");
  const StageReport r = run_stage(1, cfg, tiny_corpus(), dir, quiet());
  REQUIRE(r.epochs.size() == 12);
  CHECK(r.epochs.back().recon < 0.5 * r.epochs.front().recon);
}

TEST_CASE("non-finite loss dumps the batch and aborts") {
  const RunConfig cfg = tiny_config();
  std::vector<Sample> bad = tiny_corpus();
  bad[1].range.set(3, 3, std::numeric_limits<float>::max());  // overflows the squared error
  const std::string dir = scratch("nan");
  CHECK_THROWS_AS(run_stage(1, cfg, bad, dir, quiet()), NumericError);
  const auto dump = nlohmann::json::parse(read_file(dir + "/stage1_nan_dump.json"));
  const auto ids = dump.at("batch");
  CHECK(std::find(ids.begin(), ids.end(), bad[1].id) != ids.end());
}

// mted: corpus synthesis, staged training, editing, evaluation and gradient
// checks. Talks to the library only through the C API.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mted/mted.h"

namespace {

enum Exit { kOk = 0, kFailure = 1, kIo = 2, kSequencing = 3, kUsage = 64 };

int exit_code(mted_status s) {
  switch (s) {
    case MTED_OK: return kOk;
    case MTED_ERR_IO:
    case MTED_ERR_FORMAT:
    case MTED_ERR_CORRUPTION: return kIo;
    case MTED_ERR_SEQUENCING: return kSequencing;
    case MTED_ERR_USAGE:
    case MTED_ERR_CONFIG:
    case MTED_ERR_PLACEMENT: return kUsage;
    default: return kFailure;
  }
}

int fail(mted_status s) {
  std::fprintf(stderr, "mted: %s error: %s\n", mted_status_name(s), mted_last_error());
  return exit_code(s);
}

void to_stderr(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }
void to_stdout(const char* line, void*) { std::printf("%s\n", line); }

// Owns a library string.
struct Text {
  char* p = nullptr;
  ~Text() { mted_string_free(p); }
};

struct Config {
  mted_config* h = nullptr;
  ~Config() { mted_config_destroy(h); }
};

struct Models {
  mted_models* h = nullptr;
  ~Models() { mted_models_destroy(h); }
};

struct Common {
  std::string config;
  std::vector<std::string> set;

  mted_status load(Config& c) const {
    std::vector<const char*> ov;
    for (const auto& s : set) ov.push_back(s.c_str());
    return mted_config_create(config.empty() ? nullptr : config.c_str(), ov.data(), ov.size(), &c.h);
  }
};

struct SynthArgs {
  uint64_t seed = 1;
  int count = 0;
  int test_count = 32;
  std::string out, shadows;
};

struct TrainArgs {
  int stage = 0;
  std::string data, out;
  int stop_after = 0;
};

struct EditArgs {
  std::string data, ckpt, out, proto, pose, split;
  std::vector<std::string> scenes;
  std::string mode = "mask-bounded";
  uint64_t seed = 0;
  int steps = 0;
  bool independent = false;
};

struct EvalArgs {
  std::string pred, ref, out;
};

int run_synth(const Common& common, const SynthArgs& a) {
  // checked here so the exit code is the I/O one the corpus contract names
  if (a.count <= 0) {
    std::fprintf(stderr, "mted: count must be positive\n");
    return kIo;
  }
  Config cfg;
  if (auto s = common.load(cfg)) return fail(s);
  const int shadows = a.shadows.empty() ? -1 : a.shadows == "on";
  if (auto s = mted_synth(cfg.h, a.seed, a.count, a.test_count, shadows, a.out.c_str())) return fail(s);
  std::printf("wrote %d train + %d test samples to %s\n", a.count, a.test_count, a.out.c_str());
  return kOk;
}

int run_train(const Common& common, const TrainArgs& a) {
  Config cfg;
  if (auto s = common.load(cfg)) return fail(s);
  if (auto s = mted_train(cfg.h, a.stage, a.data.c_str(), a.out.c_str(), a.stop_after, to_stderr, nullptr)) {
    return fail(s);
  }
  return kOk;
}

int run_edit(const Common& common, const EditArgs& a) {
  mted_edit_spec base{};
  if (!a.pose.empty()) {
    if (auto s = mted_parse_pose(a.pose.c_str(), &base)) return fail(s);
  }
  base.proto_id = a.proto.empty() ? nullptr : a.proto.c_str();
  base.mode = a.mode.c_str();
  base.seed = a.seed;
  base.steps = a.steps;

  std::vector<std::string> ids = a.scenes;
  Text listed;
  if (!a.split.empty()) {
    if (auto s = mted_corpus_ids(a.data.c_str(), a.split.c_str(), &listed.p)) return fail(s);
    std::istringstream in(listed.p);
    for (std::string id; std::getline(in, id);)
      if (!id.empty()) ids.push_back(id);
  }
  if (ids.empty()) {
    std::fprintf(stderr, "mted: edit needs --scene or a non-empty --split\n");
    return kUsage;
  }
  std::vector<mted_edit_spec> specs(ids.size(), base);
  for (size_t i = 0; i < ids.size(); ++i) specs[i].scene_id = ids[i].c_str();

  Config cfg;
  if (auto s = common.load(cfg)) return fail(s);
  Models models;
  if (auto s = mted_models_load(cfg.h, a.ckpt.c_str(), to_stderr, nullptr, &models.h)) return fail(s);
  if (auto s = mted_edit(cfg.h, models.h, a.data.c_str(), specs.data(), specs.size(), a.independent ? 0 : 1,
                         a.out.c_str(), to_stderr, nullptr)) {
    return fail(s);
  }
  std::printf("wrote %zu edit(s) to %s\n", specs.size(), a.out.c_str());
  return kOk;
}

int run_eval(const EvalArgs& a) {
  Text summary;
  if (auto s = mted_eval(a.pred.c_str(), a.ref.c_str(), a.out.c_str(), &summary.p)) return fail(s);
  std::printf("%s\n", summary.p);
  return kOk;
}

int run_gradcheck(const std::string& op) {
  int failures = 0;
  if (auto s = mted_gradcheck(op.c_str(), to_stdout, nullptr, &failures)) return fail(s);
  if (failures > 0) {
    std::printf("%d check(s) failed\n", failures);
    return kFailure;
  }
  std::printf("all checks passed\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal object insertion: synthesis, training, editing, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", [] {
    return std::string("mted ") + mted_version() + " (build " + mted_build_hash() + ", checkpoint format v" +
           std::to_string(mted_checkpoint_format_version()) + ", corpus format v" +
           std::to_string(mted_corpus_format_version()) + ")";
  });

  Common common;
  app.add_option("--config", common.config, "Run config JSON")->check(CLI::ExistingFile);
  app.add_option("--set", common.set, "Config override, dotted.key=value (repeatable, wins over --config)");

  SynthArgs synth;
  auto* sy = app.add_subcommand("synth", "Generate a corpus");
  sy->add_option("--seed", synth.seed, "Generator seed");
  sy->add_option("--count", synth.count, "Train samples")->required();
  sy->add_option("--test-count", synth.test_count, "Held-out test samples")->capture_default_str();
  sy->add_option("--out", synth.out, "Output directory")->required();
  sy->add_option("--shadows", synth.shadows, "Cast shadows (default: config)")->check(CLI::IsMember({"on", "off"}));

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "Train one stage");
  tr->add_option("--stage", train.stage, "Stage 1..5")->required()->check(CLI::Range(1, 5));
  tr->add_option("--data", train.data, "Corpus directory")->required();
  tr->add_option("--out", train.out, "Checkpoint directory")->required();
  tr->add_option("--stop-after", train.stop_after, "Stop after this many epochs (resumable)");

  EditArgs edit;
  auto* ed = app.add_subcommand("edit", "Insert an object into corpus scenes");
  ed->add_option("--data", edit.data, "Corpus holding the scenes")->required();
  ed->add_option("--ckpt", edit.ckpt, "Checkpoint directory")->required();
  ed->add_option("--scene", edit.scenes, "Scene id (repeatable)");
  ed->add_option("--split", edit.split, "Edit every scene of this split");
  ed->add_option("--proto", edit.proto, "Object prototype (default: the scene's own)");
  ed->add_option("--pose", edit.pose, "\"x,y,yaw\" in metres and radians (default: the scene's own)");
  ed->add_option("--mode", edit.mode, "mask-bounded | unconstrained")->capture_default_str();
  ed->add_option("--seed", edit.seed, "Sampling seed");
  ed->add_option("--steps", edit.steps, "Reverse steps (0 = config)");
  ed->add_flag("--independent", edit.independent, "Sample both branches without the cross-modal exchange");
  ed->add_option("--out", edit.out, "Output directory")->required();

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Score edits against a reference corpus");
  ev->add_option("--pred", eval.pred, "Predicted corpus")->required();
  ev->add_option("--ref", eval.ref, "Reference corpus")->required();
  ev->add_option("--out", eval.out, "Report JSON (a CSV is written alongside)")->required();

  std::string op;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--op", op, "Run one check");

  std::string ppm_in, ppm_out;
  auto* ex = app.add_subcommand("export-ppm", "Convert a corpus tensor to PPM");
  ex->add_option("in", ppm_in, "Tensor file (.f32) inside a corpus")->required();
  ex->add_option("out", ppm_out, "PPM path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (*sy) return run_synth(common, synth);
  if (*tr) return run_train(common, train);
  if (*ed) return run_edit(common, edit);
  if (*ev) return run_eval(eval);
  if (*gc) return run_gradcheck(op);
  if (auto s = mted_export_ppm(ppm_in.c_str(), ppm_out.c_str())) return fail(s);
  return kOk;
}

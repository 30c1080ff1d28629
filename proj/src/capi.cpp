#include "mted/mted.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <new>
#include <string>

#include "json.hpp"
#include "mted/config.hpp"
#include "mted/corpus.hpp"
#include "mted/editing.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"
#include "mted/gradsuite.hpp"
#include "mted/metrics.hpp"
#include "mted/training.hpp"

#ifndef MTED_BUILD_HASH
#define MTED_BUILD_HASH "unknown"
#endif

using nlohmann::json;
namespace fs = std::filesystem;

struct mted_config {
  mted::RunConfig cfg;
};

struct mted_models {
  mted::Models models;
  uint64_t checkpoint_hash = 0;
};

namespace {

thread_local std::string g_last_error;

mted_status status_of(mted::ErrorKind k) {
  using K = mted::ErrorKind;
  switch (k) {
    case K::kDimension: return MTED_ERR_DIMENSION;
    case K::kDomain: return MTED_ERR_DOMAIN;
    case K::kNumeric: return MTED_ERR_NUMERIC;
    case K::kUsage: return MTED_ERR_USAGE;
    case K::kConfig: return MTED_ERR_CONFIG;
    case K::kIo: return MTED_ERR_IO;
    case K::kFormat: return MTED_ERR_FORMAT;
    case K::kCorruption: return MTED_ERR_CORRUPTION;
    case K::kSequencing: return MTED_ERR_SEQUENCING;
    case K::kPlacement: return MTED_ERR_PLACEMENT;
  }
  return MTED_ERR_INTERNAL;
}

// Nothing may unwind across the C boundary.
template <class F>
mted_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return MTED_OK;
  } catch (const mted::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return MTED_ERR_FORMAT;
  } catch (const fs::filesystem_error& e) {
    g_last_error = e.what();
    return MTED_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MTED_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MTED_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return MTED_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw mted::UsageError(std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::function<void(const std::string&)> sink(mted_log_fn fn, void* user) {
  if (!fn) return {};
  return [fn, user](const std::string& line) { fn(line.c_str(), user); };
}

// Walks up from a tensor file to the corpus manifest that declares it.
const mted::TensorEntry* find_tensor(const fs::path& file, mted::CorpusManifest& manifest) {
  const fs::path target = fs::weakly_canonical(file);
  for (fs::path dir = target.parent_path(); !dir.empty(); dir = dir.parent_path()) {
    if (fs::exists(dir / "manifest.json")) {
      manifest = mted::CorpusManifest::from_json(json::parse(mted::read_file((dir / "manifest.json").string())));
      for (const auto& s : manifest.samples)
        for (const auto& [name, e] : s.tensors)
          if (fs::weakly_canonical(dir / e.file) == target) return &e;
      return nullptr;
    }
    if (dir == dir.root_path()) break;
  }
  return nullptr;
}

}  // namespace

extern "C" {

const char* mted_last_error(void) { return g_last_error.c_str(); }

const char* mted_status_name(mted_status s) {
  switch (s) {
    case MTED_OK: return "ok";
    case MTED_ERR_DIMENSION: return "dimension";
    case MTED_ERR_DOMAIN: return "domain";
    case MTED_ERR_NUMERIC: return "numeric";
    case MTED_ERR_USAGE: return "usage";
    case MTED_ERR_CONFIG: return "config";
    case MTED_ERR_IO: return "io";
    case MTED_ERR_FORMAT: return "format";
    case MTED_ERR_CORRUPTION: return "corruption";
    case MTED_ERR_SEQUENCING: return "sequencing";
    case MTED_ERR_PLACEMENT: return "placement";
    case MTED_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void mted_string_free(char* s) { std::free(s); }

const char* mted_version(void) { return "0.1.0"; }
const char* mted_build_hash(void) { return MTED_BUILD_HASH; }
int mted_checkpoint_format_version(void) { return static_cast<int>(mted::kCheckpointVersion); }
int mted_corpus_format_version(void) { return mted::kCorpusFormatVersion; }

mted_status mted_config_create(const char* path, const char* const* overrides, size_t n_overrides,
                               mted_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    json j = json::object();
    if (path && *path) {
      try {
        j = json::parse(mted::read_file(path));
      } catch (const json::exception& e) {
        throw mted::ConfigError(std::string("config ") + path + ": " + e.what());
      }
    }
    std::vector<std::string> ov;
    for (size_t i = 0; i < n_overrides; ++i) {
      require(overrides[i], "override");
      ov.emplace_back(overrides[i]);
    }
    mted::apply_overrides(j, ov);
    auto c = std::make_unique<mted_config>();
    c->cfg = mted::RunConfig::from_json(j);
    c->cfg.validate();
    *out = c.release();
  });
}

void mted_config_destroy(mted_config* cfg) { delete cfg; }

mted_status mted_config_json(const mted_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "config");
    require(out, "out");
    *out = dup_string(cfg->cfg.to_json().dump(2));
  });
}

uint64_t mted_config_hash(const mted_config* cfg) { return cfg ? cfg->cfg.hash() : 0; }

mted_status mted_synth(const mted_config* cfg, uint64_t seed, int train_count, int test_count, int shadows,
                       const char* out_dir) {
  return guarded([&] {
    require(cfg, "config");
    require(out_dir, "out_dir");
    if (train_count <= 0) throw mted::UsageError("count must be positive");
    if (test_count < 0) throw mted::UsageError("test count must not be negative");
    mted::SynthConfig sc = cfg->cfg.synth;
    if (shadows >= 0) sc.shadows = shadows != 0;
    const auto samples = mted::synth_corpus(seed, train_count, test_count, sc);
    mted::write_corpus(samples, out_dir, sc, seed, cfg->cfg.hash());
  });
}

mted_status mted_corpus_ids(const char* dir, const char* split, char** out) {
  return guarded([&] {
    require(dir, "dir");
    require(out, "out");
    const mted::CorpusReader reader(dir);
    std::string ids;
    for (const auto& s : reader.manifest().samples) {
      if (split && *split && s.split != split) continue;
      ids += s.id + "\n";
    }
    *out = dup_string(ids);
  });
}

mted_status mted_train(const mted_config* cfg, int stage, const char* data_dir, const char* out_dir, int stop_after,
                       mted_log_fn log, void* user) {
  return guarded([&] {
    require(cfg, "config");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    if (stage < 1 || stage > 5) throw mted::UsageError("stage must be 1..5, got " + std::to_string(stage));
    if (stop_after < 0) throw mted::UsageError("stop-after must not be negative");
    const mted::CorpusReader reader(data_dir);
    const auto train = reader.read_split("train");
    if (train.empty()) throw mted::UsageError(std::string("no train samples in ") + data_dir);
    mted::StageOptions opt;
    opt.stop_after = stop_after;
    opt.log = sink(log, user);
    mted::run_stage(stage, cfg->cfg, train, out_dir, opt);
  });
}

mted_status mted_models_load(const mted_config* cfg, const char* ckpt_dir, mted_log_fn log, void* user,
                             mted_models** out) {
  return guarded([&] {
    require(cfg, "config");
    require(ckpt_dir, "ckpt_dir");
    require(out, "out");
    *out = nullptr;
    uint64_t hash = 0;
    mted::Models m = mted::load_edit_models(cfg->cfg, ckpt_dir, sink(log, user), &hash);
    *out = new mted_models{std::move(m), hash};
  });
}

void mted_models_destroy(mted_models* m) { delete m; }

mted_status mted_parse_pose(const char* text, mted_edit_spec* spec) {
  return guarded([&] {
    require(spec, "spec");
    const std::string expected = "pose must be \"x,y,yaw\" (metres, metres, radians)";
    if (!text) throw mted::UsageError(expected);
    double v[3];
    int used = 0;
    if (std::sscanf(text, " %lf , %lf , %lf %n", &v[0], &v[1], &v[2], &used) != 3 || text[used] != '\0') {
      throw mted::UsageError(expected + ", got \"" + text + "\"");
    }
    for (double x : v)
      if (!std::isfinite(x)) throw mted::UsageError(expected + ", got \"" + text + "\"");
    spec->has_pose = 1;
    spec->x = v[0];
    spec->y = v[1];
    spec->yaw = v[2];
  });
}

mted_status mted_edit(const mted_config* cfg, const mted_models* models, const char* data_dir,
                      const mted_edit_spec* specs, size_t n_specs, int exchange, const char* out_dir,
                      mted_log_fn log, void* user) {
  return guarded([&] {
    require(cfg, "config");
    require(models, "models");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    if (n_specs == 0) throw mted::UsageError("no edits requested");
    require(specs, "specs");
    const mted::CorpusReader reader(data_dir);
    const auto say = sink(log, user);
    std::vector<mted::EditRequest> reqs;
    std::vector<mted::EditResult> results;
    for (size_t i = 0; i < n_specs; ++i) {
      const mted_edit_spec& s = specs[i];
      require(s.scene_id, "scene_id");
      mted::EditRequest req;
      req.scene = reader.read(std::string(s.scene_id));
      req.proto_id = s.proto_id ? s.proto_id : req.scene.proto_id;
      mted::find_prototype(req.proto_id);
      req.pose = req.scene.pose;
      if (s.has_pose) {
        req.pose.x = s.x;
        req.pose.y = s.y;
        req.pose.yaw = s.yaw;
      }
      req.mode = mted::parse_edit_mode(s.mode ? s.mode : "mask-bounded");
      req.seed = s.seed;
      req.steps = s.steps;
      if (say) say("edit " + req.scene.id + " with " + req.proto_id);
      results.push_back(mted::run_edit(req, models->models, cfg->cfg, exchange != 0, say));
      reqs.push_back(std::move(req));
    }
    mted::write_edits(reqs, results, cfg->cfg, out_dir,
                      {{"checkpoint_hash", mted::hex64(models->checkpoint_hash)},
                       {"exchange", exchange != 0},
                       {"data", data_dir}});
  });
}

mted_status mted_eval(const char* pred_dir, const char* ref_dir, const char* report_path, char** summary) {
  return guarded([&] {
    require(pred_dir, "pred_dir");
    require(ref_dir, "ref_dir");
    require(report_path, "report_path");
    const mted::CorpusReader pred(pred_dir), ref(ref_dir);
    const mted::EvalReport rep = mted::evaluate(pred.read_all(), ref.read_all(), ref.manifest().config.calib);
    json j = rep.to_json();
    j["pred"] = pred_dir;
    j["ref"] = ref_dir;
    if (pred.manifest().config_hash != 0) j["config_hash"] = mted::hex64(pred.manifest().config_hash);
    const fs::path report(report_path);
    if (report.has_parent_path()) mted::make_dirs(report.parent_path().string());
    mted::write_file_atomic(report.string(), j.dump(2) + "\n");
    fs::path csv = report;
    csv.replace_extension(".csv");
    mted::write_file_atomic(csv.string(), rep.to_csv());
    if (summary) *summary = dup_string(j.at("mean").dump());
  });
}

mted_status mted_gradcheck(const char* op, mted_log_fn log, void* user, int* failures) {
  return guarded([&] {
    int failed = 0;
    mted::run_gradcheck_suite(op ? op : "", [&](const mted::GradSuiteEntry& e) {
      if (!e.passed) ++failed;
      if (!log) return;
      char line[256];
      std::snprintf(line, sizeof(line), "%-26s worst %.3e  tol %.0e  %s  (%.2f s)", e.name.c_str(),
                    e.result.worst_relative_error, e.tolerance, e.passed ? "ok" : "FAIL", e.seconds);
      log(line, user);
    });
    if (failures) *failures = failed;
  });
}

mted_status mted_export_ppm(const char* in_path, const char* out_path) {
  return guarded([&] {
    require(in_path, "in_path");
    require(out_path, "out_path");
    if (!fs::exists(in_path)) throw mted::IoError(std::string("no such file: ") + in_path);
    mted::CorpusManifest manifest;
    const mted::TensorEntry* e = find_tensor(in_path, manifest);
    if (!e) throw mted::UsageError(std::string(in_path) + " is not a tensor listed in a corpus manifest");
    if (e->shape.size() != 2 && !(e->shape.size() == 3 && e->shape[2] == 3)) {
      throw mted::UsageError(std::string(in_path) + ": only H x W and H x W x 3 tensors convert to PPM");
    }
    const int rows = static_cast<int>(e->shape[0]), cols = static_cast<int>(e->shape[1]);
    const size_t ch = e->shape.size() == 3 ? 3 : 1;
    const std::string raw = mted::read_file(in_path);
    if (raw.size() != size_t(rows) * cols * ch * sizeof(float)) {
      throw mted::CorruptionError(std::string(in_path) + ": size does not match the declared shape");
    }
    std::vector<float> v(raw.size() / sizeof(float));
    std::memcpy(v.data(), raw.data(), raw.size());
    mted::Image img(rows, cols, 3);
    if (ch == 3) {
      img.data = v;
    } else {
      // single-channel maps (depth, range, masks) are scaled by their maximum
      float hi = 0;
      for (float x : v) hi = std::max(hi, x);
      for (size_t i = 0; i < v.size(); ++i)
        for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = hi > 0 ? v[i] / hi : 0.0f;
    }
    mted::write_ppm(img, out_path);
  });
}

}  // extern "C"

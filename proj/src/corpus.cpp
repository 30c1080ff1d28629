#include "mted/corpus.hpp"

#include <cstring>
#include <filesystem>

#include "mted/error.hpp"
#include "mted/fileio.hpp"
#include "mted/rng.hpp"

namespace mted {

using nlohmann::json;

json calibration_to_json(const Calibration& c) {
  json r = json::array();
  for (const auto& row : c.R_CR) r.push_back({row[0], row[1], row[2]});
  return {{"image_width", c.image_width},
          {"image_height", c.image_height},
          {"fx", c.K.fx},
          {"fy", c.K.fy},
          {"cx", c.K.cx},
          {"cy", c.K.cy},
          {"R_CR", r},
          {"t_CR", {c.t_CR.x, c.t_CR.y, c.t_CR.z}},
          {"grid",
           {{"n_theta", c.grid.n_theta},
            {"n_phi", c.grid.n_phi},
            {"theta_min", c.grid.theta_min},
            {"theta_max", c.grid.theta_max},
            {"phi_min", c.grid.phi_min},
            {"phi_max", c.grid.phi_max}}}};
}

Calibration calibration_from_json(const json& j) {
  try {
    Calibration c;
    c.image_width = j.at("image_width").get<int>();
    c.image_height = j.at("image_height").get<int>();
    c.K = {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
           j.at("cy").get<double>()};
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) c.R_CR[i][k] = j.at("R_CR").at(i).at(k).get<double>();
    }
    const json& t = j.at("t_CR");
    c.t_CR = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
    const json& g = j.at("grid");
    c.grid = {g.at("n_theta").get<int>(), g.at("n_phi").get<int>(), g.at("theta_min").get<double>(),
              g.at("theta_max").get<double>(), g.at("phi_min").get<double>(),
              g.at("phi_max").get<double>()};
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("calibration: ") + e.what());
  }
}

json synth_config_to_json(const SynthConfig& c) {
  return {{"calibration", calibration_to_json(c.calib)},
          {"shadows", c.shadows},
          {"min_distractors", c.min_distractors},
          {"max_distractors", c.max_distractors},
          {"x_min", c.x_min},
          {"x_max", c.x_max},
          {"y_min", c.y_min},
          {"y_max", c.y_max},
          {"mask_margin", c.mask_margin},
          {"min_silhouette_pixels", c.min_silhouette_pixels},
          {"prototypes", c.prototypes}};
}

SynthConfig synth_config_from_json(const json& j) {
  try {
    SynthConfig c;
    c.calib = calibration_from_json(j.at("calibration"));
    c.shadows = j.at("shadows").get<bool>();
    c.min_distractors = j.at("min_distractors").get<int>();
    c.max_distractors = j.at("max_distractors").get<int>();
    c.x_min = j.at("x_min").get<double>();
    c.x_max = j.at("x_max").get<double>();
    c.y_min = j.at("y_min").get<double>();
    c.y_max = j.at("y_max").get<double>();
    c.mask_margin = j.at("mask_margin").get<double>();
    c.min_silhouette_pixels = j.at("min_silhouette_pixels").get<int>();
    c.prototypes = j.at("prototypes").get<std::vector<std::string>>();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("synth config: ") + e.what());
  }
}

const std::vector<std::string>& sample_tensor_names() {
  static const std::vector<std::string> names = {
      "image",      "image_shadow_free", "background", "range",      "background_range",
      "depth",      "mask_image",        "mask_range", "object_rgb", "object_depth",
      "object_silhouette"};
  return names;
}

namespace {

std::vector<float> mask_values(const Mask& m) { return {m.data.begin(), m.data.end()}; }

struct TensorView {
  std::vector<float> values;
  std::vector<int64_t> shape;
};

TensorView tensor_of(const Sample& s, const std::string& name) {
  auto img = [](const Image& g) { return TensorView{g.data, {g.rows, g.cols, g.channels}}; };
  auto plane = [](const Grid<float>& g) { return TensorView{g.data, {g.rows, g.cols}}; };
  auto mask = [](const Mask& m) { return TensorView{mask_values(m), {m.rows, m.cols}}; };
  if (name == "image") return img(s.image);
  if (name == "image_shadow_free") return img(s.image_shadow_free);
  if (name == "background") return img(s.background);
  if (name == "object_rgb") return img(s.object_rgb);
  if (name == "range") return plane(s.range.values());
  if (name == "background_range") return plane(s.background_range.values());
  if (name == "depth") return plane(s.depth);
  if (name == "object_depth") return plane(s.object_depth);
  if (name == "mask_image") return mask(s.mask_image);
  if (name == "mask_range") return mask(s.mask_range);
  if (name == "object_silhouette") return mask(s.object_silhouette);
  throw UsageError("unknown sample tensor '" + name + "'");
}

std::vector<int64_t> expected_shape(const std::string& name, const Calibration& c) {
  const int64_t h = c.image_height, w = c.image_width, p = c.grid.n_phi, t = c.grid.n_theta;
  if (name == "image" || name == "image_shadow_free" || name == "background" || name == "object_rgb") {
    return {h, w, 3};
  }
  if (name == "range" || name == "background_range" || name == "mask_range") return {p, t};
  return {h, w};
}

Mask to_mask(const std::vector<float>& v, int rows, int cols, const std::string& file) {
  Mask m(rows, cols);
  for (size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0f && v[i] != 1.0f) throw CorruptionError(file + ": mask value is not 0 or 1");
    m.data[i] = v[i] != 0.0f;
  }
  return m;
}

}  // namespace

json CorpusManifest::to_json() const {
  json samples_j = json::array();
  for (const auto& s : samples) {
    json tensors = json::object();
    for (const auto& [name, e] : s.tensors) {
      tensors[name] = {{"file", e.file}, {"shape", e.shape}, {"fnv1a", hex64(e.checksum)}};
    }
    samples_j.push_back({{"id", s.id},
                         {"split", s.split},
                         {"seed", s.seed},
                         {"proto", s.proto_id},
                         {"pose", {{"x", s.pose.x}, {"y", s.pose.y}, {"z", s.pose.z}, {"yaw", s.pose.yaw}}},
                         {"shadow", s.shadow},
                         {"tensors", tensors}});
  }
  json j = {{"format", "mted-corpus"},
            {"format_version", format_version},
            {"generator_seed", generator_seed},
            {"config", synth_config_to_json(config)},
            {"samples", samples_j}};
  if (config_hash != 0) j["config_hash"] = hex64(config_hash);
  return j;
}

CorpusManifest CorpusManifest::from_json(const json& j) {
  try {
    if (j.value("format", "") != "mted-corpus") throw FormatError("not a corpus manifest");
    CorpusManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kCorpusFormatVersion) {
      throw FormatError("unsupported corpus format version " + std::to_string(m.format_version));
    }
    m.generator_seed = j.at("generator_seed").get<uint64_t>();
    m.config = synth_config_from_json(j.at("config"));
    if (j.contains("config_hash")) m.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    for (const auto& sj : j.at("samples")) {
      SampleEntry s;
      s.id = sj.at("id").get<std::string>();
      s.split = sj.at("split").get<std::string>();
      s.seed = sj.at("seed").get<uint64_t>();
      s.proto_id = sj.at("proto").get<std::string>();
      const json& p = sj.at("pose");
      s.pose = {p.at("x").get<double>(), p.at("y").get<double>(), p.at("z").get<double>(),
                p.at("yaw").get<double>()};
      s.shadow = sj.at("shadow").get<bool>();
      for (const auto& [name, tj] : sj.at("tensors").items()) {
        TensorEntry e;
        e.file = tj.at("file").get<std::string>();
        e.shape = tj.at("shape").get<std::vector<int64_t>>();
        e.checksum = std::stoull(tj.at("fnv1a").get<std::string>(), nullptr, 16);
        s.tensors[name] = e;
      }
      m.samples.push_back(std::move(s));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("corpus manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw FormatError("corpus manifest: malformed checksum");
  }
}

CorpusManifest write_corpus(const std::vector<Sample>& samples, const std::string& dir,
                            const SynthConfig& config, uint64_t generator_seed, uint64_t config_hash) {
  CorpusManifest m;
  m.generator_seed = generator_seed;
  m.config_hash = config_hash;
  m.config = config;
  make_dirs(dir + "/samples");
  for (const Sample& s : samples) {
    SampleEntry e{s.id, s.split, s.seed, s.proto_id, s.pose, s.shadow, {}};
    make_dirs(dir + "/samples/" + s.id);
    for (const auto& name : sample_tensor_names()) {
      const TensorView t = tensor_of(s, name);
      const std::string rel = "samples/" + s.id + "/" + name + ".f32";
      write_f32(dir + "/" + rel, t.values);
      e.tensors[name] = {rel, t.shape, fnv1a64(t.values.data(), t.values.size() * sizeof(float))};
    }
    m.samples.push_back(std::move(e));
  }
  write_file_atomic(dir + "/manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

CorpusReader::CorpusReader(const std::string& dir) : dir_(dir) {
  const std::string path = dir + "/manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("no corpus manifest at " + path);
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  manifest_ = CorpusManifest::from_json(j);
}

Sample CorpusReader::read(size_t index) const {
  if (index >= manifest_.samples.size()) {
    throw UsageError("corpus has " + std::to_string(size()) + " samples, index " +
                     std::to_string(index) + " requested");
  }
  const SampleEntry& e = manifest_.samples[index];
  const Calibration& calib = manifest_.config.calib;
  Sample s;
  s.id = e.id;
  s.split = e.split;
  s.seed = e.seed;
  s.proto_id = e.proto_id;
  s.pose = e.pose;
  s.shadow = e.shadow;
  for (const auto& name : sample_tensor_names()) {
    const auto it = e.tensors.find(name);
    if (it == e.tensors.end()) throw CorruptionError("sample " + e.id + ": tensor '" + name + "' not listed");
    const TensorEntry& t = it->second;
    const std::string path = dir_ + "/" + t.file;
    if (t.shape != expected_shape(name, calib)) {
      throw CorruptionError(path + ": declared shape does not match the corpus calibration");
    }
    int64_t count = 1;
    for (int64_t d : t.shape) count *= d;
    std::string bytes;
    try {
      bytes = read_file(path);
    } catch (const IoError&) {
      throw CorruptionError(path + ": listed in the manifest but missing");
    }
    if (static_cast<int64_t>(bytes.size()) != count * 4) {
      throw CorruptionError(path + ": expected " + std::to_string(count * 4) + " bytes, found " +
                            std::to_string(bytes.size()));
    }
    if (fnv1a64(bytes) != t.checksum) throw CorruptionError(path + ": checksum mismatch");
    std::vector<float> v(static_cast<size_t>(count));
    std::memcpy(v.data(), bytes.data(), bytes.size());
    const int rows = static_cast<int>(t.shape[0]), cols = static_cast<int>(t.shape[1]);
    auto grid = [&](int ch) {
      Grid<float> g(rows, cols, ch);
      g.data = v;
      return g;
    };
    if (name == "image") s.image = grid(3);
    else if (name == "image_shadow_free") s.image_shadow_free = grid(3);
    else if (name == "background") s.background = grid(3);
    else if (name == "object_rgb") s.object_rgb = grid(3);
    else if (name == "range") s.range = RangeImage::from_values(grid(1));
    else if (name == "background_range") s.background_range = RangeImage::from_values(grid(1));
    else if (name == "depth") s.depth = grid(1);
    else if (name == "object_depth") s.object_depth = grid(1);
    else if (name == "mask_image") s.mask_image = to_mask(v, rows, cols, path);
    else if (name == "mask_range") s.mask_range = to_mask(v, rows, cols, path);
    else if (name == "object_silhouette") s.object_silhouette = to_mask(v, rows, cols, path);
  }
  return s;
}

Sample CorpusReader::read(const std::string& id) const {
  for (size_t i = 0; i < manifest_.samples.size(); ++i) {
    if (manifest_.samples[i].id == id) return read(i);
  }
  throw UsageError("no sample '" + id + "' in corpus " + dir_);
}

std::vector<Sample> CorpusReader::read_split(const std::string& split) const {
  std::vector<Sample> out;
  for (size_t i = 0; i < manifest_.samples.size(); ++i) {
    if (manifest_.samples[i].split == split) out.push_back(read(i));
  }
  return out;
}

std::vector<Sample> CorpusReader::read_all() const {
  std::vector<Sample> out;
  for (size_t i = 0; i < manifest_.samples.size(); ++i) out.push_back(read(i));
  return out;
}

std::vector<Sample> synth_corpus(uint64_t generator_seed, int train_count, int test_count,
                                 const SynthConfig& config) {
  if (train_count < 1) throw UsageError("count must be positive");
  if (test_count < 0) throw UsageError("test count must be non-negative");
  config.validate();
  std::vector<Sample> out;
  for (int i = 0; i < train_count + test_count; ++i) {
    Sample s = synth_scene(mix_seed(generator_seed, static_cast<uint64_t>(i)), config);
    char id[16];
    std::snprintf(id, sizeof id, "s%04d", i);
    s.id = id;
    s.split = i < train_count ? "train" : "test";
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mted

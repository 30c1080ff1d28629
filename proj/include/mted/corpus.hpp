#pragma once

// On-disk corpus: manifest.json plus samples/<id>/<tensor>.f32, raw
// little-endian float32 with shapes and FNV-1a checksums in the manifest.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mted/scene.hpp"

namespace mted {

inline constexpr int kCorpusFormatVersion = 1;

nlohmann::json calibration_to_json(const Calibration& c);
Calibration calibration_from_json(const nlohmann::json& j);
nlohmann::json synth_config_to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct TensorEntry {
  std::string file;  // relative to the corpus directory
  std::vector<int64_t> shape;
  uint64_t checksum = 0;
};

struct SampleEntry {
  std::string id;
  std::string split;
  uint64_t seed = 0;
  std::string proto_id;
  Pose pose;
  bool shadow = false;
  std::map<std::string, TensorEntry> tensors;
};

struct CorpusManifest {
  int format_version = kCorpusFormatVersion;
  uint64_t generator_seed = 0;
  uint64_t config_hash = 0;  // run config that produced the corpus; 0 = not recorded
  SynthConfig config;
  std::vector<SampleEntry> samples;

  nlohmann::json to_json() const;
  static CorpusManifest from_json(const nlohmann::json& j);
};

// Names of the tensors stored per sample, in file order.
const std::vector<std::string>& sample_tensor_names();

CorpusManifest write_corpus(const std::vector<Sample>& samples, const std::string& dir,
                            const SynthConfig& config, uint64_t generator_seed, uint64_t config_hash = 0);

class CorpusReader {
 public:
  // Throws IoError when the manifest is missing, FormatError when it is not a
  // corpus manifest of a supported version.
  explicit CorpusReader(const std::string& dir);

  const CorpusManifest& manifest() const { return manifest_; }
  const std::string& dir() const { return dir_; }
  size_t size() const { return manifest_.samples.size(); }
  // Verifies sizes and checksums; throws CorruptionError naming the file.
  Sample read(size_t index) const;
  Sample read(const std::string& id) const;
  std::vector<Sample> read_split(const std::string& split) const;
  std::vector<Sample> read_all() const;

 private:
  std::string dir_;
  CorpusManifest manifest_;
};

// Generates `train_count` + `test_count` samples from one generator seed.
std::vector<Sample> synth_corpus(uint64_t generator_seed, int train_count, int test_count,
                                 const SynthConfig& config);

}  // namespace mted

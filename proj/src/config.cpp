#include "mted/config.hpp"

#include <cmath>

#include "mted/corpus.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"

namespace mted {

using nlohmann::json;

RunConfig::RunConfig() {
  range_vae.in_channels = 1;
  range_vae.adversarial = true;
  range_vae.width1 = 32;
  range_vae.width2 = 64;
  range_vae.kl_weight = 1e-6;
}

const StageSettings& RunConfig::stage(int id) const {
  if (id < 1 || id > 5) throw UsageError("stage must be in 1..5, got " + std::to_string(id));
  return stages[id - 1];
}

int RunConfig::epochs(int stage_id) const {
  return std::max(1, static_cast<int>(std::lround(stage(stage_id).epochs * epoch_scale * stage_epoch_scale[stage_id - 1])));
}

double RunConfig::learning_rate(int stage_id) const { return stage(stage_id).lr * lr_scale; }

void RunConfig::validate() const {
  synth.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  for (const VaeSpec* v : {&image_vae, &range_vae}) {
    require(v->width1 > 0 && v->width2 > 0, "vae widths must be positive");
    require(v->latent_channels == denoiser.latent_channels, "vae and denoiser latent channels differ");
    require(v->kl_weight >= 0 && v->adv_weight >= 0 && v->adv_warmup >= 0, "vae weights must be non-negative");
  }
  require(image_vae.in_channels == 3 && range_vae.in_channels == 1, "vae input channels are fixed (3 and 1)");
  require(denoiser.width1 > 0 && denoiser.width2 > 0 && denoiser.time_hidden > 0, "denoiser widths must be positive");
  require(denoiser.time_dim > 0 && denoiser.time_dim % 2 == 0, "time_dim must be positive and even");
  require(diffusion_steps >= 1, "diffusion steps must be >= 1");
  require(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "beta range must satisfy 0 < start <= end < 1");
  for (const auto& s : stages) {
    require(s.epochs >= 1 && s.batch_size >= 1 && s.lr > 0, "stage epochs, batch size and lr must be positive");
  }
  require(lr_scale > 0 && epoch_scale > 0 && clip_norm > 0, "scales and clip norm must be positive");
  for (double m : stage_epoch_scale) require(m > 0, "stage_epoch_scale entries must be positive");
  require(augment_prob >= 0 && augment_prob <= 1, "augment_prob must be in [0,1]");
  require(lambda_refine >= 0, "lambda_refine must be non-negative");
  require(image_vae_epochs >= 1 && image_vae_lr > 0, "image vae schedule must be positive");
  require(median_k >= 1 && median_k % 2 == 1, "median_k must be odd and >= 1");
  require(sample_steps >= 0 && sample_steps <= diffusion_steps, "sample_steps must be in [0, diffusion steps]");
  const auto& c = synth.calib;
  require(c.image_width % 8 == 0 && c.image_height % 8 == 0 && c.grid.n_theta % 8 == 0 && c.grid.n_phi % 8 == 0,
          "image and range extents must be multiples of 8");
}

namespace {

json vae_json(const VaeSpec& v, bool adversarial) {
  json j = {{"width1", v.width1}, {"width2", v.width2}, {"latent_channels", v.latent_channels},
            {"kl_weight", v.kl_weight}};
  if (adversarial) {
    j["adv_weight"] = v.adv_weight;
    j["adv_warmup"] = v.adv_warmup;
  }
  return j;
}

void vae_from(const json& j, VaeSpec& v, bool adversarial) {
  v.width1 = j.at("width1").get<int>();
  v.width2 = j.at("width2").get<int>();
  v.latent_channels = j.at("latent_channels").get<int>();
  v.kl_weight = j.at("kl_weight").get<double>();
  if (adversarial) {
    v.adv_weight = j.at("adv_weight").get<double>();
    v.adv_warmup = j.at("adv_warmup").get<int>();
  }
}

void reject_unknown(const json& user, const json& defaults, const std::string& path) {
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    if (value.is_object() && defaults.at(key).is_object()) reject_unknown(value, defaults.at(key), where);
  }
}

}  // namespace

json RunConfig::to_json() const {
  json stage_json = json::object();
  for (int i = 0; i < 5; ++i) {
    stage_json[std::to_string(i + 1)] = {
        {"epochs", stages[i].epochs}, {"batch_size", stages[i].batch_size}, {"lr", stages[i].lr}};
  }
  return {
      {"seed", seed},
      {"synth", synth_config_to_json(synth)},
      {"model",
       {{"image_vae", vae_json(image_vae, false)},
        {"range_vae", vae_json(range_vae, true)},
        {"denoiser",
         {{"width1", denoiser.width1},
          {"width2", denoiser.width2},
          {"time_dim", denoiser.time_dim},
          {"time_hidden", denoiser.time_hidden}}}}},
      {"diffusion", {{"steps", diffusion_steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}},
      {"training",
       {{"stages", stage_json},
        {"lr_scale", lr_scale},
        {"epoch_scale", epoch_scale},
        {"stage_epoch_scale", stage_epoch_scale},
        {"clip_norm", clip_norm},
        {"augment_prob", augment_prob},
        {"lambda_refine", lambda_refine},
        {"image_vae_epochs", image_vae_epochs},
        {"image_vae_lr", image_vae_lr}}},
      {"editing", {{"median_k", median_k}, {"sample_steps", sample_steps}}},
  };
}

RunConfig RunConfig::from_json(const json& user) {
  if (!user.is_object()) throw ConfigError("config: top level must be an object");
  const RunConfig defaults;
  json j = defaults.to_json();
  reject_unknown(user, j, "");
  j.merge_patch(user);
  RunConfig c;
  try {
    c.seed = j.at("seed").get<uint64_t>();
    c.synth = synth_config_from_json(j.at("synth"));
    const json& m = j.at("model");
    vae_from(m.at("image_vae"), c.image_vae, false);
    vae_from(m.at("range_vae"), c.range_vae, true);
    c.denoiser.width1 = m.at("denoiser").at("width1").get<int>();
    c.denoiser.width2 = m.at("denoiser").at("width2").get<int>();
    c.denoiser.time_dim = m.at("denoiser").at("time_dim").get<int>();
    c.denoiser.time_hidden = m.at("denoiser").at("time_hidden").get<int>();
    c.denoiser.latent_channels = c.image_vae.latent_channels;
    const json& d = j.at("diffusion");
    c.diffusion_steps = d.at("steps").get<int>();
    c.beta_start = d.at("beta_start").get<double>();
    c.beta_end = d.at("beta_end").get<double>();
    const json& t = j.at("training");
    for (int i = 0; i < 5; ++i) {
      const json& s = t.at("stages").at(std::to_string(i + 1));
      c.stages[i] = {s.at("epochs").get<int>(), s.at("batch_size").get<int>(), s.at("lr").get<double>()};
    }
    c.lr_scale = t.at("lr_scale").get<double>();
    c.epoch_scale = t.at("epoch_scale").get<double>();
    const json& per = t.at("stage_epoch_scale");
    if (!per.is_array() || per.size() != 5) throw ConfigError("config: stage_epoch_scale needs five entries");
    for (int i = 0; i < 5; ++i) c.stage_epoch_scale[i] = per.at(i).get<double>();
    c.clip_norm = t.at("clip_norm").get<double>();
    c.augment_prob = t.at("augment_prob").get<double>();
    c.lambda_refine = t.at("lambda_refine").get<double>();
    c.image_vae_epochs = t.at("image_vae_epochs").get<int>();
    c.image_vae_lr = t.at("image_vae_lr").get<double>();
    c.median_k = j.at("editing").at("median_k").get<int>();
    c.sample_steps = j.at("editing").at("sample_steps").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return from_json(j);
}

uint64_t RunConfig::hash() const { return fnv1a64(to_json().dump()); }

void apply_overrides(json& j, const std::vector<std::string>& overrides) {
  if (j.is_null()) j = json::object();
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override '" + o + "' must look like key.path=value");
    const std::string path = o.substr(0, eq), text = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    json* node = &j;
    size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw UsageError("override '" + o + "' has an empty key");
      if (!node->is_object()) *node = json::object();
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      start = dot + 1;
    }
  }
}

}  // namespace mted

#include "mted/editing.hpp"

#include <filesystem>

#include "mted/conditions.hpp"
#include "mted/corpus.hpp"
#include "mted/error.hpp"
#include "mted/fileio.hpp"

namespace mted {

using nlohmann::json;

EditMode parse_edit_mode(const std::string& s) {
  if (s == "mask-bounded") return EditMode::kMaskBounded;
  if (s == "unconstrained") return EditMode::kUnconstrained;
  throw UsageError("mode must be mask-bounded or unconstrained, got '" + s + "'");
}

std::string edit_mode_name(EditMode m) { return m == EditMode::kMaskBounded ? "mask-bounded" : "unconstrained"; }

EditRequest reconstruction_request(const Sample& s, uint64_t seed, EditMode mode) {
  EditRequest r;
  r.scene = s;
  r.proto_id = s.proto_id;
  r.pose = s.pose;
  r.mode = mode;
  r.seed = seed;
  return r;
}

EditConditions prepare_conditions(const EditRequest& req, const Models& m, const RunConfig& cfg) {
  NoGradGuard guard;
  const Calibration& calib = cfg.synth.calib;
  const Sample& s = req.scene;
  EditConditions c;
  c.placement = place_for_edit(find_prototype(req.proto_id), req.pose, calib, cfg.synth.mask_margin);
  const ObjectRender& obj = c.placement.object;
  c.pasted_image = paste_image(s.background, s.background, obj.rgb, obj.silhouette, c.placement.mask_image);
  c.pasted_range = paste_depth(s.background_range, obj.depth, c.placement.mask_range, calib, cfg.median_k);
  c.crop = crop_object(obj.rgb, obj.silhouette, kSemanticInput);
  const Tensor zi = m.image_vae.latent(image_to_tensor(c.pasted_image));
  const Tensor zr = m.range_vae.latent(range_to_tensor(c.pasted_range));
  c.hp_image = concat({zi, downsample_mask(mask_to_tensor(c.placement.mask_image), kLatentDownsample)}, 1);
  c.hp_range = concat({zr, downsample_mask(mask_to_tensor(c.placement.mask_range), kLatentDownsample)}, 1);
  c.maps = build_cross_maps({c.pasted_range}, calib);
  return c;
}

SampledLatents joint_sample(const EditConditions& c, const Models& m, const RunConfig& cfg, uint64_t seed, int steps,
                            bool exchange, const std::function<void(const std::string&)>& log) {
  NoGradGuard guard;
  const NoiseSchedule base = make_schedule(cfg);
  if (steps <= 0) steps = cfg.sample_steps > 0 ? cfg.sample_steps : base.steps();
  const std::vector<int> taus = base.spaced_steps(steps);
  const NoiseSchedule sched = base.respaced(taus);

  Rng rng_image(mix_seed(seed, 1)), rng_range(mix_seed(seed, 2));
  const int64_t lc = cfg.denoiser.latent_channels;
  Tensor zi = Tensor::randn({1, lc, c.hp_image.size(2), c.hp_image.size(3)}, rng_image);
  Tensor zr = Tensor::randn({1, lc, c.hp_range.size(2), c.hp_range.size(3)}, rng_range);
  const Tensor crop = image_to_tensor(c.crop);

  for (int k = steps; k >= 1; --k) {
    const std::vector<int> t{taus[k - 1]};
    Tensor ei, er;
    if (exchange) {
      const JointEps e = joint_denoise(m.image_net, m.range_net, {zi, zr, c.hp_image, c.hp_range, crop, crop}, t, c.maps);
      ei = e.image;
      er = e.range;
    } else {
      ei = m.image_net(zi, t, c.hp_image, crop);
      er = m.range_net(zr, t, c.hp_range, crop);
    }
    const Tensor ni = k > 1 ? Tensor::randn(zi.shape(), rng_image) : Tensor();
    const Tensor nr = k > 1 ? Tensor::randn(zr.shape(), rng_range) : Tensor();
    zi = ddpm_step(zi, ei, k, sched, ni);
    zr = ddpm_step(zr, er, k, sched, nr);
  }
  if (log) log("sampled " + std::to_string(steps) + " reverse steps" + (exchange ? "" : " (no exchange)"));
  return {zi, zr, steps};
}

void stitch(EditResult& r, const Sample& scene, EditMode mode) {
  const Image& dec = r.decoded_image;
  const RangeImage& dr = r.decoded_range;
  if (!dec.same_extent(scene.background.rows, scene.background.cols) ||
      dr.rows() != scene.background_range.rows() || dr.cols() != scene.background_range.cols()) {
    throw DimensionError("stitch: decoded extents differ from the scene");
  }
  if (mode == EditMode::kUnconstrained) {
    r.image = dec;
    r.range = dr;
  } else {
    r.image = scene.background;
    for (int y = 0; y < dec.rows; ++y)
      for (int x = 0; x < dec.cols; ++x)
        if (r.mask_image.at(y, x))
          for (int ch = 0; ch < dec.channels; ++ch) r.image.at(y, x, ch) = dec.at(y, x, ch);
    r.range = scene.background_range;
    for (int y = 0; y < dr.rows(); ++y)
      for (int x = 0; x < dr.cols(); ++x) {
        if (!r.mask_range.at(y, x)) continue;
        if (dr.valid(y, x)) {
          r.range.set(y, x, dr.range(y, x));
        } else {
          r.range.invalidate(y, x);
        }
      }
  }
}

EditResult run_edit(const EditRequest& req, const Models& m, const RunConfig& cfg, bool exchange,
                    const std::function<void(const std::string&)>& log) {
  NoGradGuard guard;
  EditResult r;
  r.conditions = prepare_conditions(req, m, cfg);
  const SampledLatents z = joint_sample(r.conditions, m, cfg, req.seed, req.steps, exchange, log);
  r.steps = z.steps;
  r.decoded_image = tensor_to_image(m.image_vae.decode_latent(z.image));
  r.decoded_range = tensor_to_range(m.range_vae.decode_latent(z.range));
  r.mask_image = r.conditions.placement.mask_image;
  r.mask_range = r.conditions.placement.mask_range;
  stitch(r, req.scene, req.mode);
  r.points = decode_range(r.range, cfg.synth.calib);
  return r;
}

DepthMap oracle_depth(const EditRequest& req, const RunConfig& cfg) {
  Scene scene = synth_layout(req.scene.seed, cfg.synth);
  scene.target = place_object(find_prototype(req.proto_id), req.pose, kFaceTargetBase);
  return render_camera(scene, cfg.synth.calib, true, false).depth;
}

Models load_edit_models(const RunConfig& cfg, const std::string& ckpt_dir,
                        const std::function<void(const std::string&)>& log, uint64_t* ckpt_hash) {
  for (int stage = 5; stage >= 1; --stage) {
    const std::string path = checkpoint_path(ckpt_dir, stage);
    if (!std::filesystem::exists(path)) continue;
    Checkpoint ck;
    Models m = load_models(cfg, path, &ck);
    if (!ck.complete()) throw SequencingError("checkpoint " + path + " is incomplete");
    if (stage < 5 && log) log("warning: no stage-5 checkpoint; using stage " + std::to_string(stage) + " with gates as stored");
    if (ckpt_hash) *ckpt_hash = fnv1a64(read_file(path));
    return m;
  }
  throw SequencingError("no checkpoint in " + ckpt_dir);
}

void write_edits(const std::vector<EditRequest>& reqs, const std::vector<EditResult>& results, const RunConfig& cfg,
                 const std::string& out_dir, const json& audit_extra) {
  if (reqs.size() != results.size()) throw UsageError("write_edits: request/result count mismatch");
  std::vector<Sample> samples;
  json edits = json::array();
  make_dirs(out_dir + "/exports");
  for (size_t i = 0; i < reqs.size(); ++i) {
    const EditRequest& q = reqs[i];
    const EditResult& r = results[i];
    const Placement& p = r.conditions.placement;
    Sample s;
    s.id = q.scene.id;
    s.split = q.scene.split;
    s.seed = q.scene.seed;
    s.proto_id = q.proto_id;
    s.pose = q.pose;
    s.shadow = q.scene.shadow;
    s.image = r.image;
    s.image_shadow_free = r.image;
    s.background = q.scene.background;
    s.range = r.range;
    s.background_range = q.scene.background_range;
    s.depth = oracle_depth(q, cfg);
    s.mask_image = r.mask_image;
    s.mask_range = r.mask_range;
    s.object_rgb = p.object.rgb;
    s.object_depth = p.object.depth;
    s.object_silhouette = p.object.silhouette;
    samples.push_back(std::move(s));

    const std::string stem = out_dir + "/exports/" + q.scene.id;
    write_ppm(r.image, stem + ".ppm");
    write_ppm(r.conditions.pasted_image, stem + "_pasted.ppm");
    write_ply(r.points, stem + ".ply");
    write_range_pgm(r.range, stem + "_range.pgm");

    int mi = 0, mr = 0;
    for (auto v : r.mask_image.data) mi += v;
    for (auto v : r.mask_range.data) mr += v;
    edits.push_back({{"scene", q.scene.id},
                     {"proto", q.proto_id},
                     {"pose", {q.pose.x, q.pose.y, q.pose.yaw}},
                     {"mode", edit_mode_name(q.mode)},
                     {"seed", q.seed},
                     {"steps", r.steps},
                     {"mask_image_pixels", mi},
                     {"mask_range_cells", mr},
                     {"pasted_image_hash", hex64(fnv1a64(r.conditions.pasted_image.data.data(),
                                                         r.conditions.pasted_image.data.size() * sizeof(float)))},
                     {"pasted_range_valid", r.conditions.pasted_range.valid_count()},
                     {"cross_valid_cells",
                      {r.conditions.maps.image_to_range[0].valid_count(), r.conditions.maps.range_to_image[0].valid_count()}}});
  }
  write_corpus(samples, out_dir, cfg.synth, cfg.seed, cfg.hash());
  json audit = audit_extra;
  audit["config_hash"] = hex64(cfg.hash());
  audit["edits"] = edits;
  write_file_atomic(out_dir + "/audit.json", audit.dump(2) + "\n");
}

}  // namespace mted

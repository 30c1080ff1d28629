#pragma once

// Inference: conditions from an edit request, joint reverse diffusion, decode
// and stitch back into the scene.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mted/config.hpp"
#include "mted/scene.hpp"
#include "mted/training.hpp"

namespace mted {

enum class EditMode { kMaskBounded, kUnconstrained };

EditMode parse_edit_mode(const std::string& s);  // "mask-bounded" | "unconstrained"
std::string edit_mode_name(EditMode m);

struct EditRequest {
  Sample scene;  // its background and background range are the canvas
  std::string proto_id;
  Pose pose;
  EditMode mode = EditMode::kMaskBounded;
  uint64_t seed = 0;
  int steps = 0;  // 0 = config default
};

// The request's own object at its own pose (held-in reconstruction).
EditRequest reconstruction_request(const Sample& s, uint64_t seed, EditMode mode = EditMode::kMaskBounded);

struct EditConditions {
  Placement placement;
  Image pasted_image;
  RangeImage pasted_range;
  Image crop;  // object crop feeding the semantic encoders
  Tensor hp_image, hp_range;
  CrossMaps maps;
};

// Throws PlacementError when the object is not visible.
EditConditions prepare_conditions(const EditRequest& req, const Models& m, const RunConfig& cfg);

struct SampledLatents {
  Tensor image, range;
  int steps = 0;
};

// Shared timestep, one noise stream per modality. With exchange off each
// branch runs alone (no cross-modality module at all).
SampledLatents joint_sample(const EditConditions& c, const Models& m, const RunConfig& cfg, uint64_t seed,
                            int steps = 0, bool exchange = true,
                            const std::function<void(const std::string&)>& log = {});

struct EditResult {
  Image image;
  RangeImage range;
  PointCloud points;  // every valid cell of the edited range image
  Mask mask_image, mask_range;
  Image decoded_image;
  RangeImage decoded_range;
  EditConditions conditions;
  int steps = 0;
};

// Mask-bounded copies decoded content inside the masks only; unconstrained
// takes the decoded output everywhere.
void stitch(EditResult& r, const Sample& scene, EditMode mode);

EditResult run_edit(const EditRequest& req, const Models& m, const RunConfig& cfg, bool exchange = true,
                    const std::function<void(const std::string&)>& log = {});

// Camera depth of the scene layout with the requested object in place of the
// original target; the reference for alignment scoring.
DepthMap oracle_depth(const EditRequest& req, const RunConfig& cfg);

// Stage-5 checkpoint when present, otherwise the latest completed stage with
// a warning. Fills the checkpoint file hash when asked.
Models load_edit_models(const RunConfig& cfg, const std::string& ckpt_dir,
                        const std::function<void(const std::string&)>& log = {}, uint64_t* ckpt_hash = nullptr);

// Writes edits as a corpus (ids kept, so eval can pair them with the source
// corpus), PPM/PLY exports and audit.json.
void write_edits(const std::vector<EditRequest>& reqs, const std::vector<EditResult>& results, const RunConfig& cfg,
                 const std::string& out_dir, const nlohmann::json& audit_extra);

}  // namespace mted

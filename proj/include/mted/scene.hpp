#pragma once

// Procedural paired camera/LiDAR scenes: a ground plane, a surrounding
// backdrop, a few distractor boxes and one target object. Everything is
// ray-cast analytically, so camera depth and LiDAR range are exact.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mted/geometry.hpp"
#include "mted/grid.hpp"

namespace mted {

enum class ShapeKind { kBox, kBoxWithCab, kCylinderOnBox };

struct ObjectPrototype {
  std::string id;
  ShapeKind kind = ShapeKind::kBox;
  double length = 1, width = 1, height = 1;  // meters, along local y / x / z
  std::array<float, 3> albedo{0.5f, 0.5f, 0.5f};
  uint64_t detail_seed = 0;

  // Throws ConfigError unless every dimension is positive.
  void validate() const;
};

// Built-in shapes: sedan, van, truck, tanker, crate, roller.
const std::vector<ObjectPrototype>& prototype_library();
// Throws ConfigError for an unknown id.
const ObjectPrototype& find_prototype(const std::string& id);

// Position of the object's base center in the LiDAR frame. z is the height
// of the base above the ground plane (0 = standing on it).
struct Pose {
  double x = 0, y = 0, z = 0;
  double yaw = 0;  // about +z, 0 = object length along +y
  bool operator==(const Pose&) const = default;
};

inline constexpr double kGroundZ = -1.7;       // ground plane height in the LiDAR frame
inline constexpr double kBackdropRadius = 45;  // everything beyond is a cylindrical backdrop

// Face ids written by the renderers.
inline constexpr int kFaceNone = 0;
inline constexpr int kFaceGround = 1;
inline constexpr int kFaceBackdrop = 2;
inline constexpr int kFaceDistractorBase = 10;  // + 10 * distractor + face
inline constexpr int kFaceTargetBase = 100;     // + 10 * part + face
// Box faces are 0..5, cylinder side 6, cylinder caps 7 and 8.
bool face_is_planar(int face);
bool face_is_target(int face);

// One axis-aligned solid in an object's local frame (x side, y forward, z up
// from the base). Cylinders run along local y.
struct Part {
  enum Kind { kBox, kCylinder } kind = kBox;
  Vec3 lo, hi;             // box bounds; cylinder uses lo.y/hi.y as its extent
  double radius = 0;       // cylinder
  double axis_x = 0, axis_z = 0;
};

struct PlacedObject {
  std::vector<Part> parts;
  Pose pose;
  std::array<float, 3> albedo{};
  uint64_t detail_seed = 0;
  int face_base = 0;
  double height = 0;
  double length = 0, width = 0;
};

PlacedObject place_object(const ObjectPrototype& proto, const Pose& pose, int face_base);

struct Hit {
  double t = 0;  // ray parameter
  Vec3 point;
  Vec3 normal;
  int face = kFaceNone;
  bool valid() const { return face != kFaceNone; }
};

// Nearest intersection along origin + t * dir, t > 1e-9.
Hit intersect_object(const PlacedObject& obj, const Vec3& origin, const Vec3& dir);

struct Scene {
  uint64_t seed = 0;
  PlacedObject target;
  std::vector<PlacedObject> distractors;
  Vec3 light;  // unit vector towards the light
};

Hit trace_scene(const Scene& scene, const Vec3& origin, const Vec3& dir, bool with_target);

struct CameraView {
  Image rgb;
  DepthMap depth;
  Grid<int32_t> face;
};

struct LidarView {
  RangeImage range;
  Grid<int32_t> face;
};

// Target alone, rendered by the camera. Pixels the object misses are black
// with zero depth.
struct ObjectRender {
  Image rgb;
  DepthMap depth;
  Mask silhouette;
  Grid<int32_t> face;
};

ObjectRender render_object(const ObjectPrototype& proto, const Pose& pose, const Calibration& calib);
// Target alone on the LiDAR grid.
LidarView render_object_lidar(const ObjectPrototype& proto, const Pose& pose,
                              const Calibration& calib);

CameraView render_camera(const Scene& scene, const Calibration& calib, bool with_target,
                         bool shadows);
LidarView render_lidar(const Scene& scene, const Calibration& calib, bool with_target);
bool in_shadow(const Scene& scene, const Vec3& ground_point);

// Bounding box of the nonzero cells grown by margin * (box diagonal), clipped.
Mask box_mask(const Mask& silhouette, double margin);
Mask range_silhouette(const RangeImage& ri);

struct SynthConfig {
  Calibration calib = Calibration::toy_default();
  bool shadows = true;
  int min_distractors = 0;
  int max_distractors = 3;
  double x_min = -2.5, x_max = 2.5;
  double y_min = 7.0, y_max = 13.0;
  double mask_margin = 0.12;
  int min_silhouette_pixels = 30;
  std::vector<std::string> prototypes;  // empty = whole library

  void validate() const;
};

struct Sample {
  std::string id;
  std::string split;  // train | test
  uint64_t seed = 0;
  std::string proto_id;
  Pose pose;
  bool shadow = false;

  Image image;              // scene with the object (shadowed when shadow is set)
  Image image_shadow_free;  // scene with the object, no cast shadow
  Image background;         // scene without the object
  RangeImage range;
  RangeImage background_range;
  DepthMap depth;           // oracle camera depth of the full scene
  Mask mask_image;
  Mask mask_range;
  Image object_rgb;
  DepthMap object_depth;
  Mask object_silhouette;

  bool operator==(const Sample&) const = default;
};

// Scene layout only; a pure function of (seed, config).
Scene synth_layout(uint64_t seed, const SynthConfig& config, std::string* proto_id = nullptr);
Sample synth_scene(uint64_t seed, const SynthConfig& config);

// Masks and object prior for an arbitrary placement of a prototype.
struct Placement {
  ObjectRender object;
  LidarView object_lidar;
  Mask mask_image;
  Mask mask_range;
};
Placement place_for_edit(const ObjectPrototype& proto, const Pose& pose, const Calibration& calib,
                         double mask_margin);

// 8-bit binary PPM of a [0, 1] image.
void write_ppm(const Image& img, const std::string& path);

}  // namespace mted

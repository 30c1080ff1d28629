#include "mted/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mted/error.hpp"
#include "mted/rng.hpp"

namespace mted {

void ObjectPrototype::validate() const {
  if (!(length > 0) || !(width > 0) || !(height > 0)) {
    throw ConfigError("prototype '" + id + "': dimensions must be positive");
  }
}

const std::vector<ObjectPrototype>& prototype_library() {
  static const std::vector<ObjectPrototype> lib = {
      {"sedan", ShapeKind::kBoxWithCab, 4.2, 1.8, 1.5, {0.78f, 0.16f, 0.12f}, 11},
      {"van", ShapeKind::kBox, 4.8, 2.0, 2.1, {0.86f, 0.86f, 0.80f}, 23},
      {"truck", ShapeKind::kBoxWithCab, 6.0, 2.3, 2.8, {0.20f, 0.36f, 0.72f}, 37},
      {"tanker", ShapeKind::kCylinderOnBox, 6.0, 2.3, 2.8, {0.70f, 0.71f, 0.74f}, 41},
      {"crate", ShapeKind::kBox, 1.6, 1.6, 1.4, {0.62f, 0.44f, 0.24f}, 53},
      {"roller", ShapeKind::kCylinderOnBox, 3.0, 2.0, 2.2, {0.92f, 0.76f, 0.10f}, 67},
  };
  return lib;
}

const ObjectPrototype& find_prototype(const std::string& id) {
  for (const auto& p : prototype_library()) {
    if (p.id == id) return p;
  }
  std::string known;
  for (const auto& p : prototype_library()) known += (known.empty() ? "" : ", ") + p.id;
  throw ConfigError("unknown prototype '" + id + "' (known: " + known + ")");
}

bool face_is_planar(int face) {
  if (face == kFaceGround) return true;
  if (face < kFaceDistractorBase) return false;
  return face % 10 != 6;
}

bool face_is_target(int face) { return face >= kFaceTargetBase; }

namespace {

double wrap_yaw(double yaw) {
  double y = std::fmod(yaw, 2 * M_PI);
  if (y < 0) y += 2 * M_PI;
  return y;
}

Part box(double x0, double x1, double y0, double y1, double z0, double z1) {
  Part p;
  p.kind = Part::kBox;
  p.lo = {x0, y0, z0};
  p.hi = {x1, y1, z1};
  return p;
}

// Smooth value noise in [0, 1] on a unit lattice.
double lattice(uint64_t seed, int64_t ix, int64_t iy) {
  const uint64_t h = mix_seed(seed, mix_seed(static_cast<uint64_t>(ix), static_cast<uint64_t>(iy)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double value_noise(uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
  double ax = x - fx, ay = y - fy;
  ax = ax * ax * (3 - 2 * ax);
  ay = ay * ay * (3 - 2 * ay);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a * (1 - ax) + b * ax) * (1 - ay) + (c * (1 - ax) + d * ax) * ay;
}

struct Frame {
  Vec3 base;
  double c = 1, s = 0;
  Vec3 to_local(const Vec3& v) const { return {c * v.x + s * v.y, -s * v.x + c * v.y, v.z}; }
  Vec3 to_world(const Vec3& v) const { return {c * v.x - s * v.y, s * v.x + c * v.y, v.z}; }
};

Frame frame_of(const PlacedObject& obj) {
  const double yaw = wrap_yaw(obj.pose.yaw);
  return {{obj.pose.x, obj.pose.y, kGroundZ + obj.pose.z}, std::cos(yaw), std::sin(yaw)};
}

struct LocalHit {
  double t = INFINITY;
  Vec3 normal;
  int face = -1;
};

void hit_box(const Part& p, const Vec3& o, const Vec3& d, LocalHit& best) {
  const double oo[3] = {o.x, o.y, o.z}, dd[3] = {d.x, d.y, d.z};
  const double lo[3] = {p.lo.x, p.lo.y, p.lo.z}, hi[3] = {p.hi.x, p.hi.y, p.hi.z};
  double t_in = -INFINITY, t_out = INFINITY;
  int axis = -1;
  bool from_low = false;
  for (int a = 0; a < 3; ++a) {
    if (dd[a] == 0.0) {
      if (oo[a] < lo[a] || oo[a] > hi[a]) return;
      continue;
    }
    double t0 = (lo[a] - oo[a]) / dd[a], t1 = (hi[a] - oo[a]) / dd[a];
    const bool low = dd[a] > 0;
    if (!low) std::swap(t0, t1);
    if (t0 > t_in) {
      t_in = t0;
      axis = a;
      from_low = low;
    }
    t_out = std::min(t_out, t1);
  }
  if (axis < 0 || t_in > t_out || t_in <= 1e-9 || t_in >= best.t) return;
  best.t = t_in;
  best.face = 2 * axis + (from_low ? 0 : 1);
  double n[3] = {0, 0, 0};
  n[axis] = from_low ? -1 : 1;
  best.normal = {n[0], n[1], n[2]};
}

void hit_cylinder(const Part& p, const Vec3& o, const Vec3& d, LocalHit& best) {
  const double ox = o.x - p.axis_x, oz = o.z - p.axis_z;
  const double a = d.x * d.x + d.z * d.z;
  const double r2 = p.radius * p.radius;
  if (a > 0) {
    const double b = 2 * (ox * d.x + oz * d.z);
    const double c = ox * ox + oz * oz - r2;
    const double disc = b * b - 4 * a * c;
    if (disc >= 0) {
      const double t = (-b - std::sqrt(disc)) / (2 * a);
      const double y = o.y + t * d.y;
      if (t > 1e-9 && t < best.t && y >= p.lo.y && y <= p.hi.y) {
        best.t = t;
        best.face = 6;
        best.normal = Vec3{ox + t * d.x, 0, oz + t * d.z} * (1.0 / p.radius);
      }
    }
  }
  if (d.y != 0) {
    const double cap_y = d.y > 0 ? p.lo.y : p.hi.y;
    const double t = (cap_y - o.y) / d.y;
    const double x = ox + t * d.x, z = oz + t * d.z;
    if (t > 1e-9 && t < best.t && x * x + z * z <= r2) {
      best.t = t;
      best.face = d.y > 0 ? 7 : 8;
      best.normal = {0, d.y > 0 ? -1.0 : 1.0, 0};
    }
  }
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

const Vec3 kLight = [] {
  const Vec3 l{0.45, 0.35, 0.82};
  return l * (1.0 / l.norm());
}();

std::array<float, 3> shade_object(const PlacedObject& obj, const Hit& hit, const Vec3& light) {
  const Frame f = frame_of(obj);
  const Vec3 local = f.to_local(hit.point - f.base);
  Rng rng(obj.detail_seed);
  const double fz = rng.uniform(1.5, 3.0), fy = rng.uniform(0.6, 1.4), phase = rng.uniform();
  const bool stripe = static_cast<int64_t>(std::floor(local.z * fz + phase)) % 2 != 0;
  const bool panel = static_cast<int64_t>(std::floor(local.y * fy + local.x * fy + phase)) % 2 != 0;
  const double pattern = (stripe ? 0.8 : 1.0) * (panel ? 0.92 : 1.0);
  const double lambert = 0.35 + 0.65 * std::max(0.0, hit.normal.dot(light));
  return {clamp01(obj.albedo[0] * pattern * lambert), clamp01(obj.albedo[1] * pattern * lambert),
          clamp01(obj.albedo[2] * pattern * lambert)};
}

std::array<float, 3> shade_background(const Scene& scene, const Hit& hit) {
  const Vec3& p = hit.point;
  if (hit.face == kFaceGround) {
    const double n = value_noise(scene.seed ^ 0x9e37u, p.x / 4.0, p.y / 4.0);
    const double fine = value_noise(scene.seed ^ 0x51edu, p.x * 1.5, p.y * 1.5);
    const double g = 0.36 + 0.16 * n + 0.04 * fine;
    return {clamp01(g), clamp01(g * 0.98), clamp01(g * 0.93)};
  }
  const double az = std::atan2(p.x, p.y);
  const double height = p.z - kGroundZ;
  const double skyline = 4.0 + 9.0 * value_noise(scene.seed ^ 0x2545u, az * 5.0, 0.5);
  if (height < skyline) {
    const double n = value_noise(scene.seed ^ 0x7f4au, az * 12.0, height / 3.0);
    const double tone = value_noise(scene.seed ^ 0x1234u, az * 2.0, 0.0);
    return {clamp01(0.30 + 0.25 * n * tone), clamp01(0.34 + 0.22 * n), clamp01(0.30 + 0.12 * tone)};
  }
  const double elev = std::atan2(height - skyline, kBackdropRadius);
  const double k = std::clamp(elev / 0.5, 0.0, 1.0);
  return {clamp01(0.62 - 0.30 * k), clamp01(0.72 - 0.22 * k), clamp01(0.86 - 0.08 * k)};
}

bool trace_target_only(const Scene& scene, const Vec3& o, const Vec3& d, Hit& hit) {
  hit = intersect_object(scene.target, o, d);
  return hit.valid();
}

std::vector<std::array<int, 4>> box_extent(const Mask& m) {
  int r0 = m.rows, r1 = -1, c0 = m.cols, c1 = -1;
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      if (!m.at(r, c)) continue;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (r1 < 0) return {};
  return {{r0, r1, c0, c1}};
}

}  // namespace

PlacedObject place_object(const ObjectPrototype& proto, const Pose& pose, int face_base) {
  proto.validate();
  PlacedObject obj;
  obj.pose = pose;
  obj.albedo = proto.albedo;
  obj.detail_seed = proto.detail_seed;
  obj.face_base = face_base;
  obj.height = proto.height;
  obj.length = proto.length;
  obj.width = proto.width;
  const double l = proto.length / 2, w = proto.width / 2, h = proto.height;
  switch (proto.kind) {
    case ShapeKind::kBox:
      obj.parts.push_back(box(-w, w, -l, l, 0, h));
      break;
    case ShapeKind::kBoxWithCab:
      obj.parts.push_back(box(-w, w, -l, l, 0, 0.55 * h));
      obj.parts.push_back(box(-0.9 * w, 0.9 * w, -0.6 * l, 0.4 * l, 0.55 * h, h));
      break;
    case ShapeKind::kCylinderOnBox: {
      obj.parts.push_back(box(-w, w, -l, l, 0, 0.3 * h));
      Part cyl;
      cyl.kind = Part::kCylinder;
      cyl.radius = std::min(w, 0.35 * h);
      cyl.axis_x = 0;
      cyl.axis_z = 0.3 * h + cyl.radius;
      cyl.lo = {0, -0.9 * l, 0};
      cyl.hi = {0, 0.9 * l, 0};
      obj.parts.push_back(cyl);
      break;
    }
  }
  return obj;
}

Hit intersect_object(const PlacedObject& obj, const Vec3& origin, const Vec3& dir) {
  const Frame f = frame_of(obj);
  const Vec3 o = f.to_local(origin - f.base);
  const Vec3 d = f.to_local(dir);
  LocalHit best;
  int part = -1;
  for (size_t i = 0; i < obj.parts.size(); ++i) {
    const int before = best.face;
    const double t_before = best.t;
    if (obj.parts[i].kind == Part::kBox) {
      hit_box(obj.parts[i], o, d, best);
    } else {
      hit_cylinder(obj.parts[i], o, d, best);
    }
    if (best.t != t_before || best.face != before) part = static_cast<int>(i);
  }
  Hit hit;
  if (part < 0) return hit;
  hit.t = best.t;
  hit.point = origin + dir * best.t;
  hit.normal = f.to_world(best.normal);
  hit.face = obj.face_base + 10 * part + best.face;
  return hit;
}

Hit trace_scene(const Scene& scene, const Vec3& o, const Vec3& d, bool with_target) {
  Hit best;
  best.t = INFINITY;
  auto take = [&](const Hit& h) {
    if (h.valid() && h.t < best.t) best = h;
  };
  if (d.z < 0) {
    const double t = (kGroundZ - o.z) / d.z;
    if (t > 1e-9) take({t, o + d * t, {0, 0, 1}, kFaceGround});
  }
  const double a = d.x * d.x + d.y * d.y;
  if (a > 0) {
    const double b = 2 * (o.x * d.x + o.y * d.y);
    const double c = o.x * o.x + o.y * o.y - kBackdropRadius * kBackdropRadius;
    const double t = (-b + std::sqrt(b * b - 4 * a * c)) / (2 * a);
    const Vec3 p = o + d * t;
    take({t, p, Vec3{-p.x, -p.y, 0} * (1.0 / kBackdropRadius), kFaceBackdrop});
  }
  for (const auto& obj : scene.distractors) take(intersect_object(obj, o, d));
  if (with_target) take(intersect_object(scene.target, o, d));
  if (!best.valid()) best.t = 0;
  return best;
}

bool in_shadow(const Scene& scene, const Vec3& q) {
  const PlacedObject& obj = scene.target;
  const Vec3& L = scene.light;
  const double hl = std::hypot(L.x, L.y);
  if (hl == 0 || L.z <= 0) return false;
  const double ux = -L.x / hl, uy = -L.y / hl;  // shadow direction on the ground
  const double vx = -uy, vy = ux;
  const double yaw = wrap_yaw(obj.pose.yaw);
  const double fx = -std::sin(yaw), fy = std::cos(yaw);  // object forward
  const double sx = std::cos(yaw), sy = std::sin(yaw);   // object side
  const double half_l = obj.length / 2, half_w = obj.width / 2;
  const double eu = half_l * std::abs(fx * ux + fy * uy) + half_w * std::abs(sx * ux + sy * uy);
  const double ev = half_l * std::abs(fx * vx + fy * vy) + half_w * std::abs(sx * vx + sy * vy);
  const double reach = (obj.height + obj.pose.z) * hl / L.z;
  const double cx = obj.pose.x + ux * reach / 2, cy = obj.pose.y + uy * reach / 2;
  const double a = eu + reach / 2, b = ev;
  const double du = (q.x - cx) * ux + (q.y - cy) * uy;
  const double dv = (q.x - cx) * vx + (q.y - cy) * vy;
  return (du / a) * (du / a) + (dv / b) * (dv / b) <= 1.0;
}

namespace {

Vec3 pixel_ray(const Calibration& calib, int row, int col) {
  const Vec3 d_cam{(col - calib.K.cx) / calib.K.fx, (row - calib.K.cy) / calib.K.fy, 1.0};
  return rotate(transpose(calib.R_CR), d_cam);
}

Vec3 cell_ray(const Calibration& calib, int row, int col) {
  return spherical_to_cartesian(calib.grid.phi_center(row), calib.grid.theta_center(col), 1.0);
}

}  // namespace

CameraView render_camera(const Scene& scene, const Calibration& calib, bool with_target,
                         bool shadows) {
  const int h = calib.image_height, w = calib.image_width;
  CameraView view{Image(h, w, 3), DepthMap(h, w), Grid<int32_t>(h, w)};
  const Vec3 origin = calib.camera_center();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Hit hit = trace_scene(scene, origin, pixel_ray(calib, r, c), with_target);
      if (!hit.valid()) continue;
      std::array<float, 3> rgb;
      if (hit.face >= kFaceTargetBase) {
        rgb = shade_object(scene.target, hit, scene.light);
      } else if (hit.face >= kFaceDistractorBase) {
        rgb = shade_object(scene.distractors[(hit.face - kFaceDistractorBase) / 10], hit,
                           scene.light);
      } else {
        rgb = shade_background(scene, hit);
        if (shadows && with_target && hit.face == kFaceGround && in_shadow(scene, hit.point)) {
          for (float& v : rgb) v *= 0.55f;
        }
      }
      for (int ch = 0; ch < 3; ++ch) view.rgb.at(r, c, ch) = rgb[ch];
      view.depth.at(r, c) = static_cast<float>(hit.t);
      view.face.at(r, c) = hit.face;
    }
  }
  return view;
}

LidarView render_lidar(const Scene& scene, const Calibration& calib, bool with_target) {
  const RangeGrid& g = calib.grid;
  LidarView view{RangeImage(g.n_phi, g.n_theta), Grid<int32_t>(g.n_phi, g.n_theta)};
  PointCloud returns;
  for (int r = 0; r < g.n_phi; ++r) {
    for (int c = 0; c < g.n_theta; ++c) {
      const Hit hit = trace_scene(scene, {0, 0, 0}, cell_ray(calib, r, c), with_target);
      if (!hit.valid()) continue;
      returns.points.push_back(hit.point);
      view.face.at(r, c) = hit.face;
    }
  }
  view.range = encode_range(returns, calib);
  return view;
}

ObjectRender render_object(const ObjectPrototype& proto, const Pose& pose, const Calibration& calib) {
  const int h = calib.image_height, w = calib.image_width;
  Scene scene;
  scene.target = place_object(proto, pose, kFaceTargetBase);
  scene.light = kLight;
  ObjectRender out{Image(h, w, 3), DepthMap(h, w), Mask(h, w), Grid<int32_t>(h, w)};
  const Vec3 origin = calib.camera_center();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      Hit hit;
      if (!trace_target_only(scene, origin, pixel_ray(calib, r, c), hit)) continue;
      const auto rgb = shade_object(scene.target, hit, scene.light);
      for (int ch = 0; ch < 3; ++ch) out.rgb.at(r, c, ch) = rgb[ch];
      out.depth.at(r, c) = static_cast<float>(hit.t);
      out.silhouette.at(r, c) = 1;
      out.face.at(r, c) = hit.face;
    }
  }
  return out;
}

LidarView render_object_lidar(const ObjectPrototype& proto, const Pose& pose,
                              const Calibration& calib) {
  const RangeGrid& g = calib.grid;
  Scene scene;
  scene.target = place_object(proto, pose, kFaceTargetBase);
  LidarView view{RangeImage(g.n_phi, g.n_theta), Grid<int32_t>(g.n_phi, g.n_theta)};
  PointCloud returns;
  for (int r = 0; r < g.n_phi; ++r) {
    for (int c = 0; c < g.n_theta; ++c) {
      Hit hit;
      if (!trace_target_only(scene, {0, 0, 0}, cell_ray(calib, r, c), hit)) continue;
      returns.points.push_back(hit.point);
      view.face.at(r, c) = hit.face;
    }
  }
  view.range = encode_range(returns, calib);
  return view;
}

Mask box_mask(const Mask& silhouette, double margin) {
  Mask out(silhouette.rows, silhouette.cols);
  const auto ext = box_extent(silhouette);
  if (ext.empty()) return out;
  const auto [r0, r1, c0, c1] = ext[0];
  const int grow = static_cast<int>(std::ceil(margin * std::hypot(r1 - r0 + 1, c1 - c0 + 1)));
  for (int r = std::max(0, r0 - grow); r <= std::min(out.rows - 1, r1 + grow); ++r) {
    for (int c = std::max(0, c0 - grow); c <= std::min(out.cols - 1, c1 + grow); ++c) out.at(r, c) = 1;
  }
  return out;
}

Mask range_silhouette(const RangeImage& ri) {
  Mask m(ri.rows(), ri.cols());
  for (int r = 0; r < ri.rows(); ++r) {
    for (int c = 0; c < ri.cols(); ++c) m.at(r, c) = ri.valid(r, c);
  }
  return m;
}

void SynthConfig::validate() const {
  calib.validate();
  if (min_distractors < 0 || max_distractors < min_distractors || max_distractors > 8) {
    throw ConfigError("synth: distractor count range must satisfy 0 <= min <= max <= 8");
  }
  if (!(x_min <= x_max) || !(y_min <= y_max) || !(y_min > 0)) {
    throw ConfigError("synth: placement ranges must be ordered with y_min > 0");
  }
  if (!(mask_margin >= 0)) throw ConfigError("synth: mask_margin must be non-negative");
  if (min_silhouette_pixels < 1) throw ConfigError("synth: min_silhouette_pixels must be >= 1");
  if (calib.image_height % 4 || calib.image_width % 4 || calib.grid.n_phi % 4 || calib.grid.n_theta % 4) {
    throw ConfigError("synth: image and range grid extents must be multiples of 4");
  }
  for (const auto& id : prototypes) find_prototype(id);
}

namespace {

bool placement_ok(const ObjectPrototype& proto, const Pose& pose, const SynthConfig& cfg) {
  const ObjectRender obj = render_object(proto, pose, cfg.calib);
  const auto ext = box_extent(obj.silhouette);
  if (ext.empty()) return false;
  int pixels = 0;
  for (uint8_t v : obj.silhouette.data) pixels += v;
  if (pixels < cfg.min_silhouette_pixels) return false;
  const auto [r0, r1, c0, c1] = ext[0];
  if (r0 < 2 || c0 < 2 || r1 > obj.silhouette.rows - 3 || c1 > obj.silhouette.cols - 3) return false;
  const Mask rs = range_silhouette(render_object_lidar(proto, pose, cfg.calib).range);
  const auto rext = box_extent(rs);
  if (rext.empty()) return false;
  const auto [q0, q1, p0, p1] = rext[0];
  return q0 >= 1 && p0 >= 1 && q1 <= rs.rows - 2 && p1 <= rs.cols - 2;
}

}  // namespace

Scene synth_layout(uint64_t seed, const SynthConfig& cfg, std::string* proto_id) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x5ce9e));
  std::vector<std::string> ids = cfg.prototypes;
  if (ids.empty()) {
    for (const auto& p : prototype_library()) ids.push_back(p.id);
  }
  const ObjectPrototype& proto = find_prototype(ids[rng.integer(0, static_cast<int64_t>(ids.size()) - 1)]);

  Scene scene;
  scene.seed = seed;
  scene.light = kLight;
  bool placed = false;
  for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
    Pose pose;
    pose.x = rng.uniform(cfg.x_min, cfg.x_max);
    pose.y = rng.uniform(cfg.y_min, cfg.y_max);
    pose.yaw = rng.uniform(0, 2 * M_PI);
    if (placement_ok(proto, pose, cfg)) {
      scene.target = place_object(proto, pose, kFaceTargetBase);
      placed = true;
    }
  }
  if (!placed) {
    throw ConfigError("synth: no placement of '" + proto.id +
                      "' inside the camera and LiDAR fields of view after 200 attempts");
  }
  const int n = static_cast<int>(rng.integer(cfg.min_distractors, cfg.max_distractors));
  const double y_near = scene.target.pose.y + 7.0;
  for (int k = 0; k < n; ++k) {
    ObjectPrototype d;
    d.id = "distractor";
    d.kind = ShapeKind::kBox;
    d.length = rng.uniform(1.0, 4.0);
    d.width = rng.uniform(1.0, 2.5);
    d.height = rng.uniform(1.0, 3.0);
    d.albedo = {static_cast<float>(rng.uniform(0.2, 0.8)), static_cast<float>(rng.uniform(0.2, 0.8)),
                static_cast<float>(rng.uniform(0.2, 0.8))};
    d.detail_seed = rng.next_u64();
    Pose p;
    p.x = rng.uniform(-14.0, 14.0);
    p.y = rng.uniform(std::min(y_near, 37.0), 38.0);
    p.yaw = rng.uniform(0, 2 * M_PI);
    scene.distractors.push_back(place_object(d, p, kFaceDistractorBase + 10 * k));
  }
  if (proto_id) *proto_id = proto.id;
  return scene;
}

Placement place_for_edit(const ObjectPrototype& proto, const Pose& pose, const Calibration& calib,
                         double mask_margin) {
  Placement p;
  p.object = render_object(proto, pose, calib);
  if (box_extent(p.object.silhouette).empty()) {
    throw PlacementError("object '" + proto.id + "' at (" + std::to_string(pose.x) + ", " +
                         std::to_string(pose.y) + ") is not visible from the camera");
  }
  p.object_lidar = render_object_lidar(proto, pose, calib);
  p.mask_image = box_mask(p.object.silhouette, mask_margin);
  p.mask_range = box_mask(range_silhouette(p.object_lidar.range), mask_margin);
  return p;
}

Sample synth_scene(uint64_t seed, const SynthConfig& cfg) {
  std::string proto_id;
  const Scene scene = synth_layout(seed, cfg, &proto_id);
  const Calibration& calib = cfg.calib;
  Sample s;
  s.seed = seed;
  s.proto_id = proto_id;
  s.pose = scene.target.pose;
  s.shadow = cfg.shadows;

  const CameraView full = render_camera(scene, calib, true, cfg.shadows);
  s.image = full.rgb;
  s.depth = full.depth;
  s.image_shadow_free = cfg.shadows ? render_camera(scene, calib, true, false).rgb : full.rgb;
  s.background = render_camera(scene, calib, false, false).rgb;
  s.range = render_lidar(scene, calib, true).range;
  s.background_range = render_lidar(scene, calib, false).range;

  const Placement p = place_for_edit(find_prototype(proto_id), s.pose, calib, cfg.mask_margin);
  s.mask_image = p.mask_image;
  s.mask_range = p.mask_range;
  s.object_rgb = p.object.rgb;
  s.object_depth = p.object.depth;
  s.object_silhouette = p.object.silhouette;
  return s;
}

void write_ppm(const Image& img, const std::string& path) {
  if (img.channels != 3) throw DimensionError("write_ppm: expected 3 channels, got " + std::to_string(img.channels));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << "P6\n" << img.cols << ' ' << img.rows << "\n255\n";
  std::vector<unsigned char> bytes(img.data.size());
  for (size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace mted

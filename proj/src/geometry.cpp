#include "mted/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mted/error.hpp"

namespace mted {

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 rotate(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
          m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
          m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}

Mat3 transpose(const Mat3& m) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  }
  return t;
}

Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
    }
  }
  return c;
}

Mat3 rotation_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Mat3{{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}

Mat3 rotation_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Mat3{{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

std::optional<std::array<int, 2>> RangeGrid::cell_of(double phi, double theta) const {
  const double fr = (phi_max - phi) / dphi();
  const double fc = (theta - theta_min) / dtheta();
  if (!(fr >= 0.0) || !(fc >= 0.0)) return std::nullopt;
  const auto row = static_cast<int64_t>(std::floor(fr));
  const auto col = static_cast<int64_t>(std::floor(fc));
  if (row >= n_phi || col >= n_theta) return std::nullopt;
  return std::array<int, 2>{static_cast<int>(row), static_cast<int>(col)};
}

void Calibration::validate() const {
  if (!(K.fx > 0) || !(K.fy > 0)) throw ConfigError("calibration: fx and fy must be positive");
  const Mat3 rrt = matmul(R_CR, mted::transpose(R_CR));
  double dev = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) dev = std::max(dev, std::abs(rrt[i][j] - (i == j ? 1.0 : 0.0)));
  }
  const Mat3& r = R_CR;
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  if (dev > 1e-6 || det <= 0) throw ConfigError("calibration: R_CR must be a proper rotation");
  if (!(grid.theta_min < grid.theta_max) || !(grid.phi_min < grid.phi_max)) {
    throw ConfigError("calibration: range grid angle bounds must be increasing");
  }
  if (grid.n_theta < 2 || grid.n_phi < 2) throw ConfigError("calibration: range grid needs at least 2x2 cells");
  if (image_width < 1 || image_height < 1) throw ConfigError("calibration: image extents must be positive");
}

Vec3 Calibration::camera_center() const { return rotate(mted::transpose(R_CR), t_CR * -1.0); }

Vec3 Calibration::to_lidar(const Vec3& p_cam) const {
  return rotate(mted::transpose(R_CR), p_cam - t_CR);
}

Calibration Calibration::toy_default() {
  Calibration c;
  c.image_width = 64;
  c.image_height = 64;
  c.K = {56.0, 56.0, 31.5, 31.5};
  // LiDAR (x right, y forward, z up) to an unpitched camera (x right, y down,
  // z forward), then pitch the camera down.
  const Mat3 axes{{{1, 0, 0}, {0, 0, -1}, {0, 1, 0}}};
  c.R_CR = matmul(rotation_x(8.0 * M_PI / 180.0), axes);
  const Vec3 camera_in_lidar{0.05, 0.25, -0.12};
  c.t_CR = rotate(c.R_CR, camera_in_lidar) * -1.0;
  c.grid = {64, 32, -0.56, 0.56, -0.68, 0.38};
  return c;
}

void RangeImage::set(int row, int col, float r) {
  if (!(r > 0.0f) || !std::isfinite(r)) {
    throw DomainError("range image: range must be positive and finite, got " + std::to_string(r));
  }
  values_.at(row, col) = r;
}

int RangeImage::valid_count() const {
  int n = 0;
  for (float v : values_.data) n += v > 0.0f;
  return n;
}

RangeImage RangeImage::from_values(const Grid<float>& raw) {
  RangeImage ri(raw.rows, raw.cols);
  for (int r = 0; r < raw.rows; ++r) {
    for (int c = 0; c < raw.cols; ++c) {
      const float v = raw.at(r, c);
      if (v > 0.0f && std::isfinite(v)) ri.values_.at(r, c) = v;
    }
  }
  return ri;
}

Vec3 spherical_to_cartesian(double phi, double theta, double r) {
  if (!(r > 0.0) || !std::isfinite(r)) {
    throw DomainError("spherical_to_cartesian: range must be positive, got " + std::to_string(r));
  }
  return {r * std::cos(phi) * std::sin(theta), r * std::cos(phi) * std::cos(theta),
          r * std::sin(phi)};
}

Spherical cartesian_to_spherical(const Vec3& p) {
  const double r = p.norm();
  if (!(r > 0.0)) throw DomainError("cartesian_to_spherical: zero vector");
  return {std::asin(std::clamp(p.z / r, -1.0, 1.0)), std::atan2(p.x, p.y), r};
}

RangeImage encode_range(const PointCloud& pc, const Calibration& calib) {
  RangeImage ri(calib.grid.n_phi, calib.grid.n_theta);
  for (const Vec3& p : pc.points) {
    if (!(p.norm() > 0.0)) continue;
    const Spherical s = cartesian_to_spherical(p);
    const auto cell = calib.grid.cell_of(s.phi, s.theta);
    if (!cell) continue;
    const auto r = static_cast<float>(s.r);
    const auto [row, col] = *cell;
    if (!ri.valid(row, col) || r < ri.range(row, col)) ri.set(row, col, r);
  }
  return ri;
}

PointCloud decode_range(const RangeImage& ri, const Calibration& calib) {
  PointCloud pc;
  for (int row = 0; row < ri.rows(); ++row) {
    for (int col = 0; col < ri.cols(); ++col) {
      if (!ri.valid(row, col)) continue;
      pc.points.push_back(spherical_to_cartesian(calib.grid.phi_center(row),
                                                 calib.grid.theta_center(col),
                                                 ri.range(row, col)));
    }
  }
  return pc;
}

Projection project_to_image(const Vec3& p_lidar, const Calibration& calib) {
  const Vec3 pc = calib.to_camera(p_lidar);
  Projection out;
  out.d = pc.z;
  if (!(pc.z > 0.0)) return out;
  out.u = (calib.K.fx * pc.x + calib.K.cx * pc.z) / pc.z;
  out.v = (calib.K.fy * pc.y + calib.K.cy * pc.z) / pc.z;
  out.valid = std::isfinite(out.u) && std::isfinite(out.v);
  return out;
}

int CorrespondenceMap::valid_count() const {
  int n = 0;
  for (const auto& c : cells) n += c.valid;
  return n;
}

CorrespondenceMap CorrespondenceMap::downsample2() const {
  CorrespondenceMap out((rows + 1) / 2, (cols + 1) / 2);
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) {
      Correspondence e = at(2 * r, 2 * c);
      e.x *= 0.5;
      e.y *= 0.5;
      out.at(r, c) = e;
    }
  }
  return out;
}

namespace {

void require_divisible(int extent, int scale, const char* what) {
  if (scale < 1 || extent % scale != 0) {
    throw DimensionError(std::string(what) + " extent " + std::to_string(extent) +
                         " is not divisible by latent scale " + std::to_string(scale));
  }
}

bool inside_image(double u, double v, const Calibration& calib) {
  return u >= -0.5 && u < calib.image_width - 0.5 && v >= -0.5 && v < calib.image_height - 0.5;
}

}  // namespace

std::optional<float> latent_cell_range(const RangeImage& ri, int i, int j, int s) {
  std::optional<float> best;
  for (int r = i * s - s / 2; r < i * s - s / 2 + s; ++r) {
    for (int c = j * s - s / 2; c < j * s - s / 2 + s; ++c) {
      if (r < 0 || r >= ri.rows() || c < 0 || c >= ri.cols() || !ri.valid(r, c)) continue;
      if (!best || ri.range(r, c) < *best) best = ri.range(r, c);
    }
  }
  return best;
}

CorrespondenceMap build_correspondence(const RangeImage& ri, const Calibration& calib,
                                       int latent_scale) {
  require_divisible(ri.rows(), latent_scale, "range grid row");
  require_divisible(ri.cols(), latent_scale, "range grid column");
  const int s = latent_scale;
  CorrespondenceMap map(ri.rows() / s, ri.cols() / s);
  for (int i = 0; i < map.rows; ++i) {
    for (int j = 0; j < map.cols; ++j) {
      const auto r = latent_cell_range(ri, i, j, s);
      if (!r) continue;
      const Vec3 p = spherical_to_cartesian(calib.grid.phi_center(i * s),
                                            calib.grid.theta_center(j * s), *r);
      const Projection proj = project_to_image(p, calib);
      if (!proj.valid || !inside_image(proj.u, proj.v, calib)) continue;
      map.at(i, j) = {proj.u / s, proj.v / s, proj.d, true};
    }
  }
  return map;
}

CorrespondenceMap build_inverse_correspondence(const RangeImage& ri, const Calibration& calib,
                                               int latent_scale) {
  require_divisible(calib.image_height, latent_scale, "image row");
  require_divisible(calib.image_width, latent_scale, "image column");
  const int s = latent_scale;
  CorrespondenceMap map(calib.image_height / s, calib.image_width / s);
  for (int row = 0; row < ri.rows(); ++row) {
    for (int col = 0; col < ri.cols(); ++col) {
      if (!ri.valid(row, col)) continue;
      const Vec3 p = spherical_to_cartesian(calib.grid.phi_center(row),
                                            calib.grid.theta_center(col), ri.range(row, col));
      const Projection proj = project_to_image(p, calib);
      if (!proj.valid || !inside_image(proj.u, proj.v, calib)) continue;
      const auto li = static_cast<int>(std::lround(proj.v / s));
      const auto lj = static_cast<int>(std::lround(proj.u / s));
      if (li < 0 || li >= map.rows || lj < 0 || lj >= map.cols) continue;
      Correspondence& e = map.at(li, lj);
      if (!e.valid || proj.d < e.depth) {
        e = {static_cast<double>(col) / s, static_cast<double>(row) / s, proj.d, true};
      }
    }
  }
  return map;
}

namespace {

std::optional<double> sample_depth(const DepthMap& depth, double u, double v) {
  if (!std::isfinite(u) || !std::isfinite(v)) return std::nullopt;
  if (u < -0.5 || v < -0.5 || u >= depth.cols - 0.5 || v >= depth.rows - 0.5) return std::nullopt;
  const double fu = std::floor(u), fv = std::floor(v);
  const int x0 = static_cast<int>(fu), y0 = static_cast<int>(fv);
  const double ax = u - fu, ay = v - fv;
  bool all = true;
  double d[4];
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (!depth.contains(ys[k], xs[k]) || !(depth.at(ys[k], xs[k]) > 0.0f)) {
      all = false;
      break;
    }
    d[k] = depth.at(ys[k], xs[k]);
  }
  if (all) {
    const double inv = (1 - ax) * (1 - ay) / d[0] + ax * (1 - ay) / d[1] + (1 - ax) * ay / d[2] +
                       ax * ay / d[3];
    return 1.0 / inv;
  }
  const int nx = static_cast<int>(std::lround(u)), ny = static_cast<int>(std::lround(v));
  if (depth.contains(ny, nx) && depth.at(ny, nx) > 0.0f) return depth.at(ny, nx);
  return std::nullopt;
}

}  // namespace

std::optional<double> range_from_depth_map(const DepthMap& depth, double phi, double theta,
                                           const Calibration& calib) {
  const Vec3 a = rotate(calib.R_CR, spherical_to_cartesian(phi, theta, 1.0));
  if (a.z <= 1e-9) return std::nullopt;
  const Vec3& t = calib.t_CR;
  auto depth_at_range = [&](double r) -> std::optional<double> {
    const Vec3 p = a * r + t;
    if (p.z <= 0) return std::nullopt;
    return sample_depth(depth, calib.K.fx * p.x / p.z + calib.K.cx,
                        calib.K.fy * p.y / p.z + calib.K.cy);
  };
  std::optional<double> d0 =
      sample_depth(depth, calib.K.fx * a.x / a.z + calib.K.cx, calib.K.fy * a.y / a.z + calib.K.cy);
  for (double guess : {2.0, 5.0, 10.0, 20.0, 40.0}) {
    if (d0) break;
    d0 = depth_at_range(guess);
  }
  if (!d0) return std::nullopt;
  double r = (*d0 - t.z) / a.z;
  for (int iter = 0; iter < 64; ++iter) {
    if (!(r > 0)) return std::nullopt;
    const auto d = depth_at_range(r);
    if (!d) return std::nullopt;
    const double next = (*d - t.z) / a.z;
    if (std::abs(next - r) <= 1e-10 * std::max(1.0, r)) return next > 0 ? std::optional(next) : std::nullopt;
    r = next;
  }
  return std::nullopt;
}

RangeImage paste_depth(const RangeImage& ri, const DepthMap& object_depth, const Mask& mask_r,
                       const Calibration& calib, int median_k) {
  if (!mask_r.same_extent(ri.rows(), ri.cols())) {
    throw DimensionError("paste_depth: mask is " + std::to_string(mask_r.rows) + "x" +
                         std::to_string(mask_r.cols) + " but range grid is " +
                         std::to_string(ri.rows()) + "x" + std::to_string(ri.cols()));
  }
  if (!object_depth.same_extent(calib.image_height, calib.image_width)) {
    throw DimensionError("paste_depth: object depth does not match the image extents");
  }
  if (median_k < 1 || median_k % 2 == 0) {
    throw DomainError("paste_depth: median kernel must be odd and >= 1, got " + std::to_string(median_k));
  }
  RangeImage pasted = ri;
  for (int row = 0; row < ri.rows(); ++row) {
    for (int col = 0; col < ri.cols(); ++col) {
      if (!mask_r.at(row, col)) continue;
      const auto r = range_from_depth_map(object_depth, calib.grid.phi_center(row),
                                          calib.grid.theta_center(col), calib);
      if (r) pasted.set(row, col, static_cast<float>(*r));
    }
  }
  if (median_k == 1) return pasted;

  RangeImage filtered = pasted;
  const int half = median_k / 2;
  std::vector<float> window;
  for (int row = 0; row < ri.rows(); ++row) {
    for (int col = 0; col < ri.cols(); ++col) {
      if (!mask_r.at(row, col)) continue;
      window.clear();
      for (int r = row - half; r <= row + half; ++r) {
        for (int c = col - half; c <= col + half; ++c) {
          if (r < 0 || r >= ri.rows() || c < 0 || c >= ri.cols()) continue;
          if (!mask_r.at(r, c) || !pasted.valid(r, c)) continue;
          window.push_back(pasted.range(r, c));
        }
      }
      if (window.empty()) continue;
      std::sort(window.begin(), window.end());
      filtered.set(row, col, window[(window.size() - 1) / 2]);
    }
  }
  return filtered;
}

void write_ply(const PointCloud& pc, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "ply\nformat ascii 1.0\nelement vertex " << pc.size()
     << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  char line[96];
  for (const Vec3& p : pc.points) {
    std::snprintf(line, sizeof line, "%.6g %.6g %.6g\n", static_cast<float>(p.x),
                  static_cast<float>(p.y), static_cast<float>(p.z));
    os << line;
  }
  if (!os) throw IoError("failed writing " + path);
}

void write_xyz(const PointCloud& pc, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  char line[96];
  for (const Vec3& p : pc.points) {
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f\n", p.x, p.y, p.z);
    os << line;
  }
  if (!os) throw IoError("failed writing " + path);
}

void write_range_pgm(const RangeImage& ri, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << "P5\n" << ri.cols() << ' ' << ri.rows() << "\n65535\n";
  for (int row = 0; row < ri.rows(); ++row) {
    for (int col = 0; col < ri.cols(); ++col) {
      long mm = 0;
      if (ri.valid(row, col)) mm = std::clamp(std::lround(ri.range(row, col) * 1000.0), 0L, 65535L);
      const unsigned char be[2] = {static_cast<unsigned char>(mm >> 8),
                                   static_cast<unsigned char>(mm & 0xff)};
      os.write(reinterpret_cast<const char*>(be), 2);
    }
  }
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace mted

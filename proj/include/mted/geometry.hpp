#pragma once

// Camera-LiDAR geometry: spherical coordinates, the range-image codec,
// pinhole projection, latent correspondence maps and depth pasting.
//
// Frames. LiDAR: x right, y forward, z up; elevation phi and azimuth theta
// (measured from +y towards +x) give x = r cos(phi) sin(theta),
// y = r cos(phi) cos(theta), z = r sin(phi). Camera: x right, y down (image v
// grows downward), z forward. Pixel (col, row) has its center at integer
// coordinates (u, v) = (col, row).

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mted/grid.hpp"

namespace mted {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const;
  bool operator==(const Vec3&) const = default;
};

using Mat3 = std::array<std::array<double, 3>, 3>;

Vec3 rotate(const Mat3& m, const Vec3& v);
Mat3 transpose(const Mat3& m);
Mat3 matmul(const Mat3& a, const Mat3& b);
Mat3 rotation_x(double angle);
Mat3 rotation_z(double angle);

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

// Angular layout of the range image. Row 0 is the highest elevation, column 0
// the smallest azimuth; each cell spans an equal angular interval.
struct RangeGrid {
  int n_theta = 0;
  int n_phi = 0;
  double theta_min = 0, theta_max = 0;
  double phi_min = 0, phi_max = 0;

  double dtheta() const { return (theta_max - theta_min) / n_theta; }
  double dphi() const { return (phi_max - phi_min) / n_phi; }
  double theta_center(int col) const { return theta_min + (col + 0.5) * dtheta(); }
  double phi_center(int row) const { return phi_max - (row + 0.5) * dphi(); }
  // (row, col) of the cell containing the direction, if inside the grid.
  std::optional<std::array<int, 2>> cell_of(double phi, double theta) const;
};

struct Calibration {
  Intrinsics K;
  Mat3 R_CR{};  // LiDAR -> camera rotation
  Vec3 t_CR;    // LiDAR -> camera translation (m)
  RangeGrid grid;
  int image_width = 0;
  int image_height = 0;

  // Throws ConfigError when an invariant does not hold.
  void validate() const;
  // Camera center expressed in the LiDAR frame.
  Vec3 camera_center() const;
  Vec3 to_camera(const Vec3& p_lidar) const { return rotate(R_CR, p_lidar) + t_CR; }
  Vec3 to_lidar(const Vec3& p_cam) const;

  // 64x64 camera pitched 8 degrees down, 64x32 range grid over its FOV.
  static Calibration toy_default();
};

class RangeImage {
 public:
  static constexpr float kInvalid = -1.0f;

  RangeImage() = default;
  RangeImage(int n_phi, int n_theta)
      : values_(n_phi, n_theta, 1, kInvalid) {}

  int rows() const { return values_.rows; }
  int cols() const { return values_.cols; }
  bool valid(int row, int col) const { return values_.at(row, col) > 0.0f; }
  float range(int row, int col) const { return values_.at(row, col); }
  // Throws DomainError unless r is positive and finite.
  void set(int row, int col, float r);
  void invalidate(int row, int col) { values_.at(row, col) = kInvalid; }
  int valid_count() const;

  const Grid<float>& values() const { return values_; }
  // Rebuilds from raw values; anything not positive and finite becomes invalid.
  static RangeImage from_values(const Grid<float>& raw);
  bool operator==(const RangeImage&) const = default;

 private:
  Grid<float> values_;
};

struct PointCloud {
  std::vector<Vec3> points;
  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct Spherical {
  double phi = 0, theta = 0, r = 0;
};

Vec3 spherical_to_cartesian(double phi, double theta, double r);
Spherical cartesian_to_spherical(const Vec3& p);

RangeImage encode_range(const PointCloud& pc, const Calibration& calib);
PointCloud decode_range(const RangeImage& ri, const Calibration& calib);

struct Projection {
  double u = 0, v = 0, d = 0;
  bool valid = false;
};

Projection project_to_image(const Vec3& p_lidar, const Calibration& calib);

// For every cell of a source latent grid: continuous coordinates (x = column,
// y = row) in the other modality's latent grid plus the camera depth.
struct Correspondence {
  double x = 0, y = 0, depth = 0;
  bool valid = false;
};

struct CorrespondenceMap {
  int rows = 0, cols = 0;
  std::vector<Correspondence> cells;

  CorrespondenceMap() = default;
  CorrespondenceMap(int r, int c) : rows(r), cols(c), cells(static_cast<size_t>(r) * c) {}
  Correspondence& at(int r, int c) { return cells[static_cast<size_t>(r) * cols + c]; }
  const Correspondence& at(int r, int c) const { return cells[static_cast<size_t>(r) * cols + c]; }
  int valid_count() const;
  // Keeps every second cell and halves the coordinates, matching a stride-2
  // feature level below this one.
  CorrespondenceMap downsample2() const;
};

// Range value used for latent cell (i, j): the minimum valid range over the
// latent_scale x latent_scale window centered on full-resolution cell
// (i * s, j * s). Nullopt when the window has no valid cell.
std::optional<float> latent_cell_range(const RangeImage& ri, int i, int j, int latent_scale);

// Range latent -> image latent. Latent cell (i, j) sits at the bin-center
// angles of full-resolution cell (i * s, j * s); its image-latent coordinates
// are the projected pixel coordinates divided by s.
CorrespondenceMap build_correspondence(const RangeImage& ri, const Calibration& calib,
                                       int latent_scale);

// Image latent -> range latent. Every valid full-resolution range cell is
// projected into the image latent grid; each image-latent cell keeps the
// nearest (smallest camera depth) hit and records that range cell's
// coordinates divided by s.
CorrespondenceMap build_inverse_correspondence(const RangeImage& ri, const Calibration& calib,
                                               int latent_scale);

// Range along the LiDAR ray (phi, theta) at which the ray meets the surface
// described by a camera depth map. Inverse depth is interpolated bilinearly
// (exact on planar patches) and the projection is iterated to a fixed point.
std::optional<double> range_from_depth_map(const DepthMap& depth, double phi, double theta,
                                           const Calibration& calib);

// Writes the object depth into masked range cells (as range along each
// cell's ray) and median-filters the masked region over valid cells.
RangeImage paste_depth(const RangeImage& ri, const DepthMap& object_depth, const Mask& mask_r,
                       const Calibration& calib, int median_k = 3);

// Exports.
void write_ply(const PointCloud& pc, const std::string& path);
void write_xyz(const PointCloud& pc, const std::string& path);
// 16-bit binary PGM, millimeters, 0 for invalid cells.
void write_range_pgm(const RangeImage& ri, const std::string& path);

}  // namespace mted

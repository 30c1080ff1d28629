#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "mted/error.hpp"
#include "mted/geometry.hpp"
#include "mted/rng.hpp"

using namespace mted;

namespace {

Calibration identity_calib() {
  Calibration c = Calibration::toy_default();
  c.R_CR = Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  c.t_CR = {0, 0, 0};
  c.K = {50, 50, 32, 24};
  return c;
}

// Camera-frame plane z = depth, rendered as a depth map.
DepthMap flat_depth(const Calibration& calib, float depth, int r0, int r1, int c0, int c1) {
  DepthMap d(calib.image_height, calib.image_width, 1, 0.0f);
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) d.at(r, c) = depth;
  }
  return d;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mted_geom_" + name)).string();
}

}  // namespace

TEST_CASE("spherical to cartesian examples") {
  Vec3 p = spherical_to_cartesian(0, 0, 2);
  CHECK(p.x == 0.0);
  CHECK(p.y == 2.0);
  CHECK(p.z == 0.0);

  p = spherical_to_cartesian(M_PI / 2, 0.7, 1);
  CHECK(std::abs(p.x) <= 1e-12);
  CHECK(std::abs(p.y) <= 1e-12);
  CHECK(std::abs(p.z - 1.0) <= 1e-12);

  p = spherical_to_cartesian(0.3, 1.1, 5.0);
  CHECK(p.x == doctest::Approx(4.25701455221995735571662297347).epsilon(1e-14));
  CHECK(p.y == doctest::Approx(2.16668463061851589884374504212).epsilon(1e-14));
  CHECK(p.z == doctest::Approx(1.47760103330669787552660372843).epsilon(1e-14));

  CHECK_THROWS_AS(spherical_to_cartesian(0.1, 0.1, 0.0), DomainError);
  CHECK_THROWS_AS(spherical_to_cartesian(0.1, 0.1, -3.0), DomainError);
}

TEST_CASE("cartesian to spherical examples") {
  Spherical s = cartesian_to_spherical({0, 2, 0});
  CHECK(s.phi == 0.0);
  CHECK(s.theta == 0.0);
  CHECK(s.r == 2.0);

  s = cartesian_to_spherical({1, 1, std::sqrt(2.0)});
  CHECK(s.phi == doctest::Approx(M_PI / 4).epsilon(1e-14));
  CHECK(s.theta == doctest::Approx(M_PI / 4).epsilon(1e-14));
  CHECK(s.r == doctest::Approx(2.0).epsilon(1e-14));

  CHECK_THROWS_AS(cartesian_to_spherical({0, 0, 0}), DomainError);
}

TEST_CASE("spherical round trip over random points") {
  Rng rng(11);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const double phi = rng.uniform(-M_PI / 2 + 1e-6, M_PI / 2 - 1e-6);
    const double theta = rng.uniform(-M_PI, M_PI);
    const double r = rng.uniform(0.1, 80.0);
    const Vec3 p = spherical_to_cartesian(phi, theta, r);
    const Spherical s = cartesian_to_spherical(p);
    const Vec3 q = spherical_to_cartesian(s.phi, s.theta, s.r);
    worst = std::max({worst, std::abs(p.x - q.x), std::abs(p.y - q.y), std::abs(p.z - q.z)});
    worst = std::max({worst, std::abs(s.phi - phi), std::abs(s.r - r)});
    if (std::abs(std::abs(theta) - M_PI) > 1e-9) worst = std::max(worst, std::abs(s.theta - theta));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("calibration validation") {
  Calibration c = Calibration::toy_default();
  CHECK_NOTHROW(c.validate());
  const Vec3 center = c.camera_center();
  CHECK(center.x == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(center.y == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(center.z == doctest::Approx(-0.12).epsilon(1e-12));

  Calibration bad = c;
  bad.K.fx = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.R_CR[0][0] = -bad.R_CR[0][0];
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.grid.theta_max = bad.grid.theta_min;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.grid.n_phi = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("encode range examples") {
  const Calibration calib = Calibration::toy_default();
  const RangeImage empty = encode_range({}, calib);
  CHECK(empty.valid_count() == 0);
  CHECK(empty.rows() == 32);
  CHECK(empty.cols() == 64);

  const int row = 10, col = 20;
  const double phi = calib.grid.phi_center(row), theta = calib.grid.theta_center(col);
  RangeImage one = encode_range({{spherical_to_cartesian(phi, theta, 12.5)}}, calib);
  CHECK(one.valid_count() == 1);
  CHECK(one.range(row, col) == 12.5f);

  PointCloud two{{spherical_to_cartesian(phi, theta, 7.0),
                  spherical_to_cartesian(phi + 0.2 * calib.grid.dphi(), theta, 4.0)}};
  RangeImage ri = encode_range(two, calib);
  CHECK(ri.valid_count() == 1);
  CHECK(ri.range(row, col) == 4.0f);

  // Behind the sensor and above the FOV.
  PointCloud outside{{{0, -5, 0}, spherical_to_cartesian(1.0, 0.0, 5.0)}};
  CHECK(encode_range(outside, calib).valid_count() == 0);

  RangeImage r(4, 4);
  CHECK_THROWS_AS(r.set(0, 0, 0.0f), DomainError);
  CHECK_THROWS_AS(r.set(0, 0, NAN), DomainError);
  CHECK(r.range(0, 0) == RangeImage::kInvalid);
}

TEST_CASE("encode range min rule matches brute-force binning") {
  const Calibration calib = Calibration::toy_default();
  const RangeGrid& g = calib.grid;
  Rng rng(5);
  PointCloud pc;
  for (int i = 0; i < 20000; ++i) {
    const double phi = rng.uniform(g.phi_min - 0.1, g.phi_max + 0.1);
    const double theta = rng.uniform(g.theta_min - 0.1, g.theta_max + 0.1);
    pc.points.push_back(spherical_to_cartesian(phi, theta, rng.uniform(1.0, 60.0)));
  }
  // Oracle: nearest bin center by exhaustive search over all bins.
  std::map<std::pair<int, int>, float> best;
  for (const Vec3& p : pc.points) {
    const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    const double phi = std::asin(p.z / r), theta = std::atan2(p.x, p.y);
    if (phi < g.phi_min || phi >= g.phi_max || theta < g.theta_min || theta >= g.theta_max) continue;
    int br = 0, bc = 0;
    double bd = 1e9;
    for (int row = 0; row < g.n_phi; ++row) {
      const double d = std::abs(g.phi_center(row) - phi);
      if (d < bd) bd = d, br = row;
    }
    bd = 1e9;
    for (int col = 0; col < g.n_theta; ++col) {
      const double d = std::abs(g.theta_center(col) - theta);
      if (d < bd) bd = d, bc = col;
    }
    auto key = std::make_pair(br, bc);
    const auto rf = static_cast<float>(r);
    if (!best.count(key) || rf < best[key]) best[key] = rf;
  }
  const RangeImage ri = encode_range(pc, calib);
  CHECK(ri.valid_count() == static_cast<int>(best.size()));
  int mismatches = 0;
  for (const auto& [key, r] : best) mismatches += ri.range(key.first, key.second) != r;
  CHECK(mismatches == 0);
}

TEST_CASE("decode range") {
  const Calibration calib = Calibration::toy_default();
  CHECK(decode_range(RangeImage(32, 64), calib).empty());

  Rng rng(3);
  RangeImage ri(32, 64);
  for (int row = 0; row < 32; ++row) {
    for (int col = 0; col < 64; ++col) {
      if (rng.uniform() < 0.7) ri.set(row, col, static_cast<float>(rng.uniform(0.5, 60.0)));
    }
  }
  const PointCloud pc = decode_range(ri, calib);
  CHECK(static_cast<int>(pc.size()) == ri.valid_count());
  CHECK(encode_range(pc, calib) == ri);

  // Half-bin angular bound: chord error <= r * half-diagonal of the bin.
  PointCloud cloud;
  for (int i = 0; i < 3000; ++i) {
    const double phi = rng.uniform(calib.grid.phi_min, calib.grid.phi_max);
    const double theta = rng.uniform(calib.grid.theta_min, calib.grid.theta_max);
    cloud.points.push_back(spherical_to_cartesian(phi, theta, rng.uniform(1.0, 50.0)));
  }
  const RangeImage enc = encode_range(cloud, calib);
  const double half = 0.5 * std::hypot(calib.grid.dphi(), calib.grid.dtheta());
  int violations = 0;
  for (const Vec3& p : cloud.points) {
    const Spherical s = cartesian_to_spherical(p);
    const auto cell = calib.grid.cell_of(s.phi, s.theta);
    REQUIRE(cell);
    if (std::abs(enc.range((*cell)[0], (*cell)[1]) - s.r) > 1e-4 * s.r) continue;  // hidden
    const Vec3 q = spherical_to_cartesian(calib.grid.phi_center((*cell)[0]),
                                          calib.grid.theta_center((*cell)[1]), s.r);
    violations += (p - q).norm() > half * s.r * (1 + 1e-9) + 1e-6;
  }
  CHECK(violations == 0);
}

TEST_CASE("project to image") {
  const Calibration c = identity_calib();
  Projection p = project_to_image({0, 0, 5}, c);
  CHECK(p.valid);
  CHECK(p.u == 32.0);
  CHECK(p.v == 24.0);
  CHECK(p.d == 5.0);

  CHECK_FALSE(project_to_image({1, 1, 0}, c).valid);
  CHECK_FALSE(project_to_image({1, 1, -2}, c).valid);

  // Independent matrix arithmetic for the toy calibration.
  const Calibration toy = Calibration::toy_default();
  p = project_to_image({1.3, 7.9, -0.4}, toy);
  CHECK(p.valid);
  CHECK(std::abs(p.u - 40.692963891121835) <= 1e-9);
  CHECK(std::abs(p.v - 25.709174340600804) <= 1e-9);
  CHECK(std::abs(p.d - 7.614519194141832) <= 1e-9);
}

TEST_CASE("projection is invariant to homogeneous scaling") {
  const Calibration c = identity_calib();
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 pc{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 30)};
    const double s = rng.uniform(0.01, 100);
    const Projection a = project_to_image(pc, c);
    const Projection b = project_to_image(pc * s, c);
    REQUIRE(a.valid);
    REQUIRE(b.valid);
    CHECK(std::abs(a.u - b.u) <= 1e-9);
    CHECK(std::abs(a.v - b.v) <= 1e-9);
  }
}

TEST_CASE("correspondence matches manual composition") {
  const Calibration calib = Calibration::toy_default();
  CHECK(build_correspondence(RangeImage(32, 64), calib, 4).valid_count() == 0);
  CHECK_THROWS_AS(build_correspondence(RangeImage(30, 64), calib, 4), DimensionError);

  Rng rng(21);
  RangeImage ri(32, 64);
  for (int row = 0; row < 32; ++row) {
    for (int col = 0; col < 64; ++col) {
      if (rng.uniform() < 0.8) ri.set(row, col, static_cast<float>(rng.uniform(2.0, 40.0)));
    }
  }
  const CorrespondenceMap map = build_correspondence(ri, calib, 4);
  REQUIRE(map.rows == 8);
  REQUIRE(map.cols == 16);
  CHECK(map.valid_count() > 0);
  int checked = 0;
  for (int n = 0; n < 100; ++n) {
    const int i = static_cast<int>(rng.integer(0, 7)), j = static_cast<int>(rng.integer(0, 15));
    const Correspondence& e = map.at(i, j);
    // Manual window minimum.
    float rmin = -1;
    for (int r = 4 * i - 2; r < 4 * i + 2; ++r) {
      for (int cc = 4 * j - 2; cc < 4 * j + 2; ++cc) {
        if (r < 0 || cc < 0 || r >= 32 || cc >= 64 || !ri.valid(r, cc)) continue;
        if (rmin < 0 || ri.range(r, cc) < rmin) rmin = ri.range(r, cc);
      }
    }
    if (rmin < 0) {
      CHECK_FALSE(e.valid);
      continue;
    }
    const Projection p = project_to_image(
        spherical_to_cartesian(calib.grid.phi_center(4 * i), calib.grid.theta_center(4 * j), rmin),
        calib);
    const bool inside = p.valid && p.u >= -0.5 && p.u < 63.5 && p.v >= -0.5 && p.v < 63.5;
    CHECK(e.valid == inside);
    if (inside) {
      CHECK(e.x == p.u / 4);
      CHECK(e.y == p.v / 4);
      CHECK(e.depth == p.d);
      CHECK(e.depth > 0);
      ++checked;
    }
  }
  CHECK(checked > 50);

  const CorrespondenceMap half = map.downsample2();
  CHECK(half.rows == 4);
  CHECK(half.cols == 8);
  CHECK(half.at(1, 3).valid == map.at(2, 6).valid);
  CHECK(half.at(1, 3).x == map.at(2, 6).x / 2);
}

TEST_CASE("inverse correspondence keeps the nearest hit") {
  const Calibration calib = Calibration::toy_default();
  RangeImage ri(32, 64);
  for (int row = 0; row < 32; ++row) {
    for (int col = 0; col < 64; ++col) ri.set(row, col, 20.0f);
  }
  ri.set(12, 30, 5.0f);
  const CorrespondenceMap inv = build_inverse_correspondence(ri, calib, 4);
  CHECK(inv.rows == 16);
  CHECK(inv.cols == 16);
  CHECK(inv.valid_count() > 0);
  const Projection p = project_to_image(
      spherical_to_cartesian(calib.grid.phi_center(12), calib.grid.theta_center(30), 5.0), calib);
  const Correspondence& e = inv.at(static_cast<int>(std::lround(p.v / 4)),
                                   static_cast<int>(std::lround(p.u / 4)));
  CHECK(e.valid);
  CHECK(e.x == 30.0 / 4);
  CHECK(e.y == 12.0 / 4);
  CHECK(e.depth == doctest::Approx(p.d));
  for (const auto& c : inv.cells) {
    if (c.valid) CHECK(c.depth > 0);
  }
}

TEST_CASE("range from a planar depth map is exact") {
  const Calibration calib = Calibration::toy_default();
  const DepthMap plane = flat_depth(calib, 10.0f, 0, 64, 0, 64);
  int hits = 0;
  for (int row = 0; row < 32; ++row) {
    for (int col = 0; col < 64; ++col) {
      const double phi = calib.grid.phi_center(row), theta = calib.grid.theta_center(col);
      const auto r = range_from_depth_map(plane, phi, theta, calib);
      if (!r) continue;
      const Projection p = project_to_image(spherical_to_cartesian(phi, theta, *r), calib);
      if (p.u < 1 || p.u > 62 || p.v < 1 || p.v > 62) continue;
      CHECK(std::abs(p.d - 10.0) <= 1e-6);
      ++hits;
    }
  }
  CHECK(hits > 500);
}

TEST_CASE("paste depth") {
  const Calibration calib = Calibration::toy_default();
  const DepthMap none(64, 64, 1, 0.0f);

  SUBCASE("majority median") {
    RangeImage ri(32, 64);
    for (int row = 0; row < 32; ++row) {
      for (int col = 0; col < 64; ++col) ri.set(row, col, 30.0f);
    }
    Mask mask(32, 64, 1, 0);
    for (int r = 9; r <= 11; ++r) {
      for (int c = 19; c <= 21; ++c) {
        mask.at(r, c) = 1;
        ri.set(r, c, 1.0f);
      }
    }
    ri.set(10, 20, 100.0f);
    const RangeImage out = paste_depth(ri, none, mask, calib, 3);
    CHECK(out.range(10, 20) == 1.0f);
  }

  SUBCASE("constant patch is unchanged") {
    RangeImage ri(32, 64);
    Mask mask(32, 64, 1, 0);
    for (int r = 5; r < 15; ++r) {
      for (int c = 10; c < 30; ++c) {
        mask.at(r, c) = 1;
        ri.set(r, c, 7.5f);
      }
    }
    CHECK(paste_depth(ri, none, mask, calib, 3) == ri);
    CHECK(paste_depth(ri, none, mask, calib, 5) == ri);
  }

  SUBCASE("outside mask is bit-identical and pasted cells land on the surface") {
    Rng rng(2);
    RangeImage ri(32, 64);
    for (int row = 0; row < 32; ++row) {
      for (int col = 0; col < 64; ++col) {
        if (rng.uniform() < 0.9) ri.set(row, col, static_cast<float>(rng.uniform(3.0, 40.0)));
      }
    }
    Mask mask(32, 64, 1, 0);
    for (int r = 12; r < 22; ++r) {
      for (int c = 24; c < 40; ++c) mask.at(r, c) = 1;
    }
    const DepthMap obj = flat_depth(calib, 8.0f, 0, 64, 0, 64);
    const RangeImage out = paste_depth(ri, obj, mask, calib, 3);
    const RangeImage raw = paste_depth(ri, obj, mask, calib, 1);
    for (int row = 0; row < 32; ++row) {
      for (int col = 0; col < 64; ++col) {
        if (mask.at(row, col)) continue;
        CHECK(out.values().at(row, col) == ri.values().at(row, col));
      }
    }
    int pasted = 0;
    for (int row = 13; row < 21; ++row) {
      for (int col = 25; col < 39; ++col) {
        REQUIRE(raw.valid(row, col));
        const Projection p = project_to_image(
            spherical_to_cartesian(calib.grid.phi_center(row), calib.grid.theta_center(col),
                                   raw.range(row, col)),
            calib);
        CHECK(std::abs(p.d - 8.0) <= 1e-4);
        ++pasted;
      }
    }
    CHECK(pasted == 8 * 14);
  }

  SUBCASE("errors") {
    RangeImage ri(32, 64);
    CHECK_THROWS_AS(paste_depth(ri, none, Mask(16, 64), calib, 3), DimensionError);
    CHECK_THROWS_AS(paste_depth(ri, DepthMap(32, 32), Mask(32, 64), calib, 3), DimensionError);
    CHECK_THROWS_AS(paste_depth(ri, none, Mask(32, 64), calib, 2), DomainError);
    CHECK_THROWS_AS(paste_depth(ri, none, Mask(32, 64), calib, 0), DomainError);
  }
}

TEST_CASE("pasted depth prior creates correspondences where LiDAR had none") {
  const Calibration calib = Calibration::toy_default();
  RangeImage ri(32, 64);
  for (int row = 0; row < 32; ++row) {
    for (int col = 0; col < 64; ++col) ri.set(row, col, 30.0f);
  }
  Mask mask(32, 64, 1, 0);
  for (int r = 8; r < 24; ++r) {
    for (int c = 16; c < 48; ++c) {
      mask.at(r, c) = 1;
      ri.invalidate(r, c);
    }
  }
  const int i = 4, j = 8;  // latent cell centered on full-res cell (16, 32)
  CHECK_FALSE(build_correspondence(ri, calib, 4).at(i, j).valid);
  const RangeImage pasted = paste_depth(ri, flat_depth(calib, 6.0f, 0, 64, 0, 64), mask, calib, 3);
  const CorrespondenceMap map = build_correspondence(pasted, calib, 4);
  CHECK(map.at(i, j).valid);
  CHECK(map.at(i, j).depth == doctest::Approx(6.0).epsilon(1e-4));
}

TEST_CASE("exports") {
  const Calibration calib = Calibration::toy_default();
  RangeImage ri(32, 64);
  ri.set(0, 0, 1.2345f);
  ri.set(31, 63, 70.0f);
  const PointCloud pc = decode_range(ri, calib);

  const std::string ply = tmp_path("a.ply");
  write_ply(pc, ply);
  std::ifstream is(ply);
  std::string all((std::istreambuf_iterator<char>(is)), {});
  CHECK(all.rfind("ply\nformat ascii 1.0\nelement vertex 2\n", 0) == 0);
  CHECK(all.find("property float z\nend_header\n") != std::string::npos);

  const std::string xyz = tmp_path("a.xyz");
  write_xyz(pc, xyz);
  std::ifstream xs(xyz);
  double x, y, z;
  xs >> x >> y >> z;
  CHECK(x == doctest::Approx(pc.points[0].x).epsilon(1e-5));

  const std::string pgm = tmp_path("a.pgm");
  write_range_pgm(ri, pgm);
  std::ifstream ps(pgm, std::ios::binary);
  std::string magic;
  int w, h, maxv;
  ps >> magic >> w >> h >> maxv;
  ps.get();
  CHECK(magic == "P5");
  CHECK(w == 64);
  CHECK(h == 32);
  CHECK(maxv == 65535);
  unsigned char px[2];
  ps.read(reinterpret_cast<char*>(px), 2);
  CHECK((px[0] << 8 | px[1]) == 1235);
  ps.read(reinterpret_cast<char*>(px), 2);
  CHECK((px[0] << 8 | px[1]) == 0);
  ps.seekg(-2, std::ios::end);
  ps.read(reinterpret_cast<char*>(px), 2);
  CHECK((px[0] << 8 | px[1]) == 65535);

  CHECK_THROWS_AS(write_ply(pc, "/nonexistent-dir/x.ply"), IoError);
  std::filesystem::remove(ply);
  std::filesystem::remove(xyz);
  std::filesystem::remove(pgm);
}

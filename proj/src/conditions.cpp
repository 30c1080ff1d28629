#include "mted/conditions.hpp"

#include <algorithm>
#include <cmath>

#include "mted/error.hpp"

namespace mted {

Tensor image_to_tensor(const Image& img, DType dtype) {
  if (img.channels != 3) throw DimensionError("image_to_tensor: expected 3 channels");
  const int H = img.rows, W = img.cols;
  std::vector<double> v(static_cast<size_t>(3) * H * W);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < H; ++r)
      for (int x = 0; x < W; ++x) v[(static_cast<size_t>(c) * H + r) * W + x] = img.at(r, x, c);
  return Tensor::from_vector({1, 3, H, W}, v, dtype);
}

Image tensor_to_image(const Tensor& t, int64_t index) {
  if (t.dim() != 4 || t.size(1) != 3 || index < 0 || index >= t.size(0)) {
    throw DimensionError("tensor_to_image: expected [B,3,H,W], got " + shape_str(t.shape()));
  }
  const int H = static_cast<int>(t.size(2)), W = static_cast<int>(t.size(3));
  Image img(H, W, 3);
  const int64_t base = index * 3 * H * W;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < H; ++r)
      for (int x = 0; x < W; ++x) {
        const double v = t.at(base + (static_cast<int64_t>(c) * H + r) * W + x);
        img.at(r, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

Tensor range_to_tensor(const RangeImage& ri, DType dtype) {
  std::vector<double> v(static_cast<size_t>(ri.rows()) * ri.cols());
  for (int r = 0; r < ri.rows(); ++r)
    for (int c = 0; c < ri.cols(); ++c)
      v[static_cast<size_t>(r) * ri.cols() + c] = ri.valid(r, c) ? ri.range(r, c) / kRangeScale : 0.0;
  return Tensor::from_vector({1, 1, ri.rows(), ri.cols()}, v, dtype);
}

RangeImage tensor_to_range(const Tensor& t, int64_t index) {
  if (t.dim() != 4 || t.size(1) != 1 || index < 0 || index >= t.size(0)) {
    throw DimensionError("tensor_to_range: expected [B,1,H,W], got " + shape_str(t.shape()));
  }
  const int H = static_cast<int>(t.size(2)), W = static_cast<int>(t.size(3));
  RangeImage ri(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double v = t.at(index * H * W + static_cast<int64_t>(r) * W + c) * kRangeScale;
      if (std::isfinite(v) && v >= kMinDecodedRange) ri.set(r, c, static_cast<float>(v));
    }
  return ri;
}

Tensor mask_to_tensor(const Mask& m, DType dtype) {
  std::vector<double> v(m.data.begin(), m.data.end());
  return Tensor::from_vector({1, 1, m.rows, m.cols}, v, dtype);
}

Image paste_image(const Image& base, const Image& background, const Image& object_rgb, const Mask& silhouette,
                  const Mask& roi) {
  const int H = base.rows, W = base.cols;
  if (!background.same_extent(H, W) || !object_rgb.same_extent(H, W) || !silhouette.same_extent(H, W) ||
      !roi.same_extent(H, W)) {
    throw DimensionError("paste_image: extents differ");
  }
  Image out = base;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (!roi.at(r, c)) continue;
      const Image& src = silhouette.at(r, c) ? object_rgb : background;
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = src.at(r, c, ch);
    }
  return out;
}

Image crop_object(const Image& rgb, const Mask& silhouette, int size) {
  if (rgb.channels != 3 || !silhouette.same_extent(rgb.rows, rgb.cols)) {
    throw DimensionError("crop_object: rgb/silhouette extents differ");
  }
  int r0 = rgb.rows, r1 = -1, c0 = rgb.cols, c1 = -1;
  for (int r = 0; r < rgb.rows; ++r)
    for (int c = 0; c < rgb.cols; ++c) {
      if (!silhouette.at(r, c)) continue;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  if (r1 < 0) throw PlacementError("crop_object: empty silhouette");
  const double h = r1 - r0 + 1, w = c1 - c0 + 1;
  auto px = [&](int r, int c, int ch) {
    return static_cast<double>(rgb.at(std::clamp(r, r0, r1), std::clamp(c, c0, c1), ch));
  };
  Image out(size, size, 3);
  for (int i = 0; i < size; ++i) {
    const double sy = r0 + (i + 0.5) * h / size - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    for (int j = 0; j < size; ++j) {
      const double sx = c0 + (j + 0.5) * w / size - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double fx = sx - x0;
      for (int ch = 0; ch < 3; ++ch) {
        const double top = (1 - fx) * px(y0, x0, ch) + fx * px(y0, x0 + 1, ch);
        const double bot = (1 - fx) * px(y0 + 1, x0, ch) + fx * px(y0 + 1, x0 + 1, ch);
        out.at(i, j, ch) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

PointCloud range_points(const RangeImage& ri, const RangeGrid& grid, const Mask* mask) {
  if (mask && !mask->same_extent(ri.rows(), ri.cols())) throw DimensionError("range_points: mask extents differ");
  PointCloud pc;
  for (int r = 0; r < ri.rows(); ++r)
    for (int c = 0; c < ri.cols(); ++c) {
      if (!ri.valid(r, c) || (mask && !mask->at(r, c))) continue;
      pc.points.push_back(spherical_to_cartesian(grid.phi_center(r), grid.theta_center(c), ri.range(r, c)));
    }
  return pc;
}

}  // namespace mted

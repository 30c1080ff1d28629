#pragma once

// Conversions between scene grids and network tensors, and the paste
// operations that build pixel-level conditions.

#include "mted/geometry.hpp"
#include "mted/grid.hpp"
#include "mted/tensor.hpp"

namespace mted {

// Ranges enter the range VAE as r / kRangeScale; invalid cells as 0.
inline constexpr double kRangeScale = 64.0;
// Decoded ranges below this are treated as no return.
inline constexpr double kMinDecodedRange = 0.5;

Tensor image_to_tensor(const Image& img, DType dtype = DType::kF32);   // [1, 3, H, W]
Image tensor_to_image(const Tensor& t, int64_t index = 0);             // clamped to [0, 1]
Tensor range_to_tensor(const RangeImage& ri, DType dtype = DType::kF32);  // [1, 1, H, W]
RangeImage tensor_to_range(const Tensor& t, int64_t index = 0);
Tensor mask_to_tensor(const Mask& m, DType dtype = DType::kF32);       // [1, 1, H, W]

// base outside roi; inside roi the background with the object composited
// over its silhouette.
Image paste_image(const Image& base, const Image& background, const Image& object_rgb,
                  const Mask& silhouette, const Mask& roi);

// Silhouette bounding box resampled (bilinear, edge-clamped) to size x size.
// Throws PlacementError on an empty silhouette.
Image crop_object(const Image& rgb, const Mask& silhouette, int size);

// Every valid cell as a LiDAR-frame point; with a mask, only masked cells.
PointCloud range_points(const RangeImage& ri, const RangeGrid& grid, const Mask* mask = nullptr);

}  // namespace mted

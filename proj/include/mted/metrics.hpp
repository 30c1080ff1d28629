#pragma once

// Chamfer distance, depth alignment against an oracle depth map, PSNR, and
// the per-sample evaluation report.

#include <string>
#include <vector>

#include "json.hpp"
#include "mted/geometry.hpp"
#include "mted/scene.hpp"

namespace mted {

// Symmetric mean of (non-squared) nearest-neighbour distances. Throws
// DomainError on an empty set.
double chamfer(const PointCloud& a, const PointCloud& b);

// Mean |d - ref| over points whose nearest pixel lies inside the image (and
// the mask, when given) and carries a surface in the reference. Throws
// DomainError when no point qualifies.
double das(const PointCloud& pc, const DepthMap& ref, const Calibration& calib, const Mask* mask = nullptr);

inline constexpr double kPsnrCap = 99.0;
double psnr(const Image& a, const Image& b);
double masked_psnr(const Image& a, const Image& b, const Mask& mask);

struct SampleMetrics {
  std::string id;
  double cd = 0, cd_masked = 0;
  double das = 0, das_masked = 0;
  double das_ref = 0, das_gap = 0;  // ground-truth points scored the same way; das_masked - das_ref
  double psnr = 0, psnr_masked = 0;
};

struct EvalReport {
  std::vector<SampleMetrics> samples;
  SampleMetrics mean;  // id "mean"
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

SampleMetrics evaluate_sample(const Sample& pred, const Sample& ref, const Calibration& calib);
// Pairs each prediction with the reference of the same id (UsageError when
// missing).
EvalReport evaluate(const std::vector<Sample>& pred, const std::vector<Sample>& ref, const Calibration& calib);

}  // namespace mted

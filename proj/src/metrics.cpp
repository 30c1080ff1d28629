#include "mted/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "mted/conditions.hpp"
#include "mted/error.hpp"

namespace mted {

using nlohmann::json;

namespace {

// Mean distance from each point of `from` to its nearest point of `to`.
// `to` is sorted on x so the search can stop once |dx| exceeds the best hit.
double directed_mean(const std::vector<Vec3>& from, std::vector<Vec3> to) {
  std::sort(to.begin(), to.end(), [](const Vec3& p, const Vec3& q) { return p.x < q.x; });
  double total = 0;
  for (const Vec3& a : from) {
    const auto mid = std::lower_bound(to.begin(), to.end(), a.x, [](const Vec3& p, double x) { return p.x < x; });
    double best = std::numeric_limits<double>::infinity();
    auto consider = [&](const Vec3& b) {
      const Vec3 d = a - b;
      best = std::min(best, d.dot(d));
    };
    for (auto it = mid; it != to.end(); ++it) {
      const double dx = it->x - a.x;
      if (dx * dx > best) break;
      consider(*it);
    }
    for (auto it = mid; it != to.begin();) {
      --it;
      const double dx = a.x - it->x;
      if (dx * dx > best) break;
      consider(*it);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(from.size());
}

double mse_to_psnr(double mse) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw DomainError("chamfer: empty point set");
  return 0.5 * (directed_mean(a.points, b.points) + directed_mean(b.points, a.points));
}

double das(const PointCloud& pc, const DepthMap& ref, const Calibration& calib, const Mask* mask) {
  if (mask && !mask->same_extent(ref.rows, ref.cols)) throw DimensionError("das: mask extents differ");
  double total = 0;
  int64_t n = 0;
  for (const Vec3& p : pc.points) {
    const Projection pr = project_to_image(p, calib);
    if (!pr.valid) continue;
    const double col = std::nearbyint(pr.u), row = std::nearbyint(pr.v);
    if (col < 0 || row < 0 || col >= ref.cols || row >= ref.rows) continue;
    const int r = static_cast<int>(row), c = static_cast<int>(col);
    if (mask && !mask->at(r, c)) continue;
    const double want = ref.at(r, c);
    if (!(want > 0)) continue;
    total += std::abs(pr.d - want);
    ++n;
  }
  if (n == 0) throw DomainError("das: no point projects onto the evaluated region");
  return total / static_cast<double>(n);
}

double psnr(const Image& a, const Image& b) {
  if (a.rows != b.rows || a.cols != b.cols || a.channels != b.channels) throw DimensionError("psnr: extents differ");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return mse_to_psnr(s / static_cast<double>(a.data.size()));
}

double masked_psnr(const Image& a, const Image& b, const Mask& mask) {
  if (a.rows != b.rows || a.cols != b.cols || a.channels != b.channels || !mask.same_extent(a.rows, a.cols)) {
    throw DimensionError("masked_psnr: extents differ");
  }
  double s = 0;
  int64_t n = 0;
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) {
      if (!mask.at(r, c)) continue;
      for (int ch = 0; ch < a.channels; ++ch) {
        const double d = static_cast<double>(a.at(r, c, ch)) - b.at(r, c, ch);
        s += d * d;
        ++n;
      }
    }
  if (n == 0) throw DomainError("masked_psnr: empty mask");
  return mse_to_psnr(s / static_cast<double>(n));
}

SampleMetrics evaluate_sample(const Sample& pred, const Sample& ref, const Calibration& calib) {
  SampleMetrics m;
  m.id = ref.id;
  const RangeGrid& g = calib.grid;
  const PointCloud pa = range_points(pred.range, g), ra = range_points(ref.range, g);
  const PointCloud pm = range_points(pred.range, g, &ref.mask_range), rm = range_points(ref.range, g, &ref.mask_range);
  m.cd = chamfer(pa, ra);
  m.cd_masked = chamfer(pm, rm);
  m.das = das(pa, ref.depth, calib);
  m.das_masked = das(pm, ref.depth, calib, &ref.mask_image);
  m.das_ref = das(rm, ref.depth, calib, &ref.mask_image);
  m.das_gap = m.das_masked - m.das_ref;
  m.psnr = psnr(pred.image, ref.image);
  m.psnr_masked = masked_psnr(pred.image, ref.image, ref.mask_image);
  return m;
}

EvalReport evaluate(const std::vector<Sample>& pred, const std::vector<Sample>& ref, const Calibration& calib) {
  std::map<std::string, const Sample*> by_id;
  for (const Sample& s : ref) by_id[s.id] = &s;
  EvalReport rep;
  rep.mean.id = "mean";
  for (const Sample& p : pred) {
    auto it = by_id.find(p.id);
    if (it == by_id.end()) throw UsageError("no reference sample for prediction " + p.id);
    rep.samples.push_back(evaluate_sample(p, *it->second, calib));
  }
  if (rep.samples.empty()) throw UsageError("evaluation needs at least one sample");
  const double n = static_cast<double>(rep.samples.size());
  for (const auto& s : rep.samples) {
    rep.mean.cd += s.cd / n;
    rep.mean.cd_masked += s.cd_masked / n;
    rep.mean.das += s.das / n;
    rep.mean.das_masked += s.das_masked / n;
    rep.mean.das_ref += s.das_ref / n;
    rep.mean.das_gap += s.das_gap / n;
    rep.mean.psnr += s.psnr / n;
    rep.mean.psnr_masked += s.psnr_masked / n;
  }
  return rep;
}

namespace {

json metrics_json(const SampleMetrics& m) {
  return {{"id", m.id},           {"cd", m.cd},           {"cd_masked", m.cd_masked},
          {"das", m.das},         {"das_masked", m.das_masked}, {"das_ref", m.das_ref},
          {"das_gap", m.das_gap}, {"psnr", m.psnr},       {"psnr_masked", m.psnr_masked}};
}

}  // namespace

json EvalReport::to_json() const {
  json per = json::array();
  for (const auto& s : samples) per.push_back(metrics_json(s));
  json agg = metrics_json(mean);
  agg.erase("id");
  return {{"count", samples.size()}, {"mean", agg}, {"samples", per}};
}

std::string EvalReport::to_csv() const {
  std::string out = "id,cd,cd_masked,das,das_masked,das_ref,das_gap,psnr,psnr_masked\n";
  auto row = [&](const SampleMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.id.c_str(), m.cd, m.cd_masked,
                  m.das, m.das_masked, m.das_ref, m.das_gap, m.psnr, m.psnr_masked);
    out += buf;
  };
  for (const auto& s : samples) row(s);
  row(mean);
  return out;
}

}  // namespace mted

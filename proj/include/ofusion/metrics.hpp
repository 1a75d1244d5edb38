#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/json_util.hpp"
#include "ofusion/registration.hpp"

namespace ofusion {

/// Mean end-point error over the selected nodes, in millimeters.
inline double epe(std::span<const Motion3> pred, std::span<const Motion3> gt, std::span<const char> select) {
  require(pred.size() == gt.size() && pred.size() == select.size(), ErrorCode::CountMismatch,
          "epe: prediction, ground truth and selection sizes differ");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!select[i]) continue;
    sum += (pred[i] - gt[i]).norm();
    ++n;
  }
  if (n == 0) fail(ErrorCode::EmptySelection, "epe: no node selected");
  return 1000.0 * sum / static_cast<double>(n);
}

inline double epe(std::span<const Motion3> pred, std::span<const Motion3> gt) {
  const std::vector<char> all(pred.size(), 1);
  return epe(pred, gt, all);
}

struct GeometryErrorParams {
  int splat_radius = 1;
  double visibility_tol = 0.02;
  double max_depth_jump = 0.05;
};

/// Mean absolute point-to-plane distance, in centimeters, from each visible
/// warped vertex to the depth surface at its projected pixel.
inline double geometry_error(std::span<const Point3> warped, const DepthImage& depth, const Camera& cam,
                             const GeometryErrorParams& params = {}) {
  require(depth.width == cam.width && depth.height == cam.height, ErrorCode::DimensionMismatch,
          "geometry_error: depth size differs from camera");
  const DepthImage zbuf = splat_depth(warped, cam, params.splat_radius);
  double sum = 0.0;
  std::size_t n = 0;
  for (const Point3& v : warped) {
    if (!(v.z() > 0.0)) continue;
    const Vec2 px = project(cam, v);
    if (!cam.in_bounds(px)) continue;
    const int x = static_cast<int>(std::lround(px.x()));
    const int y = static_cast<int>(std::lround(px.y()));
    const float zb = zbuf.at(x, y);
    if (zb > 0.0f && v.z() > zb + params.visibility_tol) continue;
    const float d = depth.at(x, y);
    if (!(d > 0.0f)) continue;
    const auto normal = depth_normal(depth, cam, x, y, params.max_depth_jump);
    if (!normal) continue;
    const Point3 q = backproject(cam, px.x(), px.y(), d);
    sum += std::abs(normal->dot(v - q));
    ++n;
  }
  if (n == 0) fail(ErrorCode::NoValidVertices, "geometry_error: no vertex over valid depth");
  return 100.0 * sum / static_cast<double>(n);
}

struct FrameMetrics {
  std::size_t frame = 0;
  std::optional<double> epe_all_mm;
  std::optional<double> epe_occluded_mm;
  std::optional<double> geometry_error_cm;
};

struct Aggregate {
  std::optional<double> mean;
  std::optional<double> max;
};

struct EvalReport {
  std::string source;
  std::vector<FrameMetrics> frames;
  Json config = Json::object();

  template <typename Field>
  Aggregate aggregate(Field field) const {
    Aggregate a;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& f : frames) {
      const std::optional<double>& v = f.*field;
      if (!v) continue;
      sum += *v;
      a.max = a.max ? std::max(*a.max, *v) : *v;
      ++n;
    }
    if (n > 0) a.mean = sum / static_cast<double>(n);
    return a;
  }
};

inline Json optional_json(const std::optional<double>& v) { return v ? Json(round_sig9(*v)) : Json(nullptr); }

inline Json to_json(const EvalReport& r) {
  Json frames = Json::array();
  for (const auto& f : r.frames) {
    frames.push_back(Json{{"frame", f.frame},
                          {"epe_all_mm", optional_json(f.epe_all_mm)},
                          {"epe_occluded_mm", optional_json(f.epe_occluded_mm)},
                          {"geometry_error_cm", optional_json(f.geometry_error_cm)}});
  }
  auto agg = [&](auto field) {
    const Aggregate a = r.aggregate(field);
    return Json{{"mean", optional_json(a.mean)}, {"max", optional_json(a.max)}};
  };
  return Json{{"source", r.source},
              {"frames", frames},
              {"summary",
               Json{{"epe_all_mm", agg(&FrameMetrics::epe_all_mm)},
                    {"epe_occluded_mm", agg(&FrameMetrics::epe_occluded_mm)},
                    {"geometry_error_cm", agg(&FrameMetrics::geometry_error_cm)}}},
              {"config", r.config}};
}

}  // namespace ofusion

#pragma once

// Confidence-guided warp-field registration. The total energy is
//   lambda_depth E_depth + lambda_motion E_motion + lambda_2d E_2d + lambda_reg E_reg
// over the per-node transforms of the current frame.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "ofusion/confidence.hpp"
#include "ofusion/deform_solver.hpp"
#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/prediction.hpp"
#include "ofusion/warpfield.hpp"

namespace ofusion {

struct EnergyWeights {
  double lambda_depth = 1.0;
  double lambda_motion = 2.0;
  double lambda_2d = 1e-6;
  double lambda_reg = 5.0;

  bool is_valid() const {
    return lambda_depth >= 0.0 && lambda_motion >= 0.0 && lambda_2d >= 0.0 && lambda_reg >= 0.0;
  }
};

using CorrespondenceSet = std::vector<Correspondence>;

inline double e_depth(const WarpField& field, std::span<const Correspondence> corr) {
  return depth_energy(field, corr);
}

/// Motion-term targets: node i should sit at T_i^{t-1} p_i + mu_i with weight
/// w_i. Prediction rows address nodes through their ids.
inline std::vector<NodeTarget> motion_targets(const WarpField& field_prev, const MotionPrediction& prediction,
                                              std::span<const double> weights) {
  require(weights.size() == prediction.size(), ErrorCode::SizeMismatch,
          "motion weights must match prediction rows");
  std::vector<NodeTarget> out;
  out.reserve(prediction.size());
  for (std::size_t r = 0; r < prediction.size(); ++r) {
    const std::size_t n = prediction.id(r);
    require(n < field_prev.size(), ErrorCode::GraphMismatch, "prediction node id outside the graph");
    out.push_back({n, field_prev.node_position(n) + prediction.nodes[r].mu, weights[r]});
  }
  return out;
}

inline double e_motion(const WarpField& field_prev, const WarpField& field_cur, const MotionPrediction& prediction,
                       std::span<const double> weights) {
  require_same_graph(field_prev, field_cur);
  return target_energy(field_cur, motion_targets(field_prev, prediction, weights));
}

/// Pixel-space flow consistency. Pairs behind the camera are skipped; the
/// count is written to `skipped`.
inline double e_2d(const WarpField& field, std::span<const Correspondence> corr, const Camera& cam,
                   std::size_t* skipped = nullptr) {
  return projection_energy(field, corr, cam, skipped);
}

inline double e_reg(const WarpField& field, RegForm form = RegForm::Standard) { return reg_energy(field, form); }

struct RegistrationReport {
  SolveReport solve;
  std::size_t correspondences = 0;
  std::size_t skipped_2d = 0;
  /// More than 10% of the 2D pairs were behind the camera.
  bool excessive_2d_skips = false;
};

/// Initial guess: the previous field followed by the global rigid motion that
/// best explains the prediction.
inline WarpField initial_field(const WarpField& field_prev, const MotionPrediction* prediction,
                               std::span<const double> weights) {
  if (prediction == nullptr || prediction->size() == 0) return field_prev;
  std::vector<Point3> src;
  std::vector<Point3> dst;
  std::vector<double> w;
  for (std::size_t r = 0; r < prediction->size(); ++r) {
    const Point3 p = field_prev.node_position(prediction->id(r));
    src.push_back(p);
    dst.push_back(p + prediction->nodes[r].mu);
    w.push_back(std::max(weights[r], 1e-12));
  }
  RigidTransform g;
  try {
    g = rigid_fit(src, dst, w);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateConfiguration) throw;
    g = translation_fit(src, dst, w);
  }
  WarpField init = field_prev;
  for (std::size_t i = 0; i < init.size(); ++i) {
    const Point3& p = init.graph.positions[i];
    init.transforms[i] = to_node_local(compose(g, to_global(field_prev.transforms[i], p)), p);
  }
  return init;
}

inline DeformProblem registration_problem(const WarpField& field_prev, std::span<const Correspondence> corr,
                                          const MotionPrediction* prediction, std::span<const double> motion_w,
                                          const Camera& cam, const EnergyWeights& weights,
                                          RegForm reg_form = RegForm::Standard) {
  DeformProblem p;
  p.correspondences = corr;
  p.camera = cam;
  p.lambda_depth = weights.lambda_depth;
  p.lambda_2d = weights.lambda_2d;
  p.lambda_reg = weights.lambda_reg;
  p.reg_form = reg_form;
  if (prediction != nullptr && weights.lambda_motion != 0.0) {
    p.targets = motion_targets(field_prev, *prediction, motion_w);
    p.lambda_targets = weights.lambda_motion;
  }
  return p;
}

/// Solves the current frame's warp field. `motion_w` holds one confidence
/// weight per prediction row (see motion_weight); pass a null prediction to
/// drop the motion term.
inline WarpField solve_warpfield(const WarpField& field_prev, std::span<const Correspondence> corr,
                                 const MotionPrediction* prediction, std::span<const double> motion_w,
                                 const Camera& cam, const EnergyWeights& weights, const SolverParams& params,
                                 RegistrationReport* report = nullptr,
                                 RegForm reg_form = RegForm::Standard) {
  require(weights.is_valid(), ErrorCode::InvalidArgument, "energy weights must be nonnegative");
  if (prediction != nullptr) {
    require(motion_w.size() == prediction->size(), ErrorCode::SizeMismatch,
            "one motion weight per prediction row is required");
  }
  const DeformProblem problem =
      registration_problem(field_prev, corr, prediction, motion_w, cam, weights, reg_form);
  const WarpField init = initial_field(field_prev, prediction, motion_w);
  RegistrationReport rep;
  WarpField out = solve_deformation(problem, init, params, &rep.solve);
  rep.correspondences = corr.size();
  rep.skipped_2d = rep.solve.after.skipped_projection;
  rep.excessive_2d_skips = !corr.empty() && rep.skipped_2d * 10 > corr.size();
  if (report != nullptr) *report = std::move(rep);
  return out;
}

// ---------------------------------------------------------------------------
// Correspondence search

/// Dense per-pixel 2-channel flow, row-major (u, v) pairs.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 2, 0.0f) {}

  Vec2 at(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 2;
    return {data[i], data[i + 1]};
  }
  void set(int x, int y, const Vec2& f) {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 2;
    data[i] = static_cast<float>(f.x());
    data[i + 1] = static_cast<float>(f.y());
  }

  /// Bilinear lookup; px must lie inside [0, w-1] x [0, h-1].
  Vec2 sample(const Vec2& px) const {
    const int x0 = std::min(static_cast<int>(std::floor(px.x())), width - 2 < 0 ? 0 : width - 2);
    const int y0 = std::min(static_cast<int>(std::floor(px.y())), height - 2 < 0 ? 0 : height - 2);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = px.x() - x0;
    const double ay = px.y() - y0;
    return (1 - ax) * (1 - ay) * at(x0, y0) + ax * (1 - ay) * at(x1, y0) + (1 - ax) * ay * at(x0, y1) +
           ax * ay * at(x1, y1);
  }
};

/// Dense depth in meters, row-major; 0 marks "no hit".
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  DepthImage() = default;
  DepthImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0.0f) {}

  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

/// Point-splat z-buffer. Each point paints a disc of `splat_radius` pixels at
/// its own depth; `winner`, when given, receives the index of the point that
/// owns each pixel (or -1).
inline DepthImage splat_depth(std::span<const Point3> points, const Camera& cam, int splat_radius,
                              std::vector<int>* winner = nullptr) {
  DepthImage img(cam.width, cam.height);
  if (winner != nullptr) winner->assign(img.data.size(), -1);
  const int r2 = splat_radius * splat_radius;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const Point3& p = points[k];
    if (!(p.z() > 0.0)) continue;
    const Vec2 px = project(cam, p);
    const int x0 = static_cast<int>(std::lround(px.x()));
    const int y0 = static_cast<int>(std::lround(px.y()));
    for (int dy = -splat_radius; dy <= splat_radius; ++dy) {
      for (int dx = -splat_radius; dx <= splat_radius; ++dx) {
        if (dx * dx + dy * dy > r2) continue;
        const int x = x0 + dx;
        const int y = y0 + dy;
        if (!img.contains(x, y)) continue;
        float& d = img.at(x, y);
        const auto z = static_cast<float>(p.z());
        if (d == 0.0f || z < d) {
          d = z;
          if (winner != nullptr) (*winner)[static_cast<std::size_t>(y) * img.width + x] = static_cast<int>(k);
        }
      }
    }
  }
  return img;
}

/// Surface normal of a depth image at a pixel from central differences of
/// backprojected neighbors, oriented toward the camera. Empty when a
/// neighbor is missing or lies across a depth discontinuity.
inline std::optional<Vec3> depth_normal(const DepthImage& depth, const Camera& cam, int x, int y,
                                        double max_jump = 0.05) {
  if (x < 1 || y < 1 || x + 1 >= depth.width || y + 1 >= depth.height) return std::nullopt;
  const float c = depth.at(x, y);
  const float l = depth.at(x - 1, y);
  const float r = depth.at(x + 1, y);
  const float u = depth.at(x, y - 1);
  const float d = depth.at(x, y + 1);
  for (float v : {c, l, r, u, d}) {
    if (!(v > 0.0f) || std::abs(v - c) > max_jump) return std::nullopt;
  }
  const Vec3 dx = backproject(cam, x + 1, y, r) - backproject(cam, x - 1, y, l);
  const Vec3 dy = backproject(cam, x, y + 1, d) - backproject(cam, x, y - 1, u);
  Vec3 n = dx.cross(dy);
  const double len = n.norm();
  if (!(len > 0.0)) return std::nullopt;
  n /= len;
  if (n.dot(backproject(cam, x, y, c)) > 0.0) n = -n;
  return n;
}

struct CorrespondenceParams {
  int splat_radius = 1;
  /// Vertices within this depth of the z-buffer count as visible.
  double visibility_tol = 0.02;
  /// Pairs whose target is farther than this from the rendered vertex are
  /// rejected as flow or occlusion outliers.
  double max_distance = 0.1;
  /// Depth jump that invalidates a central-difference normal.
  double max_depth_jump = 0.05;
};

struct CorrespondenceStats {
  std::size_t visible = 0;
  std::size_t out_of_bounds = 0;
  std::size_t invalid_depth = 0;
  std::size_t too_far = 0;
};

/// Renders the previous warped model, carries every visible vertex along the
/// flow, and lands it on the current depth image.
inline CorrespondenceSet build_correspondences(const WarpField& field_prev, std::span<const SkinnedVertex> mesh,
                                               const FlowField& flow, const DepthImage& depth_cur,
                                               const Camera& cam, const CorrespondenceParams& params = {},
                                               CorrespondenceStats* stats = nullptr) {
  require(flow.width == cam.width && flow.height == cam.height, ErrorCode::DimensionMismatch,
          "flow size differs from camera");
  require(depth_cur.width == cam.width && depth_cur.height == cam.height, ErrorCode::DimensionMismatch,
          "depth size differs from camera");
  const auto warped = warp_points(field_prev, mesh);
  const DepthImage zbuf = splat_depth(warped, cam, params.splat_radius);
  CorrespondenceStats st;
  CorrespondenceSet out;
  for (std::size_t k = 0; k < mesh.size(); ++k) {
    const Point3& w = warped[k];
    if (!(w.z() > 0.0)) continue;
    const Vec2 px = project(cam, w);
    if (!cam.in_bounds(px)) continue;
    const int xi = static_cast<int>(std::lround(px.x()));
    const int yi = static_cast<int>(std::lround(px.y()));
    const float zb = zbuf.at(xi, yi);
    if (zb > 0.0f && w.z() > zb + params.visibility_tol) continue;
    ++st.visible;
    const Vec2 target_px = px + flow.sample(px);
    if (!cam.in_bounds(target_px)) {
      ++st.out_of_bounds;
      continue;
    }
    const int tx = static_cast<int>(std::lround(target_px.x()));
    const int ty = static_cast<int>(std::lround(target_px.y()));
    const float dz = depth_cur.at(tx, ty);
    const auto normal = dz > 0.0f ? depth_normal(depth_cur, cam, tx, ty, params.max_depth_jump) : std::nullopt;
    if (!normal) {
      ++st.invalid_depth;
      continue;
    }
    const Point3 target = backproject(cam, target_px.x(), target_px.y(), dz);
    if ((target - w).norm() > params.max_distance) {
      ++st.too_far;
      continue;
    }
    out.push_back({mesh[k], target, *normal});
  }
  if (stats != nullptr) *stats = st;
  return out;
}

}  // namespace ofusion

#pragma once

// Synthetic ground-truth sequences: procedural articulated animations, the
// random resize into a 1-2 m box, a virtual depth camera, z-buffer
// visibility, a monotonically growing observed node set, noisy visible
// motions, and ground-truth optical flow for registration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <tuple>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/json_util.hpp"
#include "ofusion/prediction.hpp"
#include "ofusion/pyramid.hpp"
#include "ofusion/registration.hpp"

namespace ofusion {

/// Per-frame positions of a deforming point set with fixed topology.
struct AnimationSource {
  std::vector<std::vector<Point3>> frames;
  double fps = 30.0;

  std::size_t frame_count() const { return frames.size(); }
  std::size_t vertex_count() const { return frames.empty() ? 0 : frames.front().size(); }
};

/// angle(f) = offset + rate f + amplitude sin(2 pi cycles f / frames + phase), radians.
struct AngleCurve {
  double offset = 0.0;
  double rate = 0.0;
  double amplitude = 0.0;
  double cycles = 0.0;
  double phase = 0.0;

  double at(int frame, int frames) const {
    const double f = frame;
    const double wave = frames > 0 ? 2.0 * std::numbers::pi * cycles * f / frames : 0.0;
    return offset + rate * f + amplitude * std::sin(wave + phase);
  }
};

/// Rigid box-shaped segment hinged to its parent at `pivot` (rest pose).
struct SegmentSpec {
  int parent = -1;
  Vec3 center = Vec3::Zero();
  Vec3 half_extents = Vec3::Constant(0.05);
  Vec3 pivot = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  AngleCurve angle;
};

/// Whole-body motion applied before the joint hierarchy.
struct RootMotion {
  Vec3 velocity = Vec3::Zero();  // meters per frame
  Vec3 pivot = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  AngleCurve angle;
};

struct ArticulatedSpec {
  int frames = 30;
  double fps = 30.0;
  double point_spacing = 0.01;
  /// Points of a child segment closer than this to its pivot blend linearly
  /// toward the parent's motion (weight 1/2 at the pivot).
  double blend = 0.0;
  std::vector<SegmentSpec> segments;
  RootMotion root;
};

/// Grid samples over the surface of an axis-aligned box, duplicates removed.
inline std::vector<Point3> sample_box_surface(const Vec3& center, const Vec3& half, double spacing) {
  std::vector<Point3> pts;
  std::set<std::tuple<long, long, long>> seen;
  const auto steps = [&](double extent) { return std::max(1, static_cast<int>(std::ceil(2.0 * extent / spacing))); };
  const int n[3] = {steps(half.x()), steps(half.y()), steps(half.z())};
  auto emit = [&](const Point3& p) {
    const auto key = std::make_tuple(std::lround(p.x() * 1e7), std::lround(p.y() * 1e7), std::lround(p.z() * 1e7));
    if (seen.insert(key).second) pts.push_back(p);
  };
  for (int fixed = 0; fixed < 3; ++fixed) {
    const int a = (fixed + 1) % 3;
    const int b = (fixed + 2) % 3;
    for (int side : {-1, 1}) {
      for (int i = 0; i <= n[a]; ++i) {
        for (int j = 0; j <= n[b]; ++j) {
          Point3 p = center;
          p[fixed] += side * half[fixed];
          p[a] += -half[a] + 2.0 * half[a] * i / n[a];
          p[b] += -half[b] + 2.0 * half[b] * j / n[b];
          emit(p);
        }
      }
    }
  }
  return pts;
}

/// Per-segment world transforms at one frame.
inline std::vector<RigidTransform> segment_poses(const ArticulatedSpec& spec, int frame) {
  const RigidTransform root =
      compose(RigidTransform::from_translation(spec.root.velocity * frame),
              RigidTransform::rotation_around(spec.root.pivot, spec.root.axis, spec.root.angle.at(frame, spec.frames)));
  std::vector<RigidTransform> poses(spec.segments.size());
  for (std::size_t s = 0; s < spec.segments.size(); ++s) {
    const auto& seg = spec.segments[s];
    const RigidTransform local =
        RigidTransform::rotation_around(seg.pivot, seg.axis, seg.angle.at(frame, spec.frames));
    const RigidTransform& base = seg.parent < 0 ? root : poses[static_cast<std::size_t>(seg.parent)];
    poses[s] = compose(base, local);
  }
  return poses;
}

struct ArticulatedAnimation {
  AnimationSource source;
  /// Segment owning each vertex.
  std::vector<int> labels;
};

inline void validate_spec(const ArticulatedSpec& spec) {
  require(spec.frames >= 1, ErrorCode::BadSpec, "animation needs at least one frame");
  require(!spec.segments.empty(), ErrorCode::BadSpec, "animation needs at least one segment");
  require(spec.point_spacing > 0.0, ErrorCode::BadSpec, "point_spacing must be positive");
  require(spec.blend >= 0.0, ErrorCode::BadSpec, "blend must be nonnegative");
  require(spec.fps > 0.0, ErrorCode::BadSpec, "fps must be positive");
  for (std::size_t s = 0; s < spec.segments.size(); ++s) {
    const auto& seg = spec.segments[s];
    require(seg.parent < static_cast<int>(s), ErrorCode::BadSpec, "segment parent must precede the segment");
    require((seg.half_extents.array() > 0.0).all(), ErrorCode::BadSpec, "segment extents must be positive");
    require(seg.axis.norm() > 0.0, ErrorCode::BadSpec, "joint axis must be nonzero");
  }
  require(spec.root.axis.norm() > 0.0, ErrorCode::BadSpec, "root axis must be nonzero");
}

inline ArticulatedAnimation make_articulated_animation(const ArticulatedSpec& spec) {
  validate_spec(spec);
  ArticulatedAnimation out;
  std::vector<Point3> rest;
  for (std::size_t s = 0; s < spec.segments.size(); ++s) {
    const auto pts = sample_box_surface(spec.segments[s].center, spec.segments[s].half_extents, spec.point_spacing);
    rest.insert(rest.end(), pts.begin(), pts.end());
    out.labels.insert(out.labels.end(), pts.size(), static_cast<int>(s));
  }
  out.source.fps = spec.fps;
  out.source.frames.resize(static_cast<std::size_t>(spec.frames));
  for (int f = 0; f < spec.frames; ++f) {
    const auto poses = segment_poses(spec, f);
    auto& frame = out.source.frames[static_cast<std::size_t>(f)];
    frame.resize(rest.size());
    for (std::size_t k = 0; k < rest.size(); ++k) {
      const auto s = static_cast<std::size_t>(out.labels[k]);
      const auto& seg = spec.segments[s];
      Point3 p = poses[s](rest[k]);
      if (spec.blend > 0.0 && seg.parent >= 0) {
        const double d = (rest[k] - seg.pivot).norm();
        if (d < spec.blend) {
          const double alpha = 0.5 + 0.5 * d / spec.blend;
          p = alpha * p + (1.0 - alpha) * poses[static_cast<std::size_t>(seg.parent)](rest[k]);
        }
      }
      frame[k] = p;
    }
  }
  return out;
}

struct BoundingBox {
  Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Point3& p) {
    min = min.cwiseMin(p);
    max = max.cwiseMax(p);
  }
  Vec3 center() const { return 0.5 * (min + max); }
  double longest_side() const { return (max - min).maxCoeff(); }
};

inline BoundingBox sequence_bounds(const AnimationSource& anim) {
  BoundingBox b;
  for (const auto& f : anim.frames) {
    for (const auto& p : f) b.extend(p);
  }
  return b;
}

/// Uniform scale and recentering so the whole-sequence bounding box has its
/// longest side equal to an extent drawn uniformly from [min_extent, max_extent].
inline AnimationSource resize_to_box(const AnimationSource& anim, double min_extent, double max_extent,
                                     std::uint64_t seed, double* drawn_extent = nullptr) {
  require(min_extent > 0.0 && max_extent >= min_extent, ErrorCode::InvalidArgument, "resize: bad extent range");
  const BoundingBox b = sequence_bounds(anim);
  const double side = b.longest_side();
  if (!(side > 1e-12)) fail(ErrorCode::DegenerateExtent, "resize: animation has no spatial extent");
  std::mt19937_64 rng(seed);
  const double extent = min_extent == max_extent ? min_extent : std::uniform_real_distribution<double>(min_extent, max_extent)(rng);
  if (drawn_extent != nullptr) *drawn_extent = extent;
  const double scale = extent / side;
  const Vec3 c = b.center();
  AnimationSource out = anim;
  for (auto& f : out.frames) {
    for (auto& p : f) p = (p - c) * scale;
  }
  return out;
}

/// Shifts the animation so the sequence's bounding-box center lies on the
/// optical axis, at the smallest distance that keeps every frame inside the
/// image with `margin` (fraction of the half-width) to spare.
inline AnimationSource place_in_view(const AnimationSource& anim, const Camera& cam, double margin = 0.1,
                                     double min_depth = 0.3) {
  const BoundingBox b = sequence_bounds(anim);
  const Vec3 c = b.center();
  const double half_u = std::min(cam.cx, cam.width - 1.0 - cam.cx) * (1.0 - margin);
  const double half_v = std::min(cam.cy, cam.height - 1.0 - cam.cy) * (1.0 - margin);
  double d = 0.0;
  for (const auto& f : anim.frames) {
    for (const auto& p : f) {
      const Vec3 q = p - c;
      d = std::max(d, min_depth - q.z());
      d = std::max(d, cam.fx * std::abs(q.x()) / half_u - q.z());
      d = std::max(d, cam.fy * std::abs(q.y()) / half_v - q.z());
    }
  }
  AnimationSource out = anim;
  const Vec3 shift = Vec3(0.0, 0.0, d) - c;
  for (auto& f : out.frames) {
    for (auto& p : f) p += shift;
  }
  return out;
}

inline DepthImage render_depth(std::span<const Point3> points, const Camera& cam, int splat_radius = 2,
                               std::vector<int>* winner = nullptr) {
  require(splat_radius >= 0, ErrorCode::InvalidArgument, "splat radius must be nonnegative");
  DepthImage img = splat_depth(points, cam, splat_radius, winner);
  const bool any = std::any_of(img.data.begin(), img.data.end(), [](float v) { return v > 0.0f; });
  if (!any) fail(ErrorCode::NothingVisible, "render_depth: no point projects into the image");
  return img;
}

/// A node is visible when it projects inside the image and is not more than
/// `tol` behind the rendered surface at its pixel.
inline VisibilityMask compute_visibility(std::span<const Point3> nodes, const DepthImage& depth, const Camera& cam,
                                         double tol = 0.02) {
  VisibilityMask mask(nodes.size(), 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Point3& p = nodes[i];
    if (!(p.z() > 0.0)) continue;
    const Vec2 px = project(cam, p);
    const int x = static_cast<int>(std::lround(px.x()));
    const int y = static_cast<int>(std::lround(px.y()));
    if (!depth.contains(x, y)) continue;
    const float d = depth.at(x, y);
    mask[i] = (d == 0.0f || p.z() <= d + tol) ? 1 : 0;
  }
  return mask;
}

struct NoisedMotions {
  std::vector<Motion3> motions;
  /// Per-sequence noise standard deviation that was drawn.
  double sigma = 0.0;
};

/// Adds N(0, sigma^2 I) to every visible motion.
inline std::vector<Motion3> add_gaussian_noise(std::span<const Motion3> motions, const VisibilityMask& mask,
                                               double sigma, std::uint64_t seed) {
  require(mask.size() == motions.size(), ErrorCode::SizeMismatch, "mask length differs from motion count");
  std::vector<Motion3> out(motions.begin(), motions.end());
  if (!(sigma > 0.0)) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!mask[i]) continue;
    out[i] += Vec3(n(rng), n(rng), n(rng));
  }
  return out;
}

/// Draws sigma ~ U(0, sigma_max) once, then perturbs every visible motion
/// with N(0, sigma^2 I).
inline NoisedMotions add_motion_noise(std::span<const Motion3> motions, const VisibilityMask& mask, std::uint64_t seed,
                                      double sigma_max = 0.004) {
  require(sigma_max >= 0.0, ErrorCode::InvalidArgument, "sigma_max must be nonnegative");
  NoisedMotions out;
  if (sigma_max > 0.0) {
    std::mt19937_64 rng(seed);
    out.sigma = std::uniform_real_distribution<double>(0.0, sigma_max)(rng);
  }
  out.motions = add_gaussian_noise(motions, mask, out.sigma, seed + 1);
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

struct SynthConfig {
  PyramidConfig pyramid{};
  double visibility_tol = 0.02;
  int splat_radius = 2;
  /// Upper bound of the per-sequence visible-motion noise, meters; 0 disables.
  double noise_sigma_max = 0.004;
};

struct SyntheticFrame {
  std::vector<Point3> node_positions_gt;
  VisibilityMask visibility;
  /// Nodes seen in this frame or any earlier one.
  VisibilityMask observed;
  /// Motion from the previous frame; zero where not visible and at frame 0.
  std::vector<Motion3> visible_motions;
  std::vector<Motion3> motions_gt;
  DepthImage depth;
  /// Flow from the previous frame into this one (zero at frame 0).
  FlowField flow_gt;
};

struct SyntheticSequence {
  Camera camera;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  std::vector<Point3> canonical_vertices;
  std::vector<std::size_t> node_indices;
  std::vector<SyntheticFrame> frames;

  std::size_t node_count() const { return node_indices.size(); }

  std::vector<Point3> canonical_nodes() const {
    std::vector<Point3> n;
    n.reserve(node_indices.size());
    for (std::size_t i : node_indices) n.push_back(canonical_vertices[i]);
    return n;
  }
};

/// Seed for per-frame randomness derived from the sequence seed.
inline std::uint64_t frame_seed(std::uint64_t master, std::size_t frame) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(frame)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Runs the whole protocol on an animation already placed in front of the
/// camera (camera coordinates).
inline SyntheticSequence generate_sequence(const AnimationSource& anim, const Camera& cam, const SynthConfig& config,
                                           std::uint64_t seed) {
  require(anim.frame_count() >= 2, ErrorCode::InvalidArgument, "generate_sequence: need at least two frames");
  require(cam.is_valid(), ErrorCode::InvalidArgument, "generate_sequence: invalid camera");
  for (const auto& f : anim.frames) {
    require(f.size() == anim.vertex_count(), ErrorCode::BadSpec, "animation vertex count varies across frames");
  }
  SyntheticSequence seq;
  seq.camera = cam;
  seq.seed = seed;
  seq.canonical_vertices = anim.frames.front();
  seq.node_indices = sample_nodes(seq.canonical_vertices, config.pyramid.intervals[0]);

  std::mt19937_64 master(seed);
  seq.noise_sigma = config.noise_sigma_max > 0.0
                        ? std::uniform_real_distribution<double>(0.0, config.noise_sigma_max)(master)
                        : 0.0;

  const std::size_t n = seq.node_indices.size();
  std::vector<int> prev_winner;
  for (std::size_t t = 0; t < anim.frame_count(); ++t) {
    const auto& pts = anim.frames[t];
    SyntheticFrame fr;
    fr.node_positions_gt.reserve(n);
    for (std::size_t i : seq.node_indices) fr.node_positions_gt.push_back(pts[i]);
    std::vector<int> winner;
    fr.depth = render_depth(pts, cam, config.splat_radius, &winner);
    fr.visibility = compute_visibility(fr.node_positions_gt, fr.depth, cam, config.visibility_tol);
    fr.observed = t == 0 ? fr.visibility : seq.frames.back().observed;
    for (std::size_t i = 0; i < n; ++i) fr.observed[i] = fr.observed[i] || fr.visibility[i];

    fr.motions_gt.assign(n, Motion3::Zero());
    fr.visible_motions.assign(n, Motion3::Zero());
    fr.flow_gt = FlowField(cam.width, cam.height);
    if (t > 0) {
      const auto& prev = seq.frames.back();
      for (std::size_t i = 0; i < n; ++i) fr.motions_gt[i] = fr.node_positions_gt[i] - prev.node_positions_gt[i];
      fr.visible_motions = add_gaussian_noise(fr.motions_gt, fr.visibility, seq.noise_sigma, frame_seed(seed, t));
      for (std::size_t i = 0; i < n; ++i) {
        if (!fr.visibility[i]) fr.visible_motions[i] = Motion3::Zero();
      }
      const auto& prev_pts = anim.frames[t - 1];
      for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
          const int k = prev_winner[static_cast<std::size_t>(y) * cam.width + x];
          if (k < 0) continue;
          const Point3& a = prev_pts[static_cast<std::size_t>(k)];
          const Point3& b = pts[static_cast<std::size_t>(k)];
          if (!(b.z() > 0.0)) continue;
          fr.flow_gt.set(x, y, project(cam, b) - project(cam, a));
        }
      }
    }
    prev_winner = std::move(winner);
    seq.frames.push_back(std::move(fr));
  }
  return seq;
}

/// Observed-node graph pyramid for predicting the motion into frame t: nodes
/// of the observed set at their frame t-1 positions, level-1 edges pruned by
/// the distance changes seen over frames 0..t-1.
struct FrameGraph {
  GraphPyramid pyramid;
  /// Sequence node id of each level-1 node.
  std::vector<std::size_t> node_ids;
  VisibilityMask visibility;
  std::vector<Motion3> visible_motions;
  std::vector<Motion3> motions_gt;
};

inline FrameGraph frame_graph(const SyntheticSequence& seq, std::size_t t, const PyramidConfig& config) {
  require(t >= 1 && t < seq.frames.size(), ErrorCode::InvalidArgument, "frame_graph: frame out of range");
  const auto& fr = seq.frames[t];
  FrameGraph g;
  for (std::size_t i = 0; i < seq.node_count(); ++i) {
    if (fr.observed[i]) g.node_ids.push_back(i);
  }
  require(!g.node_ids.empty(), ErrorCode::InsufficientNodes, "frame_graph: no observed nodes");
  std::vector<Point3> pos;
  Trajectories traj(t);
  for (std::size_t i : g.node_ids) {
    pos.push_back(seq.frames[t - 1].node_positions_gt[i]);
    g.visibility.push_back(fr.visibility[i]);
    g.visible_motions.push_back(fr.visible_motions[i]);
    g.motions_gt.push_back(fr.motions_gt[i]);
  }
  for (std::size_t s = 0; s < t; ++s) {
    for (std::size_t i : g.node_ids) traj[s].push_back(seq.frames[s].node_positions_gt[i]);
  }
  g.pyramid = build_pyramid_from_nodes(std::move(pos), config, traj.size() >= 2 ? &traj : nullptr);
  return g;
}

// ---------------------------------------------------------------------------
// Spec and point-sequence files

inline AngleCurve angle_curve_from_json(const Json& j) {
  AngleCurve c;
  if (j.is_number()) {
    c.offset = j.get<double>();
    return c;
  }
  c.offset = j.value("offset", 0.0);
  c.rate = j.value("rate", 0.0);
  c.amplitude = j.value("amplitude", 0.0);
  c.cycles = j.value("cycles", 0.0);
  c.phase = j.value("phase", 0.0);
  return c;
}

inline ArticulatedSpec articulated_spec_from_json(const Json& j) {
  ArticulatedSpec s;
  try {
    s.frames = j.value("frames", 30);
    s.fps = j.value("fps", 30.0);
    s.point_spacing = j.value("point_spacing", 0.01);
    s.blend = j.value("blend", 0.0);
    if (j.contains("root")) {
      const auto& r = j.at("root");
      if (r.contains("velocity")) s.root.velocity = vec3_from_json(r.at("velocity"), "root.velocity");
      if (r.contains("pivot")) s.root.pivot = vec3_from_json(r.at("pivot"), "root.pivot");
      if (r.contains("axis")) s.root.axis = vec3_from_json(r.at("axis"), "root.axis");
      if (r.contains("angle")) s.root.angle = angle_curve_from_json(r.at("angle"));
    }
    for (const auto& e : j.at("segments")) {
      SegmentSpec seg;
      seg.parent = e.value("parent", -1);
      seg.center = vec3_from_json(e.at("center"), "segment.center");
      seg.half_extents = vec3_from_json(e.at("half_extents"), "segment.half_extents");
      if (e.contains("pivot")) seg.pivot = vec3_from_json(e.at("pivot"), "segment.pivot");
      if (e.contains("axis")) seg.axis = vec3_from_json(e.at("axis"), "segment.axis");
      if (e.contains("angle")) seg.angle = angle_curve_from_json(e.at("angle"));
      s.segments.push_back(seg);
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::BadSpec, std::string("animation spec: ") + e.what());
  }
  validate_spec(s);
  return s;
}

/// Externally supplied animation: {"fps": 30, "frames": [[[x,y,z], ...], ...]}.
inline AnimationSource point_sequence_from_json(const Json& j) {
  AnimationSource a;
  try {
    a.fps = j.value("fps", 30.0);
    for (const auto& f : j.at("frames")) a.frames.push_back(points_from_json(f, "frames"));
  } catch (const Json::exception& e) {
    fail(ErrorCode::BadSpec, std::string("point sequence: ") + e.what());
  }
  require(!a.frames.empty() && a.vertex_count() > 0, ErrorCode::BadSpec, "point sequence is empty");
  for (const auto& f : a.frames) {
    require(f.size() == a.vertex_count(), ErrorCode::BadSpec, "point sequence vertex count varies across frames");
  }
  return a;
}

}  // namespace ofusion

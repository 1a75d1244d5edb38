#pragma once

// Embedded deformation: every node carries a rigid transform applied about
// its own position, and surface vertices follow a convex blend of the
// transforms of their nearest nodes.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/pyramid.hpp"

namespace ofusion {

struct Anchor {
  std::size_t node = 0;
  double weight = 0.0;
};

struct SkinnedVertex {
  Point3 position = Point3::Zero();
  std::vector<Anchor> anchors;
};

struct SkinningParams {
  std::size_t k = 4;
  double radius = 0.08;
};

struct WarpField {
  NodeGraph graph;
  std::vector<RigidTransform> transforms;

  WarpField() = default;
  explicit WarpField(NodeGraph g)
      : graph(std::move(g)), transforms(graph.size(), RigidTransform::identity()) {}
  WarpField(NodeGraph g, std::vector<RigidTransform> t) : graph(std::move(g)), transforms(std::move(t)) {
    require(transforms.size() == graph.size(), ErrorCode::SizeMismatch,
            "WarpField: transform count differs from node count");
  }

  std::size_t size() const { return graph.size(); }

  /// Node i's own position under its transform (T_i p_i).
  Point3 node_position(std::size_t i) const { return graph.positions[i] + transforms[i].translation(); }
};

/// Anchors each vertex to its k nearest nodes with weights
/// max(0, 1 - d^2/r^2)^2, normalized; falls back to the nearest node alone
/// when every raw weight vanishes.
inline std::vector<SkinnedVertex> skin_vertices(std::span<const Point3> vertices, const NodeGraph& graph,
                                                std::size_t k, double radius) {
  require(graph.size() > 0, ErrorCode::EmptyGraph, "skin_vertices: graph has no nodes");
  require(k >= 1, ErrorCode::InvalidArgument, "skin_vertices: k must be >= 1");
  require(radius > 0.0, ErrorCode::InvalidArgument, "skin_vertices: radius must be positive");
  std::vector<SkinnedVertex> out;
  out.reserve(vertices.size());
  const double r2 = radius * radius;
  for (const Point3& v : vertices) {
    SkinnedVertex sv;
    sv.position = v;
    const auto near = nearest_k(graph.positions, v, k);
    double total = 0.0;
    for (std::size_t n : near) {
      const double q = std::max(0.0, 1.0 - (v - graph.positions[n]).squaredNorm() / r2);
      sv.anchors.push_back({n, q * q});
      total += q * q;
    }
    if (total <= 0.0) {
      sv.anchors = {{near.front(), 1.0}};
    } else {
      for (auto& a : sv.anchors) a.weight /= total;
    }
    out.push_back(std::move(sv));
  }
  return out;
}

inline std::vector<SkinnedVertex> skin_vertices(std::span<const Point3> vertices, const NodeGraph& graph,
                                                const SkinningParams& params) {
  return skin_vertices(vertices, graph, params.k, params.radius);
}

/// v' = sum_i w_i [R_i (v - p_i) + p_i + t_i].
inline Point3 warp_point(const WarpField& field, const SkinnedVertex& sv) {
  Point3 out = Point3::Zero();
  for (const Anchor& a : sv.anchors) {
    out += a.weight * apply_about(field.transforms[a.node], field.graph.positions[a.node], sv.position);
  }
  return out;
}

inline std::vector<Point3> warp_points(const WarpField& field, std::span<const SkinnedVertex> svs) {
  std::vector<Point3> out;
  out.reserve(svs.size());
  for (const auto& sv : svs) out.push_back(warp_point(field, sv));
  return out;
}

inline void require_same_graph(const WarpField& a, const WarpField& b) {
  require(a.size() == b.size(), ErrorCode::GraphMismatch, "warp fields have different node counts");
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a.graph.positions[i] == b.graph.positions[i], ErrorCode::GraphMismatch,
            "warp fields have different node positions");
  }
}

/// Motion of each node between two fields over the same graph.
inline std::vector<Motion3> node_displacements(const WarpField& prev, const WarpField& cur) {
  require_same_graph(prev, cur);
  std::vector<Motion3> out(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) out[i] = cur.node_position(i) - prev.node_position(i);
  return out;
}

/// Field whose every node reproduces the global map `g`.
inline WarpField rigid_field(const NodeGraph& graph, const RigidTransform& g) {
  WarpField f(graph);
  for (std::size_t i = 0; i < graph.size(); ++i) f.transforms[i] = to_node_local(g, graph.positions[i]);
  return f;
}

}  // namespace ofusion

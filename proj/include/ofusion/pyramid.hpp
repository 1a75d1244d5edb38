#pragma once

// Deformation node sampling and the four-level graph pyramid used for
// message passing: kNN edges at the finest level, BFS-derived edges above it,
// temporal edge pruning, and precomputed feature down/upsampling maps.

#include <algorithm>
#include <array>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"

namespace ofusion {

inline constexpr std::size_t kPyramidLevels = 4;

/// Sparse deformation nodes with directed out-neighbor adjacency.
struct NodeGraph {
  std::vector<Point3> positions;
  std::vector<std::vector<std::size_t>> edges;

  std::size_t size() const { return positions.size(); }

  bool is_valid() const {
    if (edges.size() != positions.size()) return false;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      for (std::size_t j : edges[i]) {
        if (j == i || j >= positions.size()) return false;
      }
    }
    return true;
  }
};

struct PyramidConfig {
  std::array<double, kPyramidLevels> intervals{0.04, 0.08, 0.16, 0.32};
  std::array<std::size_t, kPyramidLevels> neighbors{8, 6, 4, 3};
  double prune_threshold = 0.04;
};

struct GraphPyramid {
  std::array<NodeGraph, kPyramidLevels> levels;
  /// subset_maps[l][j]: index at level l of node j of level l+1.
  std::array<std::vector<std::size_t>, kPyramidLevels - 1> subset_maps;
  /// upsample_maps[l][i]: nearest level-(l+1) node of level-l node i.
  std::array<std::vector<std::size_t>, kPyramidLevels - 1> upsample_maps;
};

/// Per-frame node positions, trajectories[frame][node].
using Trajectories = std::vector<std::vector<Point3>>;

/// Greedy cover in input order: a point becomes a node when it is at least
/// `interval` away from every node selected so far.
inline std::vector<std::size_t> sample_nodes(std::span<const Point3> points, double interval) {
  require(!points.empty(), ErrorCode::EmptyInput, "sample_nodes: no points");
  require(interval > 0.0, ErrorCode::InvalidArgument, "sample_nodes: interval must be positive");
  const double sq = interval * interval;
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool covered = false;
    for (std::size_t s : selected) {
      if ((points[i] - points[s]).squaredNorm() < sq) {
        covered = true;
        break;
      }
    }
    if (!covered) selected.push_back(i);
  }
  return selected;
}

/// k nearest neighbors of `query` among `points` (excluding `self`), ties by index.
inline std::vector<std::size_t> nearest_k(std::span<const Point3> points, const Point3& query,
                                          std::size_t k,
                                          std::size_t self = std::numeric_limits<std::size_t>::max()) {
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(points.size());
  for (std::size_t j = 0; j < points.size(); ++j) {
    if (j == self) continue;
    cand.emplace_back((points[j] - query).squaredNorm(), j);
  }
  const std::size_t take = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
  std::vector<std::size_t> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = cand[i].second;
  return out;
}

inline std::size_t nearest_one(std::span<const Point3> points, const Point3& query) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < points.size(); ++j) {
    const double d = (points[j] - query).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

inline NodeGraph knn_graph(std::vector<Point3> positions, std::size_t k) {
  NodeGraph g;
  g.positions = std::move(positions);
  g.edges.resize(g.positions.size());
  for (std::size_t i = 0; i < g.positions.size(); ++i) {
    g.edges[i] = nearest_k(g.positions, g.positions[i], k, i);
  }
  return g;
}

/// Adjacency with every directed edge made bidirectional, sorted by index.
inline std::vector<std::vector<std::size_t>> undirected_adjacency(const NodeGraph& g) {
  std::vector<std::vector<std::size_t>> adj(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j : g.edges[i]) {
      adj[i].push_back(j);
      adj[j].push_back(i);
    }
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return adj;
}

/// Drops edges whose length deviates from its first-frame length by more than
/// `threshold` in any frame.
inline NodeGraph prune_edges_temporal(const NodeGraph& graph, const Trajectories& trajectories,
                                      double threshold) {
  require(trajectories.size() >= 2, ErrorCode::InvalidArgument,
          "prune_edges_temporal: need at least two frames");
  require(threshold > 0.0, ErrorCode::InvalidArgument, "prune_edges_temporal: threshold must be positive");
  for (const auto& frame : trajectories) {
    require(frame.size() == graph.size(), ErrorCode::SizeMismatch,
            "prune_edges_temporal: trajectory node count differs from graph");
  }
  NodeGraph out;
  out.positions = graph.positions;
  out.edges.resize(graph.size());
  const auto& first = trajectories.front();
  for (std::size_t i = 0; i < graph.size(); ++i) {
    for (std::size_t j : graph.edges[i]) {
      const double rest = (first[i] - first[j]).norm();
      double worst = 0.0;
      for (const auto& frame : trajectories) {
        worst = std::max(worst, std::abs((frame[i] - frame[j]).norm() - rest));
      }
      if (worst <= threshold) out.edges[i].push_back(j);
    }
  }
  return out;
}

namespace detail {

// Neighbors of coarse node `start` (given as a fine-level index) found by
// breadth-first search over the fine graph; nodes of one BFS depth are
// visited in index order. `coarse_of_fine` maps fine index -> coarse index or
// npos when the fine node is not kept.
inline std::vector<std::size_t> bfs_coarse_neighbors(const std::vector<std::vector<std::size_t>>& adj,
                                                     std::size_t start,
                                                     const std::vector<std::size_t>& coarse_of_fine,
                                                     std::size_t k) {
  constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> found;
  std::vector<char> seen(adj.size(), 0);
  std::vector<std::size_t> frontier{start};
  seen[start] = 1;
  while (!frontier.empty() && found.size() < k) {
    std::vector<std::size_t> next;
    for (std::size_t u : frontier) {
      for (std::size_t v : adj[u]) {
        if (!seen[v]) {
          seen[v] = 1;
          next.push_back(v);
        }
      }
    }
    std::sort(next.begin(), next.end());
    for (std::size_t v : next) {
      if (coarse_of_fine[v] != npos) {
        found.push_back(coarse_of_fine[v]);
        if (found.size() == k) break;
      }
    }
    frontier = std::move(next);
  }
  return found;
}

}  // namespace detail

/// Builds the pyramid over an already-sampled level-1 node set. When
/// `trajectories` is given (per-frame positions of these nodes), level-1 edges
/// are pruned for temporal consistency before higher levels are derived.
inline GraphPyramid build_pyramid_from_nodes(std::vector<Point3> nodes, const PyramidConfig& config,
                                             const Trajectories* trajectories = nullptr) {
  require(!nodes.empty(), ErrorCode::InsufficientNodes, "build_pyramid: no level-1 nodes");
  constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  GraphPyramid pyr;
  pyr.levels[0] = knn_graph(std::move(nodes), config.neighbors[0]);
  if (trajectories != nullptr && trajectories->size() >= 2) {
    pyr.levels[0] = prune_edges_temporal(pyr.levels[0], *trajectories, config.prune_threshold);
  }
  for (std::size_t l = 0; l + 1 < kPyramidLevels; ++l) {
    const NodeGraph& fine = pyr.levels[l];
    const auto keep = sample_nodes(fine.positions, config.intervals[l + 1]);
    if (keep.empty()) fail(ErrorCode::InsufficientNodes, "build_pyramid: empty level");
    pyr.subset_maps[l] = keep;

    NodeGraph& coarse = pyr.levels[l + 1];
    coarse.positions.reserve(keep.size());
    std::vector<std::size_t> coarse_of_fine(fine.size(), npos);
    for (std::size_t j = 0; j < keep.size(); ++j) {
      coarse.positions.push_back(fine.positions[keep[j]]);
      coarse_of_fine[keep[j]] = j;
    }
    const auto adj = undirected_adjacency(fine);
    coarse.edges.resize(keep.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
      coarse.edges[j] = detail::bfs_coarse_neighbors(adj, keep[j], coarse_of_fine, config.neighbors[l + 1]);
    }
    auto& up = pyr.upsample_maps[l];
    up.resize(fine.size());
    for (std::size_t i = 0; i < fine.size(); ++i) up[i] = nearest_one(coarse.positions, fine.positions[i]);
  }
  return pyr;
}

/// Samples level-1 nodes from a surface at the finest interval, then builds
/// the pyramid.
inline GraphPyramid build_pyramid(std::span<const Point3> surface_points, const PyramidConfig& config) {
  require(!surface_points.empty(), ErrorCode::InsufficientNodes, "build_pyramid: no surface points");
  const auto idx = sample_nodes(surface_points, config.intervals[0]);
  std::vector<Point3> nodes;
  nodes.reserve(idx.size());
  for (std::size_t i : idx) nodes.push_back(surface_points[i]);
  return build_pyramid_from_nodes(std::move(nodes), config);
}

/// Copies level-l features to level l+1 through the subset map.
template <typename Feature>
std::vector<Feature> downsample_features(const GraphPyramid& pyr, std::size_t level,
                                         std::span<const Feature> features) {
  require(level + 1 < kPyramidLevels, ErrorCode::InvalidArgument, "downsample_features: no coarser level");
  require(features.size() == pyr.levels[level].size(), ErrorCode::SizeMismatch,
          "downsample_features: feature count differs from level node count");
  const auto& map = pyr.subset_maps[level];
  std::vector<Feature> out;
  out.reserve(map.size());
  for (std::size_t fine : map) out.push_back(features[fine]);
  return out;
}

/// Each level-l node takes the feature of its nearest level-(l+1) node;
/// `coarse_level` is l+1.
template <typename Feature>
std::vector<Feature> upsample_features(const GraphPyramid& pyr, std::size_t coarse_level,
                                       std::span<const Feature> features) {
  require(coarse_level >= 1 && coarse_level < kPyramidLevels, ErrorCode::InvalidArgument,
          "upsample_features: no finer level");
  require(features.size() == pyr.levels[coarse_level].size(), ErrorCode::SizeMismatch,
          "upsample_features: feature count differs from level node count");
  const auto& map = pyr.upsample_maps[coarse_level - 1];
  std::vector<Feature> out;
  out.reserve(map.size());
  for (std::size_t c : map) out.push_back(features[c]);
  return out;
}

/// Hop distance from the nearest seed over the undirected graph; max() when
/// unreachable.
inline std::vector<std::size_t> hop_distances(const NodeGraph& g, std::span<const char> seeds) {
  constexpr std::size_t inf = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> dist(g.size(), inf);
  std::vector<std::size_t> frontier;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (seeds[i]) {
      dist[i] = 0;
      frontier.push_back(i);
    }
  }
  const auto adj = undirected_adjacency(g);
  for (std::size_t d = 1; !frontier.empty(); ++d) {
    std::vector<std::size_t> next;
    for (std::size_t u : frontier) {
      for (std::size_t v : adj[u]) {
        if (dist[v] == inf) {
          dist[v] = d;
          next.push_back(v);
        }
      }
    }
    frontier = std::move(next);
  }
  return dist;
}

}  // namespace ofusion

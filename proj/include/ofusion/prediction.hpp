#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ofusion/confidence.hpp"
#include "ofusion/error.hpp"

namespace ofusion {

/// Per-node visibility flag: 1 visible, 0 occluded.
using VisibilityMask = std::vector<char>;

enum class PredictionSource { Rigid, Arap, ArapRefined, External };

inline std::string_view to_string(PredictionSource s) {
  switch (s) {
    case PredictionSource::Rigid: return "rigid";
    case PredictionSource::Arap: return "arap";
    case PredictionSource::ArapRefined: return "arap-refined";
    case PredictionSource::External: return "external";
  }
  return "external";
}

inline PredictionSource prediction_source_from(std::string_view s) {
  if (s == "rigid") return PredictionSource::Rigid;
  if (s == "arap") return PredictionSource::Arap;
  if (s == "arap-refined") return PredictionSource::ArapRefined;
  if (s == "external") return PredictionSource::External;
  fail(ErrorCode::ParseError, "unknown prediction source '" + std::string(s) + "'");
}

/// Full-graph motion estimate: one Gaussian per node.
struct MotionPrediction {
  PredictionSource source = PredictionSource::External;
  std::vector<GaussianMotion> nodes;
  /// Sequence-wide node id of each row; empty means rows are 0..N-1.
  std::vector<std::size_t> node_ids;
  /// The global rigid part came from a translation-only fit.
  bool rigid_fallback = false;
  /// Rows that could not reach a visible node and took the rigid estimate.
  std::vector<std::size_t> unreachable;

  std::size_t size() const { return nodes.size(); }
  std::size_t id(std::size_t row) const { return node_ids.empty() ? row : node_ids[row]; }

  std::vector<Motion3> means() const {
    std::vector<Motion3> m;
    m.reserve(nodes.size());
    for (const auto& g : nodes) m.push_back(g.mu);
    return m;
  }
};

}  // namespace ofusion

#pragma once

// Occluded-node motion estimation from visible-node observations: the global
// rigid baseline, graph ARAP deformation, ARAP post-refinement of an existing
// prediction, and ingestion of externally produced predictions.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ofusion/confidence.hpp"
#include "ofusion/deform_solver.hpp"
#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/json_util.hpp"
#include "ofusion/prediction.hpp"
#include "ofusion/pyramid.hpp"
#include "ofusion/warpfield.hpp"

namespace ofusion {

struct MotionParams {
  /// Lower bound on predicted sigma, meters.
  double sigma_min = 0.001;
  /// Sigma given to occluded nodes by the rigid baseline, and the cap for the
  /// hop-distance heuristic.
  double sigma_default = 0.1;
  double lambda_anchor = 100.0;
  SolverParams solver{};
  WeightParams weight{};
};

struct RigidSplit {
  RigidTransform rigid;
  /// Non-rigid remainder at visible nodes, zero elsewhere.
  std::vector<Motion3> residual;
  /// rigid_fit was degenerate and a translation-only fit was used.
  bool fallback = false;
};

namespace detail {

inline void check_inputs(const NodeGraph& g, std::span<const Motion3> motions, const VisibilityMask& mask) {
  require(motions.size() == g.size(), ErrorCode::SizeMismatch, "one motion per node is required");
  require(mask.size() == g.size(), ErrorCode::SizeMismatch, "visibility mask length differs from node count");
}

}  // namespace detail

/// Separates the global rigid motion of the visible nodes from the
/// per-node remainder: p_i + m_i = rigid(p_i) + residual_i at visible nodes.
inline RigidSplit split_rigid(const NodeGraph& graph, std::span<const Motion3> motions, const VisibilityMask& mask) {
  detail::check_inputs(graph, motions, mask);
  std::vector<Point3> src;
  std::vector<Point3> dst;
  std::vector<double> w;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (!mask[i]) continue;
    src.push_back(graph.positions[i]);
    dst.push_back(graph.positions[i] + motions[i]);
    w.push_back(1.0);
  }
  RigidSplit out;
  try {
    out.rigid = rigid_fit(src, dst, w);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateConfiguration) throw;
    out.rigid = translation_fit(src, dst, w);
    out.fallback = true;
  }
  out.residual.assign(graph.size(), Motion3::Zero());
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (mask[i]) out.residual[i] = graph.positions[i] + motions[i] - out.rigid(graph.positions[i]);
  }
  return out;
}

/// Occluded nodes follow the visible nodes' best-fit global rigid motion;
/// visible nodes keep their observations.
inline MotionPrediction predict_rigid(const NodeGraph& graph, std::span<const Motion3> visible_motions,
                                      const VisibilityMask& mask, const MotionParams& params = {}) {
  const RigidSplit split = split_rigid(graph, visible_motions, mask);
  MotionPrediction out;
  out.source = PredictionSource::Rigid;
  out.rigid_fallback = split.fallback;
  out.nodes.resize(graph.size());
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (mask[i]) {
      out.nodes[i] = {visible_motions[i], 0.0};
    } else {
      out.nodes[i] = {split.rigid(graph.positions[i]) - graph.positions[i], params.sigma_default};
    }
  }
  return out;
}

namespace detail {

inline DeformProblem arap_problem(const NodeGraph& graph, std::span<const Motion3> visible_motions,
                                  const VisibilityMask& mask, double lambda_anchor) {
  DeformProblem p;
  p.lambda_targets = 1.0;
  p.lambda_reg = 1.0;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (mask[i]) p.targets.push_back({i, graph.positions[i] + visible_motions[i], lambda_anchor});
  }
  return p;
}

inline double hop_sigma(std::size_t hops, const MotionParams& params) {
  if (hops == std::numeric_limits<std::size_t>::max()) return params.sigma_default;
  return std::min(params.sigma_min * (1.0 + static_cast<double>(hops)), params.sigma_default);
}

// Solved displacement for reachable nodes, exact observations at visible
// nodes, and the rigid estimate for nodes cut off from every visible node.
inline void fill_from_field(MotionPrediction& out, const WarpField& solved, const RigidSplit& split,
                            std::span<const Motion3> visible_motions, const VisibilityMask& mask,
                            const std::vector<std::size_t>& hops) {
  const auto& pos = solved.graph.positions;
  out.unreachable.clear();
  for (std::size_t i = 0; i < solved.size(); ++i) {
    if (mask[i]) {
      out.nodes[i].mu = visible_motions[i];
    } else if (hops[i] == std::numeric_limits<std::size_t>::max()) {
      out.nodes[i].mu = split.rigid(pos[i]) - pos[i];
      out.unreachable.push_back(i);
    } else {
      out.nodes[i].mu = solved.node_position(i) - pos[i];
    }
  }
}

}  // namespace detail

/// Graph ARAP deformation on the finest pyramid level: visible nodes are
/// anchored to their observations and occluded nodes move as rigidly as their
/// neighborhoods allow.
inline MotionPrediction predict_arap(const GraphPyramid& pyramid, std::span<const Motion3> visible_motions,
                                     const VisibilityMask& mask, const MotionParams& params = {},
                                     SolveReport* report = nullptr) {
  const NodeGraph& graph = pyramid.levels[0];
  const RigidSplit split = split_rigid(graph, visible_motions, mask);
  const auto hops = hop_distances(graph, mask);

  MotionPrediction out;
  out.source = PredictionSource::Arap;
  out.rigid_fallback = split.fallback;
  out.nodes.resize(graph.size());
  for (std::size_t i = 0; i < graph.size(); ++i) out.nodes[i].sigma = mask[i] ? 0.0 : detail::hop_sigma(hops[i], params);

  const DeformProblem problem = detail::arap_problem(graph, visible_motions, mask, params.lambda_anchor);
  const WarpField init = rigid_field(graph, split.rigid);
  const WarpField solved = problem.targets.empty() ? init : solve_deformation(problem, init, params.solver, report);
  detail::fill_from_field(out, solved, split, visible_motions, mask, hops);
  return out;
}

/// ARAP energy of predict_arap plus a confidence-weighted pull of every
/// occluded node toward the given prediction.
inline DeformProblem arap_refine_problem(const GraphPyramid& pyramid, const MotionPrediction& prediction,
                                         const VisibilityMask& mask, std::span<const Motion3> visible_motions,
                                         const MotionParams& params) {
  const NodeGraph& graph = pyramid.levels[0];
  DeformProblem p = detail::arap_problem(graph, visible_motions, mask, params.lambda_anchor);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (mask[i]) continue;
    p.targets.push_back({i, graph.positions[i] + prediction.nodes[i].mu, motion_weight(prediction.nodes[i], params.weight)});
  }
  return p;
}

inline MotionPrediction arap_refine(const GraphPyramid& pyramid, const MotionPrediction& prediction,
                                    const VisibilityMask& mask, std::span<const Motion3> visible_motions,
                                    const MotionParams& params = {}, SolveReport* report = nullptr) {
  const NodeGraph& graph = pyramid.levels[0];
  detail::check_inputs(graph, visible_motions, mask);
  require(prediction.size() == graph.size(), ErrorCode::CountMismatch, "prediction rows differ from node count");
  const RigidSplit split = split_rigid(graph, visible_motions, mask);
  const auto hops = hop_distances(graph, mask);

  WarpField init(graph);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    init.transforms[i] = RigidTransform(split.rigid.rotation(), prediction.nodes[i].mu);
  }
  const DeformProblem problem = arap_refine_problem(pyramid, prediction, mask, visible_motions, params);
  const WarpField solved = solve_deformation(problem, init, params.solver, report);

  MotionPrediction out = prediction;
  out.source = PredictionSource::ArapRefined;
  out.rigid_fallback = prediction.rigid_fallback || split.fallback;
  detail::fill_from_field(out, solved, split, visible_motions, mask, hops);
  // Nodes cut off from visible ones keep the incoming estimate.
  for (std::size_t i : out.unreachable) out.nodes[i].mu = prediction.nodes[i].mu;
  return out;
}

// ---------------------------------------------------------------------------
// Pluggable predictors

struct PredictionInput {
  const GraphPyramid& pyramid;
  std::span<const Motion3> visible_motions;
  const VisibilityMask& mask;
};

class MotionPredictor {
 public:
  virtual ~MotionPredictor() = default;
  virtual MotionPrediction predict(const PredictionInput& in) const = 0;
};

class RigidPredictor final : public MotionPredictor {
 public:
  explicit RigidPredictor(MotionParams params = {}) : params_(params) {}
  MotionPrediction predict(const PredictionInput& in) const override {
    return predict_rigid(in.pyramid.levels[0], in.visible_motions, in.mask, params_);
  }

 private:
  MotionParams params_;
};

class ArapPredictor final : public MotionPredictor {
 public:
  explicit ArapPredictor(MotionParams params = {}) : params_(params) {}
  MotionPrediction predict(const PredictionInput& in) const override {
    return predict_arap(in.pyramid, in.visible_motions, in.mask, params_);
  }

 private:
  MotionParams params_;
};

/// Runs another predictor and post-refines its output with the ARAP prior.
class RefinedPredictor final : public MotionPredictor {
 public:
  RefinedPredictor(std::unique_ptr<MotionPredictor> base, MotionParams params = {})
      : base_(std::move(base)), params_(params) {}
  MotionPrediction predict(const PredictionInput& in) const override {
    return arap_refine(in.pyramid, base_->predict(in), in.mask, in.visible_motions, params_);
  }

 private:
  std::unique_ptr<MotionPredictor> base_;
  MotionParams params_;
};

// ---------------------------------------------------------------------------
// Prediction files

/// CSV: header `node_id,mu_x,mu_y,mu_z,sigma`, meters, one row per node.
inline std::string prediction_to_csv(const MotionPrediction& p) {
  std::string s = "node_id,mu_x,mu_y,mu_z,sigma\n";
  for (std::size_t r = 0; r < p.size(); ++r) {
    const auto& g = p.nodes[r];
    s += std::to_string(p.id(r)) + "," + format_sig9(g.mu.x()) + "," + format_sig9(g.mu.y()) + "," +
         format_sig9(g.mu.z()) + "," + format_sig9(g.sigma) + "\n";
  }
  return s;
}

inline Json prediction_to_json(const MotionPrediction& p) {
  Json ids = Json::array();
  Json mu = Json::array();
  Json sigma = Json::array();
  for (std::size_t r = 0; r < p.size(); ++r) {
    ids.push_back(p.id(r));
    mu.push_back(to_json(p.nodes[r].mu));
    sigma.push_back(round_sig9(p.nodes[r].sigma));
  }
  return Json{{"source", std::string(to_string(p.source))},
              {"node_id", ids},
              {"mu", mu},
              {"sigma", sigma},
              {"rigid_fallback", p.rigid_fallback},
              {"unreachable", p.unreachable}};
}

namespace detail {

inline double parse_double_field(const std::string& field, std::size_t line) {
  const char* b = field.data();
  const char* e = b + field.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\r')) --e;
  double v = 0.0;
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || b == e) {
    fail(ErrorCode::ParseError, "line " + std::to_string(line) + ": bad number '" + field + "'");
  }
  return v;
}

inline void validate_sigma(MotionPrediction& p, double sigma_min) {
  for (auto& g : p.nodes) {
    if (g.sigma < 0.0) fail(ErrorCode::NegativeSigma, "prediction has a negative sigma");
    if (!g.mu.allFinite() || !std::isfinite(g.sigma)) fail(ErrorCode::ParseError, "prediction has non-finite values");
    g.sigma = truncate_sigma(g.sigma, sigma_min);
  }
}

}  // namespace detail

inline MotionPrediction prediction_from_csv(const std::string& text) {
  MotionPrediction p;
  p.source = PredictionSource::External;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header) {
      if (line != "node_id,mu_x,mu_y,mu_z,sigma") {
        fail(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected header node_id,mu_x,mu_y,mu_z,sigma");
      }
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 5) {
      fail(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected 5 fields, got " + std::to_string(f.size()));
    }
    const double id = detail::parse_double_field(f[0], line_no);
    if (id < 0 || id != std::floor(id)) fail(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad node_id");
    p.node_ids.push_back(static_cast<std::size_t>(id));
    GaussianMotion g;
    g.mu = {detail::parse_double_field(f[1], line_no), detail::parse_double_field(f[2], line_no),
            detail::parse_double_field(f[3], line_no)};
    g.sigma = detail::parse_double_field(f[4], line_no);
    p.nodes.push_back(g);
  }
  if (!header) fail(ErrorCode::ParseError, "line 1: missing header");
  return p;
}

inline MotionPrediction prediction_from_json(const Json& j) {
  MotionPrediction p;
  try {
    p.source = j.contains("source") ? prediction_source_from(j.at("source").get<std::string>()) : PredictionSource::External;
    const auto& mu = j.at("mu");
    const auto& sigma = j.at("sigma");
    if (!mu.is_array() || !sigma.is_array() || mu.size() != sigma.size()) {
      fail(ErrorCode::ParseError, "prediction json: mu and sigma must be arrays of equal length");
    }
    for (std::size_t r = 0; r < mu.size(); ++r) {
      p.nodes.push_back({vec3_from_json(mu[r], "mu"), json_number(sigma[r], "sigma")});
    }
    if (j.contains("node_id")) p.node_ids = j.at("node_id").get<std::vector<std::size_t>>();
    if (!p.node_ids.empty() && p.node_ids.size() != p.nodes.size()) {
      fail(ErrorCode::ParseError, "prediction json: node_id length differs from mu");
    }
    if (j.contains("rigid_fallback")) p.rigid_fallback = j.at("rigid_fallback").get<bool>();
    if (j.contains("unreachable")) p.unreachable = j.at("unreachable").get<std::vector<std::size_t>>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, std::string("prediction json: ") + e.what());
  }
  return p;
}

/// Reads a per-frame prediction file (.csv or .json) produced by external
/// code; sigma is truncated to `sigma_min`.
inline MotionPrediction load_external_predictions(const std::filesystem::path& path, std::size_t expected_node_count,
                                                  double sigma_min = MotionParams{}.sigma_min) {
  MotionPrediction p;
  try {
    p = path.extension() == ".json" ? prediction_from_json(read_json(path)) : prediction_from_csv(read_text(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ParseError) fail(ErrorCode::ParseError, path.string() + ": " + e.what());
    throw;
  }
  if (p.size() != expected_node_count) {
    fail(ErrorCode::CountMismatch, path.string() + ": expected " + std::to_string(expected_node_count) +
                                       " rows, found " + std::to_string(p.size()));
  }
  p.source = PredictionSource::External;
  detail::validate_sigma(p, sigma_min);
  return p;
}

}  // namespace ofusion

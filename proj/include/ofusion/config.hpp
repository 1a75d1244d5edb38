#pragma once

// Every tunable default in one place, loadable from JSON. All lengths are
// meters; keys missing from a file keep their defaults.

#include <cstddef>
#include <filesystem>
#include <string>

#include "toml.hpp"

#include "ofusion/confidence.hpp"
#include "ofusion/deform_solver.hpp"
#include "ofusion/json_util.hpp"
#include "ofusion/metrics.hpp"
#include "ofusion/motion.hpp"
#include "ofusion/pyramid.hpp"
#include "ofusion/registration.hpp"
#include "ofusion/synthgen.hpp"
#include "ofusion/warpfield.hpp"

namespace ofusion {

struct Config {
  PyramidConfig pyramid{};
  SkinningParams skinning{};
  EnergyWeights energy{};
  SolverParams solver{};
  WeightParams confidence{};
  MotionParams motion{};
  SynthConfig synth{};
  CorrespondenceParams correspondence{};
  GeometryErrorParams geometry{};
  /// Registration ignores predicted sigma and uses w = 1 for every node.
  bool uniform_motion_weight = false;
};

namespace detail {

template <typename T>
void read_if(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

/// Merges the keys present in `j` into `c`.
inline void merge_config(Config& c, const Json& j) {
  using detail::read_if;
  try {
    if (j.contains("pyramid")) {
      const auto& p = j.at("pyramid");
      if (p.contains("intervals")) c.pyramid.intervals = p.at("intervals").get<std::array<double, kPyramidLevels>>();
      if (p.contains("neighbors")) c.pyramid.neighbors = p.at("neighbors").get<std::array<std::size_t, kPyramidLevels>>();
      read_if(p, "prune_threshold", c.pyramid.prune_threshold);
    }
    if (j.contains("skinning")) {
      read_if(j.at("skinning"), "k", c.skinning.k);
      read_if(j.at("skinning"), "radius", c.skinning.radius);
    }
    if (j.contains("energy")) {
      const auto& e = j.at("energy");
      read_if(e, "lambda_depth", c.energy.lambda_depth);
      read_if(e, "lambda_motion", c.energy.lambda_motion);
      read_if(e, "lambda_2d", c.energy.lambda_2d);
      read_if(e, "lambda_reg", c.energy.lambda_reg);
    }
    if (j.contains("solver")) {
      read_if(j.at("solver"), "max_iters", c.solver.max_iters);
      read_if(j.at("solver"), "damping", c.solver.damping);
      read_if(j.at("solver"), "rel_tol", c.solver.rel_tol);
    }
    if (j.contains("confidence")) {
      read_if(j.at("confidence"), "k", c.confidence.k);
      read_if(j.at("confidence"), "epsilon", c.confidence.epsilon);
    }
    if (j.contains("motion")) {
      const auto& m = j.at("motion");
      read_if(m, "sigma_min", c.motion.sigma_min);
      read_if(m, "sigma_default", c.motion.sigma_default);
      read_if(m, "lambda_anchor", c.motion.lambda_anchor);
      read_if(m, "max_iters", c.motion.solver.max_iters);
      read_if(m, "damping", c.motion.solver.damping);
      read_if(m, "rel_tol", c.motion.solver.rel_tol);
    }
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      read_if(s, "visibility_tol", c.synth.visibility_tol);
      read_if(s, "splat_radius", c.synth.splat_radius);
      read_if(s, "noise_sigma_max", c.synth.noise_sigma_max);
    }
    if (j.contains("correspondence")) {
      const auto& s = j.at("correspondence");
      read_if(s, "splat_radius", c.correspondence.splat_radius);
      read_if(s, "visibility_tol", c.correspondence.visibility_tol);
      read_if(s, "max_distance", c.correspondence.max_distance);
      read_if(s, "max_depth_jump", c.correspondence.max_depth_jump);
    }
    if (j.contains("geometry")) {
      const auto& s = j.at("geometry");
      read_if(s, "splat_radius", c.geometry.splat_radius);
      read_if(s, "visibility_tol", c.geometry.visibility_tol);
      read_if(s, "max_depth_jump", c.geometry.max_depth_jump);
    }
    read_if(j, "uniform_motion_weight", c.uniform_motion_weight);
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, std::string("config: ") + e.what());
  }
  c.synth.pyramid = c.pyramid;
  c.motion.weight = c.confidence;
  require(c.energy.is_valid() && c.solver.is_valid() && c.motion.solver.is_valid() && c.confidence.is_valid(),
          ErrorCode::ParseError, "config: values out of range");
}

inline Config config_from_json(const Json& j) {
  Config c;
  merge_config(c, j);
  return c;
}

inline Json to_json(const Config& c) {
  Json intervals = Json::array();
  for (double v : c.pyramid.intervals) intervals.push_back(round_sig9(v));
  return Json{
      {"pyramid", {{"intervals", intervals}, {"neighbors", c.pyramid.neighbors},
                   {"prune_threshold", round_sig9(c.pyramid.prune_threshold)}}},
      {"skinning", {{"k", c.skinning.k}, {"radius", round_sig9(c.skinning.radius)}}},
      {"energy", {{"lambda_depth", round_sig9(c.energy.lambda_depth)},
                  {"lambda_motion", round_sig9(c.energy.lambda_motion)},
                  {"lambda_2d", round_sig9(c.energy.lambda_2d)},
                  {"lambda_reg", round_sig9(c.energy.lambda_reg)}}},
      {"solver", {{"max_iters", c.solver.max_iters}, {"damping", round_sig9(c.solver.damping)},
                  {"rel_tol", round_sig9(c.solver.rel_tol)}}},
      {"confidence", {{"k", round_sig9(c.confidence.k)}, {"epsilon", round_sig9(c.confidence.epsilon)}}},
      {"motion", {{"sigma_min", round_sig9(c.motion.sigma_min)},
                  {"sigma_default", round_sig9(c.motion.sigma_default)},
                  {"lambda_anchor", round_sig9(c.motion.lambda_anchor)},
                  {"max_iters", c.motion.solver.max_iters},
                  {"damping", round_sig9(c.motion.solver.damping)},
                  {"rel_tol", round_sig9(c.motion.solver.rel_tol)}}},
      {"synth", {{"visibility_tol", round_sig9(c.synth.visibility_tol)}, {"splat_radius", c.synth.splat_radius},
                 {"noise_sigma_max", round_sig9(c.synth.noise_sigma_max)}}},
      {"correspondence", {{"splat_radius", c.correspondence.splat_radius},
                          {"visibility_tol", round_sig9(c.correspondence.visibility_tol)},
                          {"max_distance", round_sig9(c.correspondence.max_distance)},
                          {"max_depth_jump", round_sig9(c.correspondence.max_depth_jump)}}},
      {"geometry", {{"splat_radius", c.geometry.splat_radius},
                    {"visibility_tol", round_sig9(c.geometry.visibility_tol)},
                    {"max_depth_jump", round_sig9(c.geometry.max_depth_jump)}}},
      {"uniform_motion_weight", c.uniform_motion_weight},
  };
}

namespace detail {

inline Json toml_to_json(const toml::node& n) {
  if (const auto* t = n.as_table()) {
    Json j = Json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = n.as_array()) {
    Json j = Json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* v = n.as_integer()) return Json(v->get());
  if (const auto* v = n.as_floating_point()) return Json(v->get());
  if (const auto* v = n.as_boolean()) return Json(v->get());
  if (const auto* v = n.as_string()) return Json(v->get());
  fail(ErrorCode::ParseError, "config: unsupported TOML value");
}

}  // namespace detail

/// Reads a JSON or TOML (by .toml extension) config file.
inline Json read_config_file(const std::filesystem::path& path) {
  if (path.extension() != ".toml") return read_json(path);
  const std::string text = read_text(path);
  try {
    return detail::toml_to_json(toml::parse(text, path.string()));
  } catch (const toml::parse_error& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + std::string(e.description()));
  }
}

}  // namespace ofusion

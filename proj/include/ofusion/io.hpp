#pragma once

// On-disk formats. A sequence directory holds
//   meta.json            camera, seed, noise sigma, frame and node counts, config echo
//   canonical.json       frame-0 vertices and the indices of the sampled nodes
//   frame_%04d.json      per-frame node positions, masks and motions
//   depth_%04d.bin       float32 little-endian, row-major, meters (0 = no hit)
//   flow_%04d.bin        float32 little-endian, row-major (u, v) pairs, pixels
// Registration output is warp_%04d.json plus energy_%04d.json per frame.
// Predictions travel as a JSON bundle {"method", "frames": [...]} or as a
// directory of pred_%04d.csv files.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/json_util.hpp"
#include "ofusion/motion.hpp"
#include "ofusion/registration.hpp"
#include "ofusion/synthgen.hpp"
#include "ofusion/warpfield.hpp"

namespace ofusion {

namespace fs = std::filesystem;

inline std::string numbered(const char* stem, std::size_t frame, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu%s", stem, frame, ext);
  return buf;
}

// ---------------------------------------------------------------------------
// Raw float32 rasters

static_assert(sizeof(float) == 4);

inline void write_f32(const fs::path& path, const std::vector<float>& data) {
  std::vector<std::uint32_t> words(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t w = std::bit_cast<std::uint32_t>(data[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

inline std::vector<float> read_f32(const fs::path& path, std::size_t count) {
  const std::string bytes = read_text(path);
  if (bytes.size() != count * 4) {
    fail(ErrorCode::ParseError, path.string() + ": expected " + std::to_string(count * 4) + " bytes, found " +
                                    std::to_string(bytes.size()));
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t w = 0;
    std::memcpy(&w, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    out[i] = std::bit_cast<float>(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

namespace detail {

inline Json mask_json(const VisibilityMask& m) {
  Json a = Json::array();
  for (char c : m) a.push_back(c ? 1 : 0);
  return a;
}

inline VisibilityMask mask_from_json(const Json& j, std::size_t n, const std::string& what) {
  if (!j.is_array() || j.size() != n) fail(ErrorCode::ParseError, what + ": expected " + std::to_string(n) + " flags");
  VisibilityMask m(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!j[i].is_number_integer()) fail(ErrorCode::ParseError, what + ": flags must be 0 or 1");
    m[i] = j[i].get<int>() != 0 ? 1 : 0;
  }
  return m;
}

inline Json motions_json(std::span<const Motion3> m, const VisibilityMask* only = nullptr) {
  Json a = Json::array();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (only != nullptr && !(*only)[i]) {
      a.push_back(nullptr);
    } else {
      a.push_back(to_json(m[i]));
    }
  }
  return a;
}

inline std::vector<Motion3> motions_from_json(const Json& j, std::size_t n, const std::string& what) {
  if (!j.is_array() || j.size() != n) fail(ErrorCode::ParseError, what + ": expected " + std::to_string(n) + " entries");
  std::vector<Motion3> out(n, Motion3::Zero());
  for (std::size_t i = 0; i < n; ++i) {
    if (!j[i].is_null()) out[i] = vec3_from_json(j[i], what);
  }
  return out;
}

}  // namespace detail

inline void write_sequence(const fs::path& dir, const SyntheticSequence& seq, const Json& config_echo) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  write_json(dir / "meta.json", Json{{"camera", to_json(seq.camera)},
                                     {"seed", seq.seed},
                                     {"noise_sigma", round_sig9(seq.noise_sigma)},
                                     {"frames", seq.frames.size()},
                                     {"node_count", seq.node_count()},
                                     {"vertex_count", seq.canonical_vertices.size()},
                                     {"config", config_echo}});
  write_json(dir / "canonical.json",
             Json{{"vertices", to_json(std::span<const Point3>(seq.canonical_vertices))},
                  {"node_indices", seq.node_indices}});
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto& f = seq.frames[t];
    write_json(dir / numbered("frame", t, ".json"),
               Json{{"frame", t},
                    {"node_positions", to_json(std::span<const Point3>(f.node_positions_gt))},
                    {"visibility", detail::mask_json(f.visibility)},
                    {"observed", detail::mask_json(f.observed)},
                    {"visible_motions", detail::motions_json(f.visible_motions, &f.visibility)},
                    {"motions_gt", detail::motions_json(f.motions_gt)}});
    write_f32(dir / numbered("depth", t, ".bin"), f.depth.data);
    write_f32(dir / numbered("flow", t, ".bin"), f.flow_gt.data);
  }
}

inline SyntheticSequence read_sequence(const fs::path& dir) {
  SyntheticSequence seq;
  const fs::path meta_path = dir / "meta.json";
  const Json meta = read_json(meta_path);
  std::size_t frames = 0;
  std::size_t nodes = 0;
  try {
    seq.camera = camera_from_json(meta.at("camera"));
    seq.seed = meta.at("seed").get<std::uint64_t>();
    seq.noise_sigma = meta.at("noise_sigma").get<double>();
    frames = meta.at("frames").get<std::size_t>();
    nodes = meta.at("node_count").get<std::size_t>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, meta_path.string() + ": " + e.what());
  }
  const fs::path canon_path = dir / "canonical.json";
  const Json canon = read_json(canon_path);
  try {
    seq.canonical_vertices = points_from_json(canon.at("vertices"), canon_path.string());
    seq.node_indices = canon.at("node_indices").get<std::vector<std::size_t>>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, canon_path.string() + ": " + e.what());
  }
  if (seq.node_indices.size() != nodes) {
    fail(ErrorCode::CountMismatch, canon_path.string() + ": node count differs from meta.json");
  }
  for (std::size_t i : seq.node_indices) {
    if (i >= seq.canonical_vertices.size()) fail(ErrorCode::ParseError, canon_path.string() + ": node index out of range");
  }
  const Camera& cam = seq.camera;
  const std::size_t pixels = static_cast<std::size_t>(cam.width) * cam.height;
  for (std::size_t t = 0; t < frames; ++t) {
    const fs::path fp = dir / numbered("frame", t, ".json");
    const Json j = read_json(fp);
    SyntheticFrame f;
    try {
      const std::string w = fp.string();
      f.node_positions_gt = points_from_json(j.at("node_positions"), w);
      if (f.node_positions_gt.size() != nodes) fail(ErrorCode::CountMismatch, w + ": node count differs from meta.json");
      f.visibility = detail::mask_from_json(j.at("visibility"), nodes, w);
      f.observed = detail::mask_from_json(j.at("observed"), nodes, w);
      f.visible_motions = detail::motions_from_json(j.at("visible_motions"), nodes, w);
      f.motions_gt = detail::motions_from_json(j.at("motions_gt"), nodes, w);
    } catch (const Json::exception& e) {
      fail(ErrorCode::ParseError, fp.string() + ": " + e.what());
    }
    f.depth = DepthImage(cam.width, cam.height);
    f.depth.data = read_f32(dir / numbered("depth", t, ".bin"), pixels);
    f.flow_gt = FlowField(cam.width, cam.height);
    f.flow_gt.data = read_f32(dir / numbered("flow", t, ".bin"), pixels * 2);
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Warp fields

inline Json to_json(const WarpField& f) {
  Json rot = Json::array();
  Json trans = Json::array();
  for (const auto& t : f.transforms) {
    rot.push_back(to_json(t.rotation()));
    trans.push_back(to_json(t.translation()));
  }
  return Json{{"positions", to_json(std::span<const Point3>(f.graph.positions))},
              {"edges", f.graph.edges},
              {"rotations", rot},
              {"translations", trans}};
}

inline WarpField warp_from_json(const Json& j, const std::string& what = "warp") {
  NodeGraph g;
  std::vector<RigidTransform> transforms;
  try {
    g.positions = points_from_json(j.at("positions"), what);
    g.edges = j.at("edges").get<std::vector<std::vector<std::size_t>>>();
    const auto& rot = j.at("rotations");
    const auto& trans = j.at("translations");
    if (!rot.is_array() || !trans.is_array() || rot.size() != g.size() || trans.size() != g.size()) {
      fail(ErrorCode::ParseError, what + ": one rotation and translation per node required");
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      transforms.emplace_back(mat3_from_json(rot[i], what), vec3_from_json(trans[i], what));
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, what + ": " + e.what());
  }
  if (!g.is_valid()) fail(ErrorCode::ParseError, what + ": malformed edge list");
  return {std::move(g), std::move(transforms)};
}

inline Json to_json(const TermEnergies& e) {
  return Json{{"depth", round_sig9(e.depth)},       {"projection", round_sig9(e.projection)},
              {"motion", round_sig9(e.targets)},    {"reg", round_sig9(e.reg)},
              {"total", round_sig9(e.total)},       {"skipped_projection", e.skipped_projection}};
}

inline Json to_json(const RegistrationReport& r) {
  Json iters = Json::array();
  for (const auto& it : r.solve.iterations) {
    iters.push_back(Json{{"iteration", it.iteration},
                         {"energy", round_sig9(it.energy)},
                         {"damping", round_sig9(it.damping)},
                         {"accepted", it.accepted}});
  }
  return Json{{"before", to_json(r.solve.before)},
              {"after", to_json(r.solve.after)},
              {"iterations", iters},
              {"accepted_steps", r.solve.accepted_steps},
              {"converged", r.solve.converged},
              {"correspondences", r.correspondences},
              {"skipped_2d", r.skipped_2d},
              {"excessive_2d_skips", r.excessive_2d_skips}};
}

/// Warp fields warp_0000.json, warp_0001.json, ... until the first gap.
inline std::vector<WarpField> read_warp_dir(const fs::path& dir) {
  std::vector<WarpField> out;
  for (std::size_t t = 0;; ++t) {
    const fs::path p = dir / numbered("warp", t, ".json");
    if (!fs::exists(p)) break;
    out.push_back(warp_from_json(read_json(p), p.string()));
  }
  if (out.empty()) fail(ErrorCode::IoError, dir.string() + ": no warp_0000.json");
  return out;
}

// ---------------------------------------------------------------------------
// Prediction sets: frame index -> prediction

using PredictionSet = std::map<std::size_t, MotionPrediction>;

inline Json prediction_bundle_json(const std::string& method, const PredictionSet& set) {
  Json frames = Json::array();
  for (const auto& [t, p] : set) {
    Json j = prediction_to_json(p);
    j["frame"] = t;
    frames.push_back(std::move(j));
  }
  return Json{{"method", method}, {"frames", frames}};
}

inline void write_prediction_set(const fs::path& out, const std::string& method, const PredictionSet& set) {
  if (out.extension() == ".json") {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_json(out, prediction_bundle_json(method, set));
    return;
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + out.string() + ": " + ec.message());
  for (const auto& [t, p] : set) write_text(out / numbered("pred", t, ".csv"), prediction_to_csv(p));
}

/// Reads a JSON bundle or a directory of pred_%04d.csv / pred_%04d.json.
/// Sigma is validated (negative values rejected) and floored at sigma_min.
inline PredictionSet read_prediction_set(const fs::path& path, double sigma_min) {
  PredictionSet set;
  auto wrap = [&](const fs::path& p, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::ParseError || e.code() == ErrorCode::NegativeSigma) {
        fail(e.code(), p.string() + ": " + e.what());
      }
      throw;
    }
  };
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      const std::string name = entry.path().filename().string();
      unsigned frame = 0;
      char ext[8] = {};
      if (std::sscanf(name.c_str(), "pred_%u.%4s", &frame, ext) != 2) continue;
      const std::string e(ext);
      if (e != "csv" && e != "json") continue;
      wrap(entry.path(), [&] {
        MotionPrediction p = e == "json" ? prediction_from_json(read_json(entry.path()))
                                         : prediction_from_csv(read_text(entry.path()));
        detail::validate_sigma(p, sigma_min);
        set[frame] = std::move(p);
      });
    }
    if (set.empty()) fail(ErrorCode::IoError, path.string() + ": no pred_NNNN.csv or .json files");
    return set;
  }
  const Json j = read_json(path);
  wrap(path, [&] {
    if (!j.is_object() || !j.contains("frames") || !j.at("frames").is_array()) {
      fail(ErrorCode::ParseError, "expected {\"method\", \"frames\": [...]}");
    }
    for (const auto& f : j.at("frames")) {
      if (!f.contains("frame") || !f.at("frame").is_number_unsigned()) fail(ErrorCode::ParseError, "frame entry without index");
      MotionPrediction p = prediction_from_json(f);
      detail::validate_sigma(p, sigma_min);
      set[f.at("frame").get<std::size_t>()] = std::move(p);
    }
  });
  return set;
}

// ---------------------------------------------------------------------------
// OBJ snapshots for external viewers

inline std::string points_obj(std::span<const Point3> pts) {
  std::string s;
  for (const auto& p : pts) s += "v " + format_sig9(p.x()) + " " + format_sig9(p.y()) + " " + format_sig9(p.z()) + "\n";
  return s;
}

inline std::string graph_obj(const std::vector<Point3>& positions, const std::vector<std::vector<std::size_t>>& edges) {
  std::string s = points_obj(positions);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    for (std::size_t j : edges[i]) {
      if (j > i || std::find(edges[j].begin(), edges[j].end(), i) == edges[j].end()) {
        s += "l " + std::to_string(i + 1) + " " + std::to_string(j + 1) + "\n";
      }
    }
  }
  return s;
}

}  // namespace ofusion

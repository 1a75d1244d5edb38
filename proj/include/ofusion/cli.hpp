#pragma once

// The ofusion command line: generate -> predict -> register -> evaluate.
//
// Exit codes (stable):
//   0  success
//   1  usage error (unknown flag, missing argument)
//   2  I/O, parse or input-validation error
//   3  solver failure (divergence, non-finite energy)

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "ofusion/config.hpp"
#include "ofusion/io.hpp"
#include "ofusion/metrics.hpp"
#include "ofusion/motion.hpp"
#include "ofusion/registration.hpp"
#include "ofusion/synthgen.hpp"

namespace ofusion::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInput = 2, kSolver = 3 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::SolverDiverged:
    case ErrorCode::NumericalFailure:
      return kSolver;
    default:
      return kInput;
  }
}

struct GenerateArgs {
  std::string spec;
  std::string out;
  std::uint64_t seed = 0;
};

struct PredictArgs {
  std::string seq;
  std::string method = "arap";
  std::string pred_file;
  std::string out;
};

struct RegisterArgs {
  std::string seq;
  std::string pred;
  std::string weights;
  std::string out;
  bool obj = false;
};

struct EvaluateArgs {
  std::string seq;
  std::string pred;
  std::string warp;
  std::string out;
};

// Stream id for the resize draw, kept apart from the per-frame noise seeds.
inline constexpr std::size_t kResizeStream = 0xFFFFFFFFu;

inline void cmd_generate(const GenerateArgs& a, const Config& cfg, std::ostream& out) {
  const Json spec = read_json(a.spec);
  AnimationSource anim;
  try {
    if (spec.contains("segments")) {
      anim = make_articulated_animation(articulated_spec_from_json(spec)).source;
    } else {
      anim = point_sequence_from_json(spec);
    }
  } catch (const Error& e) {
    fail(e.code(), a.spec + ": " + e.what());
  }
  const Camera cam = spec.contains("camera") ? camera_from_json(spec.at("camera")) : Camera{};
  double lo = 1.0;
  double hi = 2.0;
  bool resize = true;
  if (spec.contains("resize")) {
    const auto& r = spec.at("resize");
    if (r.is_boolean()) {
      resize = r.get<bool>();
    } else if (r.is_array() && r.size() == 2 && r[0].is_number() && r[1].is_number()) {
      lo = r[0].get<double>();
      hi = r[1].get<double>();
    } else {
      fail(ErrorCode::BadSpec, a.spec + ": resize must be a boolean or [min, max]");
    }
  }
  if (resize) anim = resize_to_box(anim, lo, hi, frame_seed(a.seed, kResizeStream));
  anim = place_in_view(anim, cam);
  const SyntheticSequence seq = generate_sequence(anim, cam, cfg.synth, a.seed);
  write_sequence(a.out, seq, Json{{"config", to_json(cfg)}, {"spec", spec}});
  out << "generated " << seq.frames.size() << " frames, " << seq.node_count() << " nodes -> " << a.out << "\n";
}

namespace detail {

/// Reorders an external prediction to the rows of a frame graph.
inline MotionPrediction align_rows(const MotionPrediction& p, const std::vector<std::size_t>& ids,
                                   const std::string& file, std::size_t frame) {
  const std::string where = file + ": frame " + std::to_string(frame);
  if (p.size() != ids.size()) {
    fail(ErrorCode::CountMismatch, where + ": expected " + std::to_string(ids.size()) + " observed nodes, found " +
                                       std::to_string(p.size()));
  }
  std::unordered_map<std::size_t, std::size_t> row_of;
  for (std::size_t r = 0; r < p.size(); ++r) row_of[p.id(r)] = r;
  MotionPrediction out;
  out.source = p.source;
  for (std::size_t id : ids) {
    const auto it = row_of.find(id);
    if (it == row_of.end()) fail(ErrorCode::CountMismatch, where + ": no row for node " + std::to_string(id));
    out.nodes.push_back(p.nodes[it->second]);
  }
  return out;
}

inline const MotionPrediction& frame_prediction(const PredictionSet& set, std::size_t t, const std::string& file) {
  const auto it = set.find(t);
  if (it == set.end()) fail(ErrorCode::ParseError, file + ": no prediction for frame " + std::to_string(t));
  return it->second;
}

}  // namespace detail

inline void cmd_predict(const PredictArgs& a, const Config& cfg, std::ostream& out) {
  const PredictionSource method = prediction_source_from(a.method);
  const SyntheticSequence seq = read_sequence(a.seq);
  std::optional<PredictionSet> external;
  if (!a.pred_file.empty()) external = read_prediction_set(a.pred_file, cfg.motion.sigma_min);
  PredictionSet set;
  for (std::size_t t = 1; t < seq.frames.size(); ++t) {
    const FrameGraph fg = frame_graph(seq, t, cfg.pyramid);
    const NodeGraph& g = fg.pyramid.levels[0];
    std::optional<MotionPrediction> base;
    if (external) base = detail::align_rows(detail::frame_prediction(*external, t, a.pred_file), fg.node_ids, a.pred_file, t);
    MotionPrediction p;
    switch (method) {
      case PredictionSource::Rigid:
        p = predict_rigid(g, fg.visible_motions, fg.visibility, cfg.motion);
        break;
      case PredictionSource::Arap:
        p = predict_arap(fg.pyramid, fg.visible_motions, fg.visibility, cfg.motion);
        break;
      case PredictionSource::ArapRefined: {
        const MotionPrediction start = base ? *base : predict_rigid(g, fg.visible_motions, fg.visibility, cfg.motion);
        p = arap_refine(fg.pyramid, start, fg.visibility, fg.visible_motions, cfg.motion);
        break;
      }
      case PredictionSource::External:
        p = *base;
        p.source = PredictionSource::External;
        break;
    }
    p.node_ids = fg.node_ids;
    set[t] = std::move(p);
  }
  write_prediction_set(a.out, a.method, set);
  out << "predicted " << set.size() << " frames with " << a.method << " -> " << a.out << "\n";
}

inline void cmd_register(const RegisterArgs& a, const Config& base_cfg, std::ostream& out) {
  Config cfg = base_cfg;
  if (!a.weights.empty()) merge_config(cfg, read_config_file(a.weights));
  const SyntheticSequence seq = read_sequence(a.seq);
  std::optional<PredictionSet> preds;
  if (!a.pred.empty()) preds = read_prediction_set(a.pred, cfg.motion.sigma_min);

  const NodeGraph graph = knn_graph(seq.canonical_nodes(), cfg.pyramid.neighbors[0]);
  const auto mesh = skin_vertices(seq.canonical_vertices, graph, cfg.skinning);
  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());

  auto snapshot = [&](const WarpField& f, std::size_t t) {
    write_json(dir / numbered("warp", t, ".json"), to_json(f));
    if (!a.obj) return;
    write_text(dir / numbered("model", t, ".obj"), points_obj(warp_points(f, mesh)));
    std::vector<Point3> nodes;
    for (std::size_t i = 0; i < f.size(); ++i) nodes.push_back(f.node_position(i));
    write_text(dir / numbered("graph", t, ".obj"), graph_obj(nodes, f.graph.edges));
  };

  WarpField field(graph);
  snapshot(field, 0);
  for (std::size_t t = 1; t < seq.frames.size(); ++t) {
    const auto& fr = seq.frames[t];
    CorrespondenceStats stats;
    const auto corr = build_correspondences(field, mesh, fr.flow_gt, fr.depth, seq.camera, cfg.correspondence, &stats);
    const MotionPrediction* pred = nullptr;
    std::vector<double> w;
    if (preds) {
      pred = &detail::frame_prediction(*preds, t, a.pred);
      for (std::size_t r = 0; r < pred->size(); ++r) {
        if (pred->id(r) >= graph.size()) {
          fail(ErrorCode::CountMismatch, a.pred + ": frame " + std::to_string(t) + " names node " +
                                             std::to_string(pred->id(r)) + " outside the graph");
        }
      }
      w = cfg.uniform_motion_weight ? std::vector<double>(pred->size(), 1.0) : motion_weights(pred->nodes, cfg.confidence);
    }
    RegistrationReport rep;
    field = solve_warpfield(field, corr, pred, w, seq.camera, cfg.energy, cfg.solver, &rep);
    snapshot(field, t);
    Json j = to_json(rep);
    j["frame"] = t;
    j["correspondence_stats"] = Json{{"visible", stats.visible},
                                     {"out_of_bounds", stats.out_of_bounds},
                                     {"invalid_depth", stats.invalid_depth},
                                     {"too_far", stats.too_far}};
    write_json(dir / numbered("energy", t, ".json"), j);
  }
  out << "registered " << seq.frames.size() << " frames -> " << a.out << "\n";
}

inline EvalReport evaluate_predictions(const SyntheticSequence& seq, const PredictionSet& set, const std::string& file) {
  EvalReport rep;
  for (const auto& [t, p] : set) {
    if (t < 1 || t >= seq.frames.size()) fail(ErrorCode::ParseError, file + ": frame " + std::to_string(t) + " out of range");
    const auto& fr = seq.frames[t];
    std::size_t observed = 0;
    for (char c : fr.observed) observed += c ? 1 : 0;
    if (p.size() != observed) {
      fail(ErrorCode::CountMismatch, file + ": frame " + std::to_string(t) + " has " + std::to_string(p.size()) +
                                         " rows, sequence has " + std::to_string(observed) + " observed nodes");
    }
    std::vector<Motion3> pm;
    std::vector<Motion3> gm;
    std::vector<char> occ;
    for (std::size_t r = 0; r < p.size(); ++r) {
      const std::size_t id = p.id(r);
      if (id >= seq.node_count() || !fr.observed[id]) {
        fail(ErrorCode::CountMismatch, file + ": frame " + std::to_string(t) + " names unobserved node " + std::to_string(id));
      }
      pm.push_back(p.nodes[r].mu);
      gm.push_back(fr.motions_gt[id]);
      occ.push_back(fr.visibility[id] ? 0 : 1);
    }
    FrameMetrics m;
    m.frame = t;
    if (!pm.empty()) m.epe_all_mm = epe(pm, gm);
    if (std::find(occ.begin(), occ.end(), 1) != occ.end()) m.epe_occluded_mm = epe(pm, gm, occ);
    rep.frames.push_back(m);
  }
  return rep;
}

inline EvalReport evaluate_warps(const SyntheticSequence& seq, const std::vector<WarpField>& fields,
                                 const std::string& dir, const Config& cfg) {
  if (fields.size() != seq.frames.size()) {
    fail(ErrorCode::CountMismatch, dir + ": " + std::to_string(fields.size()) + " warp files for " +
                                       std::to_string(seq.frames.size()) + " frames");
  }
  EvalReport rep;
  for (std::size_t t = 0; t < fields.size(); ++t) {
    if (fields[t].size() != seq.node_count()) {
      fail(ErrorCode::CountMismatch, (fs::path(dir) / numbered("warp", t, ".json")).string() + ": " +
                                         std::to_string(fields[t].size()) + " nodes, sequence has " +
                                         std::to_string(seq.node_count()));
    }
  }
  const auto mesh = skin_vertices(seq.canonical_vertices, fields[0].graph, cfg.skinning);
  for (std::size_t t = 1; t < fields.size(); ++t) {
    const auto& fr = seq.frames[t];
    const auto disp = node_displacements(fields[t - 1], fields[t]);
    std::vector<char> occ(fr.visibility.size());
    for (std::size_t i = 0; i < occ.size(); ++i) occ[i] = fr.visibility[i] ? 0 : 1;
    FrameMetrics m;
    m.frame = t;
    m.epe_all_mm = epe(disp, fr.motions_gt);
    if (std::find(occ.begin(), occ.end(), 1) != occ.end()) m.epe_occluded_mm = epe(disp, fr.motions_gt, occ);
    try {
      m.geometry_error_cm = geometry_error(warp_points(fields[t], mesh), fr.depth, seq.camera, cfg.geometry);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoValidVertices) throw;
    }
    rep.frames.push_back(m);
  }
  return rep;
}

inline void cmd_evaluate(const EvaluateArgs& a, const Config& cfg, std::ostream& out) {
  const SyntheticSequence seq = read_sequence(a.seq);
  EvalReport rep;
  if (!a.pred.empty()) {
    const PredictionSet set = read_prediction_set(a.pred, cfg.motion.sigma_min);
    rep = evaluate_predictions(seq, set, a.pred);
    rep.source = "prediction";
  } else {
    rep = evaluate_warps(seq, read_warp_dir(a.warp), a.warp, cfg);
    rep.source = "warp";
  }
  rep.config = to_json(cfg);
  const Json j = to_json(rep);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  write_json(a.out, j);
  out << "epe_all_mm " << j["summary"]["epe_all_mm"]["mean"].dump() << ", epe_occluded_mm "
      << j["summary"]["epe_occluded_mm"]["mean"].dump() << " -> " << a.out << "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Occlusion-aware non-rigid tracking toolkit", "ofusion"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON or TOML file overriding defaults")->check(CLI::ExistingFile);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Write a synthetic sequence directory");
  gen->add_option("--spec", ga.spec, "Animation spec (articulated JSON or point sequence)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", ga.out, "Output directory")->required();
  gen->add_option("--seed", ga.seed, "Master seed")->required();

  PredictArgs pa;
  auto* pred = app.add_subcommand("predict", "Predict per-frame node motions");
  pred->add_option("--seq", pa.seq, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  pred->add_option("--method", pa.method, "Prediction method")
      ->required()
      ->check(CLI::IsMember({"rigid", "arap", "arap-refined", "external"}));
  pred->add_option("--pred-file", pa.pred_file, "External predictions (bundle JSON or pred_NNNN.csv directory)")
      ->check(CLI::ExistingPath);
  pred->add_option("--out", pa.out, "Bundle .json or a directory for pred_NNNN.csv")->required();

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "Track the sequence with the warp-field solver");
  reg->add_option("--seq", ra.seq, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  reg->add_option("--pred", ra.pred, "Prediction bundle or directory for the motion term")->check(CLI::ExistingPath);
  reg->add_option("--weights", ra.weights, "Config file with energy and solver settings")->check(CLI::ExistingFile);
  reg->add_option("--out", ra.out, "Output directory")->required();
  reg->add_flag("--obj", ra.obj, "Also write OBJ snapshots of the model and graph");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Score predictions or warp fields against ground truth");
  ev->add_option("--seq", ea.seq, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  auto* ev_pred = ev->add_option("--pred", ea.pred, "Prediction bundle or directory")->check(CLI::ExistingPath);
  auto* ev_warp = ev->add_option("--warp", ea.warp, "Directory of warp_NNNN.json")->check(CLI::ExistingDirectory);
  ev_pred->excludes(ev_warp);
  ev->add_option("--out", ea.out, "Report path")->required();

  try {
    app.parse(argc, argv);
    if (ev->parsed() && ea.pred.empty() && ea.warp.empty()) {
      throw CLI::RequiredError("evaluate needs --pred or --warp");
    }
    if (pred->parsed() && pa.method == "external" && pa.pred_file.empty()) {
      throw CLI::RequiredError("--method external needs --pred-file");
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kOk;
    err << "\n" << app.help();
    return kUsage;
  }

  try {
    Config cfg;
    if (!config_path.empty()) merge_config(cfg, read_config_file(config_path));
    if (gen->parsed()) cmd_generate(ga, cfg, out);
    if (pred->parsed()) cmd_predict(pa, cfg, out);
    if (reg->parsed()) cmd_register(ra, cfg, out);
    if (ev->parsed()) cmd_evaluate(ea, cfg, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const Json::exception& e) {
    err << "error (ParseError): " << e.what() << "\n";
    return kInput;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error (IoError): " << e.what() << "\n";
    return kInput;
  }
  return kOk;
}

}  // namespace ofusion::cli

// Deformation energies, the LM solver, correspondence search, and the
// occluded-motion predictors.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "oracles.hpp"

using namespace ofusion;
namespace fs = std::filesystem;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an ofusion::Error";
  return ErrorCode::InvalidArgument;
}

template <typename F>
std::string message_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected an ofusion::Error";
  return {};
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec3(n(rng), n(rng), n(rng)).normalized();
}

// Small random deformation problem in front of the default camera.
struct Instance {
  WarpField field;
  std::vector<Correspondence> corr;
  std::vector<NodeTarget> targets;
  Camera cam;
};

Instance random_instance(std::mt19937_64& rng, std::size_t nodes = 6, std::size_t verts = 12) {
  Instance in;
  std::vector<Point3> pos;
  for (std::size_t i = 0; i < nodes; ++i) {
    Point3 p = oracle::random_point(rng, -0.2, 0.2);
    p.z() += 1.2;
    pos.push_back(p);
  }
  in.field = WarpField(knn_graph(pos, 3));
  for (auto& t : in.field.transforms) {
    t = RigidTransform(oracle::random_rotation(rng, 0.3), oracle::random_point(rng, -0.02, 0.02));
  }
  std::vector<Point3> vs;
  for (std::size_t k = 0; k < verts; ++k) vs.push_back(pos[k % nodes] + oracle::random_point(rng, -0.05, 0.05));
  const auto skinned = skin_vertices(vs, in.field.graph, 3, 0.3);
  for (const auto& sv : skinned) {
    in.corr.push_back({sv, warp_point(in.field, sv) + oracle::random_point(rng, -0.01, 0.01), random_unit(rng)});
  }
  std::uniform_real_distribution<double> w(0.5, 2.0);
  for (std::size_t i = 0; i < nodes; ++i) {
    in.targets.push_back({i, in.field.node_position(i) + oracle::random_point(rng, -0.02, 0.02), w(rng)});
  }
  return in;
}

DeformProblem only(const Instance& in, int term, RegForm form = RegForm::Standard) {
  DeformProblem p;
  p.correspondences = in.corr;
  p.camera = in.cam;
  p.targets = in.targets;
  p.reg_form = form;
  (term == 0 ? p.lambda_depth : term == 1 ? p.lambda_2d : term == 2 ? p.lambda_targets : p.lambda_reg) = 1.0;
  return p;
}

double gradient_error(const DeformProblem& p, const WarpField& f) {
  const Eigen::VectorXd analytic = energy_gradient(p, f);
  const Eigen::VectorXd numeric =
      oracle::numeric_gradient([&](const WarpField& g) { return evaluate_terms(p, g).total; }, f);
  return oracle::relative_error(analytic, numeric);
}

WarpField two_nodes(bool both_directions) {
  NodeGraph g;
  g.positions = {{0, 0, 1}, {0.1, 0, 1}};
  g.edges = {{1}, {}};
  if (both_directions) g.edges[1] = {0};
  return WarpField(g);
}

// Ladder of 2 x 10 nodes along x; nodes with x beyond the joint form segment B.
struct Chain {
  GraphPyramid pyramid;
  std::vector<Motion3> gt;
  VisibilityMask mask;
};

Chain articulated_chain(double angle) {
  std::vector<Point3> pos;
  for (int i = 0; i < 10; ++i) {
    pos.push_back({0.05 * i, 0.0, 1.0});
    pos.push_back({0.05 * i, 0.05, 1.0});
  }
  PyramidConfig cfg;
  cfg.intervals = {0.05, 0.1, 0.2, 0.4};
  cfg.neighbors = {5, 4, 3, 2};
  Chain c;
  c.pyramid = build_pyramid_from_nodes(pos, cfg);
  const auto bend = RigidTransform::rotation_around({0.225, 0.025, 1.0}, Vec3::UnitZ(), angle);
  for (const auto& p : c.pyramid.levels[0].positions) c.gt.push_back(p.x() > 0.23 ? Vec3(bend(p) - p) : Vec3::Zero());
  c.mask.assign(pos.size(), 1);
  for (std::size_t i : {4u, 7u, 13u, 16u}) c.mask[i] = 0;
  return c;
}

std::vector<Motion3> visible_only(const std::vector<Motion3>& m, const VisibilityMask& mask) {
  std::vector<Motion3> out = m;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!mask[i]) out[i] = Motion3::Constant(std::nan(""));
  }
  return out;
}

double occluded_epe(const MotionPrediction& p, const std::vector<Motion3>& gt, const VisibilityMask& mask) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (mask[i]) continue;
    s += (p.nodes[i].mu - gt[i]).norm();
    ++n;
  }
  return s / n;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(testing::TempDir()) / "ofusion_solver_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

// ----------------------------------------------------------------- energies

TEST(EDepth, PerfectAlignmentIsZero) {
  std::mt19937_64 rng(1);
  Instance in = random_instance(rng);
  for (auto& c : in.corr) c.target = warp_point(in.field, c.vertex);
  EXPECT_DOUBLE_EQ(e_depth(in.field, in.corr), 0.0);
}

TEST(EDepth, SingleTerm) {
  WarpField f(knn_graph({{0, 0, 1}}, 1));
  f.transforms[0] = RigidTransform::from_translation({0, 0, 0.01});
  const auto sv = skin_vertices(std::vector<Point3>{{0, 0, 1}}, f.graph, 1, 0.1);
  const std::vector<Correspondence> corr{{sv[0], {0, 0, 1}, {0, 0, 1}}};
  EXPECT_NEAR(e_depth(f, corr), 1e-4, 1e-15);
}

TEST(EDepth, TangentialOffsetIsBlind) {
  WarpField f(knn_graph({{0, 0, 1}}, 1));
  f.transforms[0] = RigidTransform::from_translation({0.03, -0.02, 0});
  const auto sv = skin_vertices(std::vector<Point3>{{0, 0, 1}}, f.graph, 1, 0.1);
  const std::vector<Correspondence> corr{{sv[0], {0, 0, 1}, {0, 0, 1}}};
  EXPECT_DOUBLE_EQ(e_depth(f, corr), 0.0);
}

TEST(EMotion, ExactDisplacementIsZero) {
  std::mt19937_64 rng(2);
  const Instance in = random_instance(rng);
  const WarpField prev = in.field;
  MotionPrediction pred;
  WarpField cur = prev;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    const Vec3 mu = oracle::random_point(rng, -0.05, 0.05);
    pred.nodes.push_back({mu, 0.01});
    cur.transforms[i] = RigidTransform(oracle::random_rotation(rng, 1.0), prev.transforms[i].translation() + mu);
  }
  const std::vector<double> w(prev.size(), 1.0);
  EXPECT_NEAR(e_motion(prev, cur, pred, w), 0.0, 1e-28);
}

TEST(EMotion, ZeroWeightsAnnihilate) {
  std::mt19937_64 rng(3);
  const Instance a = random_instance(rng);
  WarpField b = a.field;
  for (auto& t : b.transforms) t = RigidTransform::from_translation(oracle::random_point(rng, -1, 1));
  MotionPrediction pred;
  for (std::size_t i = 0; i < a.field.size(); ++i) pred.nodes.push_back({oracle::random_point(rng, -1, 1), 0.1});
  const std::vector<double> w(a.field.size(), 0.0);
  EXPECT_EQ(e_motion(a.field, b, pred, w), 0.0);
}

TEST(EMotion, SingleNode) {
  WarpField prev(knn_graph({{0, 0, 1}}, 1));
  WarpField cur = prev;
  cur.transforms[0] = RigidTransform::from_translation({0.02, 0, 0});
  MotionPrediction pred;
  pred.nodes = {{{0.01, 0, 0}, 0.0}};
  const std::vector<double> w{1.0};
  EXPECT_NEAR(e_motion(prev, cur, pred, w), 1e-4, 1e-15);
}

TEST(EMotion, GraphMismatch) {
  WarpField a(knn_graph({{0, 0, 1}}, 1));
  WarpField b(knn_graph({{0, 0, 1}, {1, 0, 1}}, 1));
  MotionPrediction pred;
  pred.nodes = {{Vec3::Zero(), 0.0}};
  const std::vector<double> w{1.0};
  EXPECT_EQ(code_of([&] { e_motion(a, b, pred, w); }), ErrorCode::GraphMismatch);
}

TEST(E2d, CoincidentIsZero) {
  std::mt19937_64 rng(4);
  Instance in = random_instance(rng);
  for (auto& c : in.corr) c.target = warp_point(in.field, c.vertex);
  EXPECT_DOUBLE_EQ(e_2d(in.field, in.corr, in.cam), 0.0);
}

TEST(E2d, SameRayIsZero) {
  const Camera cam;
  WarpField f(knn_graph({{0.1, 0.05, 1.0}}, 1));
  const auto sv = skin_vertices(std::vector<Point3>{{0.1, 0.05, 1.0}}, f.graph, 1, 0.1);
  const std::vector<Correspondence> corr{{sv[0], Point3(0.1, 0.05, 1.0) * 1.7, {0, 0, 1}}};
  EXPECT_NEAR(e_2d(f, corr, cam), 0.0, 1e-20);
}

TEST(E2d, ThreePixelsRight) {
  const Camera cam;
  const Point3 u = backproject(cam, 100.0, 80.0, 1.5);
  const Point3 v = backproject(cam, 103.0, 80.0, 1.5);
  WarpField f(knn_graph({v}, 1));
  const auto sv = skin_vertices(std::vector<Point3>{v}, f.graph, 1, 0.1);
  const std::vector<Correspondence> corr{{sv[0], u, {0, 0, 1}}};
  EXPECT_NEAR(e_2d(f, corr, cam), 9.0, 1e-9);
}

TEST(E2d, BehindCameraSkippedAndCounted) {
  const Camera cam;
  WarpField f(knn_graph({{0, 0, 1}}, 1));
  const auto sv = skin_vertices(std::vector<Point3>{{0, 0, 1}}, f.graph, 1, 0.1);
  const std::vector<Correspondence> corr{{sv[0], {0, 0, -1}, {0, 0, 1}}, {sv[0], {0.01, 0, 1}, {0, 0, 1}}};
  std::size_t skipped = 0;
  const double e = e_2d(f, corr, cam, &skipped);
  EXPECT_EQ(skipped, 1u);
  EXPECT_NEAR(e, std::pow(285.0 * 0.01, 2), 1e-9);
}

TEST(EReg, IdentityIsZero) {
  std::mt19937_64 rng(5);
  Instance in = random_instance(rng);
  for (auto& t : in.field.transforms) t = RigidTransform::identity();
  EXPECT_EQ(e_reg(in.field), 0.0);
}

TEST(EReg, GlobalRigidIsZero) {
  std::mt19937_64 rng(6);
  for (int k = 0; k < 20; ++k) {
    const Instance in = random_instance(rng, 10);
    const RigidTransform g(oracle::random_rotation(rng, 3.0), oracle::random_point(rng, -1, 1));
    EXPECT_NEAR(e_reg(rigid_field(in.field.graph, g)), 0.0, 1e-24);
  }
}

TEST(EReg, TwoNodesEdgeCounting) {
  WarpField both = two_nodes(true);
  both.transforms[1] = RigidTransform::from_translation({0.01, 0, 0});
  EXPECT_NEAR(e_reg(both), 2e-4, 1e-15);
  WarpField one = two_nodes(false);
  one.transforms[1] = RigidTransform::from_translation({0.01, 0, 0});
  EXPECT_NEAR(e_reg(one), 1e-4, 1e-15);
}

TEST(EReg, PrintedFormPenalizesIdentity) {
  const WarpField f = two_nodes(true);
  EXPECT_EQ(e_reg(f, RegForm::Standard), 0.0);
  EXPECT_NEAR(e_reg(f, RegForm::Printed), 2.0 * 0.01, 1e-15);
}

// ---------------------------------------------------------------- gradients

TEST(Gradient, EachTermMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const char* names[] = {"depth", "projection", "targets", "reg"};
  for (int term = 0; term < 4; ++term) {
    double worst = 0.0;
    for (int k = 0; k < 25; ++k) {
      const Instance in = random_instance(rng);
      worst = std::max(worst, gradient_error(only(in, term), in.field));
    }
    EXPECT_LT(worst, 1e-4) << names[term];
  }
}

TEST(Gradient, PrintedRegForm) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 10; ++k) {
    const Instance in = random_instance(rng);
    EXPECT_LT(gradient_error(only(in, 3, RegForm::Printed), in.field), 1e-4);
  }
}

TEST(Gradient, WeightedSum) {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 10; ++k) {
    const Instance in = random_instance(rng);
    DeformProblem p = only(in, 0);
    p.lambda_2d = 1e-6;
    p.lambda_targets = 2.0;
    p.lambda_reg = 5.0;
    EXPECT_LT(gradient_error(p, in.field), 1e-4);
  }
}

// ------------------------------------------------------------------- solver

TEST(Solver, MonotoneDescent) {
  std::mt19937_64 rng(10);
  for (int k = 0; k < 10; ++k) {
    const Instance in = random_instance(rng, 8, 30);
    DeformProblem p = only(in, 0);
    p.lambda_2d = 1e-6;
    p.lambda_targets = 2.0;
    p.lambda_reg = 5.0;
    WarpField start(in.field.graph);
    SolveReport rep;
    solve_deformation(p, start, SolverParams{}, &rep);
    ASSERT_FALSE(rep.iterations.empty());
    for (std::size_t i = 1; i < rep.iterations.size(); ++i) {
      EXPECT_LE(rep.iterations[i].energy, rep.iterations[i - 1].energy);
    }
    EXPECT_LE(rep.after.total, rep.before.total);
  }
}

TEST(Solver, Deterministic) {
  std::mt19937_64 rng(11);
  const Instance in = random_instance(rng, 8, 30);
  DeformProblem p = only(in, 0);
  p.lambda_reg = 5.0;
  const WarpField start(in.field.graph);
  const WarpField a = solve_deformation(p, start, SolverParams{});
  const WarpField b = solve_deformation(p, start, SolverParams{});
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.transforms[i].rotation(), b.transforms[i].rotation());
    EXPECT_EQ(a.transforms[i].translation(), b.transforms[i].translation());
  }
}

TEST(Solver, EnergyInvariantUnderRelabeling) {
  std::mt19937_64 rng(12);
  for (int k = 0; k < 10; ++k) {
    const Instance in = random_instance(rng, 7, 15);
    const std::size_t n = in.field.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    NodeGraph g;
    g.positions.resize(n);
    g.edges.resize(n);
    std::vector<RigidTransform> t(n);
    for (std::size_t i = 0; i < n; ++i) {
      g.positions[perm[i]] = in.field.graph.positions[i];
      t[perm[i]] = in.field.transforms[i];
      for (std::size_t e : in.field.graph.edges[i]) g.edges[perm[i]].push_back(perm[e]);
    }
    Instance q = in;
    q.field = WarpField(g, t);
    for (auto& c : q.corr) {
      for (auto& a : c.vertex.anchors) a.node = perm[a.node];
    }
    for (auto& tg : q.targets) tg.node = perm[tg.node];

    for (int term = 0; term < 4; ++term) {
      const double e0 = evaluate_terms(only(in, term), in.field).total;
      const double e1 = evaluate_terms(only(q, term), q.field).total;
      EXPECT_NEAR(e0, e1, 1e-12 * std::max(1.0, std::abs(e0)));
    }
  }
}

TEST(Solver, MotionOnlyDisplacesByMu) {
  std::mt19937_64 rng(13);
  const Instance in = random_instance(rng, 9);
  MotionPrediction pred;
  for (std::size_t i = 0; i < in.field.size(); ++i) pred.nodes.push_back({oracle::random_point(rng, -0.05, 0.05), 0.0});
  const std::vector<double> w(in.field.size(), 1.0);
  const EnergyWeights ew{0.0, 2.0, 0.0, 0.0};
  const std::vector<Correspondence> none;
  const WarpField out = solve_warpfield(in.field, none, &pred, w, in.cam, ew, SolverParams{});
  const auto d = node_displacements(in.field, out);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_LT((d[i] - pred.nodes[i].mu).norm(), 1e-9);
}

TEST(Solver, ExactRecoveryFromPerfectCorrespondences) {
  std::mt19937_64 rng(14);
  const Instance in = random_instance(rng, 10, 10);
  const WarpField prev(in.field.graph);
  Point3 c = Point3::Zero();
  for (const auto& p : prev.graph.positions) c += p;
  c /= static_cast<double>(prev.size());
  const auto g = compose(RigidTransform::from_translation({0.02, -0.01, 0.03}),
                         RigidTransform::rotation_around(c, Vec3(1, 2, 3).normalized(), 0.1));
  const WarpField gt = rigid_field(prev.graph, g);
  std::vector<Point3> vs;
  for (int k = 0; k < 200; ++k) vs.push_back(prev.graph.positions[k % prev.size()] + oracle::random_point(rng, -0.06, 0.06));
  std::vector<Correspondence> corr;
  for (const auto& sv : skin_vertices(vs, prev.graph, 4, 0.3)) corr.push_back({sv, warp_point(gt, sv), random_unit(rng)});
  RegistrationReport rep;
  const WarpField out =
      solve_warpfield(prev, corr, nullptr, {}, in.cam, EnergyWeights{1.0, 0.0, 1e-6, 5.0}, SolverParams{}, &rep);
  double worst = 0.0;
  for (const auto& cr : corr) worst = std::max(worst, (warp_point(out, cr.vertex) - cr.target).norm());
  EXPECT_LT(worst, 1e-3);
  EXPECT_EQ(rep.correspondences, corr.size());
  EXPECT_EQ(rep.skipped_2d, 0u);
}

TEST(Solver, ZeroMotionIsFixedPoint) {
  std::mt19937_64 rng(15);
  Instance in = random_instance(rng, 8, 40);
  // A previous field with no internal strain, so every term is zero there.
  in.field = rigid_field(in.field.graph, {oracle::random_rotation(rng, 0.5), oracle::random_point(rng, -0.05, 0.05)});
  std::vector<Correspondence> corr = in.corr;
  for (auto& c : corr) c.target = warp_point(in.field, c.vertex);
  MotionPrediction pred;
  pred.nodes.assign(in.field.size(), {Vec3::Zero(), 0.001});
  const auto w = motion_weights(pred.nodes, WeightParams{});
  const WarpField out = solve_warpfield(in.field, corr, &pred, w, in.cam, EnergyWeights{}, SolverParams{});
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_LT((out.node_position(i) - in.field.node_position(i)).norm(), 1e-4);
  }
  for (const auto& c : corr) EXPECT_LT((warp_point(out, c.vertex) - c.target).norm(), 1e-4);
}

TEST(Solver, DivergesWhenEveryStepIsRejected) {
  // One node whose only useful freedom is a rotation already at the bottom of
  // a non-quadratic valley; the first damped steps all overshoot.
  NodeGraph g;
  g.positions = {{0, 0, 0}};
  g.edges = {{}};
  WarpField f(g);
  f.transforms[0] = RigidTransform(rotation_about(Vec3::UnitZ(), std::numbers::pi / 2 - 1e-3), Vec3::Zero());
  const auto sv = skin_vertices(std::vector<Point3>{{1, 0, 0}}, g, 1, 2.0);
  const std::vector<Correspondence> corr{{sv[0], {0, 2, 0}, {0, 1, 0}}};
  DeformProblem p;
  p.correspondences = corr;
  p.lambda_depth = 1.0;
  p.lambda_targets = 1.0;
  p.targets = {{0, {0, 0, 0}, 1e6}};
  SolverParams sp;
  sp.max_iters = 2;
  EXPECT_EQ(code_of([&] { solve_deformation(p, f, sp); }), ErrorCode::SolverDiverged);
}

TEST(Solver, NonFiniteEnergy) {
  std::mt19937_64 rng(16);
  Instance in = random_instance(rng);
  in.targets[0].target = Point3::Constant(std::nan(""));
  EXPECT_EQ(code_of([&] { solve_deformation(only(in, 2), in.field, SolverParams{}); }), ErrorCode::NumericalFailure);
}

TEST(Solver, ProjectionNeedsCamera) {
  std::mt19937_64 rng(17);
  const Instance in = random_instance(rng);
  DeformProblem p = only(in, 1);
  p.camera.reset();
  EXPECT_EQ(code_of([&] { solve_deformation(p, in.field, SolverParams{}); }), ErrorCode::InvalidArgument);
  SolverParams bad;
  bad.max_iters = 0;
  EXPECT_EQ(code_of([&] { solve_deformation(only(in, 0), in.field, bad); }), ErrorCode::InvalidArgument);
}

TEST(Solver, MotionWeightCountChecked) {
  std::mt19937_64 rng(18);
  const Instance in = random_instance(rng);
  MotionPrediction pred;
  pred.nodes.assign(in.field.size(), {Vec3::Zero(), 0.0});
  const std::vector<double> w(in.field.size() - 1, 1.0);
  EXPECT_EQ(code_of([&] { solve_warpfield(in.field, in.corr, &pred, w, in.cam, EnergyWeights{}, SolverParams{}); }),
            ErrorCode::SizeMismatch);
}

TEST(Solver, InitialFieldAppliesPredictedRigidMotion) {
  std::mt19937_64 rng(19);
  const Instance in = random_instance(rng, 8);
  const RigidTransform g(oracle::random_rotation(rng, 0.4), oracle::random_point(rng, -0.1, 0.1));
  MotionPrediction pred;
  for (std::size_t i = 0; i < in.field.size(); ++i) {
    const Point3 p = in.field.node_position(i);
    pred.nodes.push_back({g(p) - p, 0.0});
  }
  const std::vector<double> w(in.field.size(), 1.0);
  const WarpField init = initial_field(in.field, &pred, w);
  for (std::size_t i = 0; i < init.size(); ++i) {
    EXPECT_LT((init.node_position(i) - g(in.field.node_position(i))).norm(), 1e-9);
  }
}

// ---------------------------------------------------------- correspondences

namespace {

struct PlaneScene {
  Camera cam;
  WarpField field;
  std::vector<SkinnedVertex> mesh;
  DepthImage depth;
};

// Fronto-parallel plane at z = 1 covering the central part of the image.
PlaneScene plane_scene() {
  PlaneScene s;
  std::vector<Point3> verts;
  for (int y = 40; y <= 200; y += 2) {
    for (int x = 40; x <= 280; x += 2) verts.push_back(backproject(s.cam, x, y, 1.0));
  }
  std::vector<Point3> nodes;
  for (std::size_t i = 0; i < verts.size(); i += 97) nodes.push_back(verts[i]);
  s.field = WarpField(knn_graph(nodes, 4));
  s.mesh = skin_vertices(verts, s.field.graph, 4, 0.5);
  s.depth = DepthImage(s.cam.width, s.cam.height);
  for (auto& d : s.depth.data) d = 1.0f;
  return s;
}

}  // namespace

TEST(Correspondences, ZeroFlowLandsOnRenderedPosition) {
  const PlaneScene s = plane_scene();
  const FlowField flow(s.cam.width, s.cam.height);
  CorrespondenceStats st;
  const auto corr = build_correspondences(s.field, s.mesh, flow, s.depth, s.cam, {}, &st);
  ASSERT_GT(corr.size(), s.mesh.size() * 9 / 10);
  for (const auto& c : corr) {
    EXPECT_LT((c.target - warp_point(s.field, c.vertex)).norm(), 1e-6);
    EXPECT_NEAR(c.normal.norm(), 1.0, 1e-6);
    EXPECT_NEAR(c.normal.z(), -1.0, 1e-6);
  }
}

TEST(Correspondences, UniformFlowOnPlane) {
  const PlaneScene s = plane_scene();
  FlowField flow(s.cam.width, s.cam.height);
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) flow.set(x, y, {5.0, 0.0});
  }
  const auto corr = build_correspondences(s.field, s.mesh, flow, s.depth, s.cam);
  ASSERT_FALSE(corr.empty());
  const double shift = 5.0 / s.cam.fx;
  for (const auto& c : corr) {
    const Vec3 d = c.target - warp_point(s.field, c.vertex);
    EXPECT_NEAR(d.x(), shift, 1e-6);
    EXPECT_NEAR(d.y(), 0.0, 1e-6);
    EXPECT_NEAR(d.z(), 0.0, 1e-6);
  }
}

TEST(Correspondences, FlowOutOfImageDropped) {
  const PlaneScene s = plane_scene();
  FlowField flow(s.cam.width, s.cam.height);
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) flow.set(x, y, {x > 200 ? 150.0 : 0.0, 0.0});
  }
  CorrespondenceStats st;
  const auto corr = build_correspondences(s.field, s.mesh, flow, s.depth, s.cam, {}, &st);
  EXPECT_GT(st.out_of_bounds, 0u);
  EXPECT_EQ(corr.size() + st.out_of_bounds + st.invalid_depth + st.too_far, st.visible);
  for (const auto& c : corr) EXPECT_LE(project(s.cam, warp_point(s.field, c.vertex)).x(), 200.5);
}

TEST(Correspondences, MissingDepthDropped) {
  PlaneScene s = plane_scene();
  for (int y = 0; y < s.cam.height; ++y) {
    for (int x = 0; x < 160; ++x) s.depth.at(x, y) = 0.0f;
  }
  const FlowField flow(s.cam.width, s.cam.height);
  CorrespondenceStats st;
  const auto corr = build_correspondences(s.field, s.mesh, flow, s.depth, s.cam, {}, &st);
  EXPECT_GT(st.invalid_depth, 0u);
  for (const auto& c : corr) EXPECT_GT(project(s.cam, c.target).x(), 159.0);
}

TEST(Correspondences, DimensionMismatch) {
  const PlaneScene s = plane_scene();
  const FlowField small(10, 10);
  EXPECT_EQ(code_of([&] { build_correspondences(s.field, s.mesh, small, s.depth, s.cam); }),
            ErrorCode::DimensionMismatch);
  const FlowField flow(s.cam.width, s.cam.height);
  const DepthImage d(5, 5);
  EXPECT_EQ(code_of([&] { build_correspondences(s.field, s.mesh, flow, d, s.cam); }), ErrorCode::DimensionMismatch);
}

TEST(Correspondences, OccludedVerticesSkipped) {
  // A second plane 0.3 m behind the first, fully hidden.
  PlaneScene s = plane_scene();
  std::vector<Point3> verts;
  for (int y = 60; y <= 180; y += 4) {
    for (int x = 60; x <= 260; x += 4) verts.push_back(backproject(s.cam, x, y, 1.3));
  }
  const auto hidden = skin_vertices(verts, s.field.graph, 4, 5.0);
  std::vector<SkinnedVertex> mesh = s.mesh;
  mesh.insert(mesh.end(), hidden.begin(), hidden.end());
  const FlowField flow(s.cam.width, s.cam.height);
  CorrespondenceStats st;
  build_correspondences(s.field, mesh, flow, s.depth, s.cam, {}, &st);
  EXPECT_LE(st.visible, s.mesh.size());
}

// ---------------------------------------------------------------- predictors

TEST(SplitRigid, PureTranslation) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  const std::vector<Motion3> m(g.size(), Vec3(0.1, -0.2, 0.05));
  const auto s = split_rigid(g, m, c.mask);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT(s.residual[i].norm(), 1e-12);
  EXPECT_FALSE(s.fallback);
}

TEST(SplitRigid, ZeroMotion) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  const std::vector<Motion3> m(g.size(), Vec3::Zero());
  const auto s = split_rigid(g, m, c.mask);
  EXPECT_LT((s.rigid.rotation() - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(s.rigid.translation().norm(), 1e-12);
  for (const auto& r : s.residual) EXPECT_LT(r.norm(), 1e-12);
}

TEST(SplitRigid, RotationPlusOneOffsetMatchesLeastSquares) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  const auto rot = RigidTransform::rotation_around({0.2, 0.02, 1.0}, Vec3(0.2, 0.3, 1).normalized(), std::numbers::pi / 6);
  std::vector<Motion3> m;
  for (const auto& p : g.positions) m.push_back(rot(p) - p);
  m[5] += Vec3(0.01, 0, 0);
  const auto s = split_rigid(g, m, c.mask);

  std::vector<Point3> src, dst;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!c.mask[i]) continue;
    src.push_back(g.positions[i]);
    dst.push_back(g.positions[i] + m[i]);
  }
  const auto ref = oracle::horn_fit(src, dst, std::vector<double>(src.size(), 1.0));
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!c.mask[i]) {
      EXPECT_EQ(s.residual[i], Vec3::Zero());
      continue;
    }
    const Vec3 expected = g.positions[i] + m[i] - ref(g.positions[i]);
    EXPECT_LT((s.residual[i] - expected).norm(), 1e-9);
    EXPECT_LT((s.rigid(g.positions[i]) + s.residual[i] - g.positions[i] - m[i]).norm(), 1e-12);
  }
  EXPECT_NEAR(s.residual[5].x(), 0.01, 0.002);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i != 5 && c.mask[i]) {
      EXPECT_LT(s.residual[i].norm(), 0.002);
    }
  }
}

TEST(SplitRigid, CollinearFallsBack) {
  NodeGraph g = knn_graph({{0, 0, 1}, {0.1, 0, 1}, {0.2, 0, 1}, {0.3, 0, 1}}, 2);
  const std::vector<Motion3> m(4, Vec3(0, 0.05, 0));
  const VisibilityMask mask{1, 1, 1, 0};
  const auto s = split_rigid(g, m, mask);
  EXPECT_TRUE(s.fallback);
  EXPECT_LT((s.rigid.translation() - Vec3(0, 0.05, 0)).norm(), 1e-12);
  const auto pred = predict_rigid(g, m, mask);
  EXPECT_TRUE(pred.rigid_fallback);
  EXPECT_LT((pred.nodes[3].mu - Vec3(0, 0.05, 0)).norm(), 1e-12);
}

TEST(SplitRigid, SizeChecks) {
  const Chain c = articulated_chain(0.0);
  const std::vector<Motion3> m(3, Vec3::Zero());
  EXPECT_EQ(code_of([&] { split_rigid(c.pyramid.levels[0], m, c.mask); }), ErrorCode::SizeMismatch);
}

TEST(PredictRigid, Translation) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  const std::vector<Motion3> m(g.size(), Vec3(0.1, 0, 0));
  const auto p = predict_rigid(g, visible_only(m, c.mask), c.mask);
  EXPECT_EQ(p.source, PredictionSource::Rigid);
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_LT((p.nodes[i].mu - Vec3(0.1, 0, 0)).norm(), 1e-12);
    EXPECT_EQ(p.nodes[i].sigma, c.mask[i] ? 0.0 : 0.1);
  }
}

TEST(PredictRigid, ZeroMotion) {
  const Chain c = articulated_chain(0.0);
  const std::vector<Motion3> m(c.gt.size(), Vec3::Zero());
  const auto p = predict_rigid(c.pyramid.levels[0], visible_only(m, c.mask), c.mask);
  for (const auto& n : p.nodes) EXPECT_LT(n.mu.norm(), 1e-12);
}

TEST(PredictRigid, RotationAboutCentroid) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  Point3 ctr = Point3::Zero();
  int n = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (c.mask[i]) {
      ctr += g.positions[i];
      ++n;
    }
  }
  ctr /= n;
  const auto rot = RigidTransform::rotation_around(ctr, Vec3::UnitZ(), 10.0 * std::numbers::pi / 180.0);
  std::vector<Motion3> m;
  for (const auto& p : g.positions) m.push_back(rot(p) - p);
  const auto p = predict_rigid(g, visible_only(m, c.mask), c.mask);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT((p.nodes[i].mu - m[i]).norm(), 1e-9) << i;
}

TEST(PredictArap, GlobalTranslationIsExact) {
  const Chain c = articulated_chain(0.0);
  const std::vector<Motion3> m(c.gt.size(), Vec3(0.03, -0.02, 0.01));
  SolveReport rep;
  const auto p = predict_arap(c.pyramid, visible_only(m, c.mask), c.mask, {}, &rep);
  EXPECT_EQ(p.source, PredictionSource::Arap);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LT((p.nodes[i].mu - m[i]).norm(), 1e-6);
  EXPECT_LT(rep.after.total, 1e-12);
}

TEST(PredictArap, GlobalRotationIsExact) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  const auto rot = RigidTransform::rotation_around({0.2, 0.025, 1.0}, Vec3(0.3, -0.2, 1).normalized(), 0.4);
  std::vector<Motion3> m;
  for (const auto& p : g.positions) m.push_back(rot(p) - p);
  const auto p = predict_arap(c.pyramid, visible_only(m, c.mask), c.mask);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LT((p.nodes[i].mu - m[i]).norm(), 1e-6) << i;
}

TEST(PredictArap, ArticulatedChainFollowsSegments) {
  const Chain c = articulated_chain(0.35);
  const auto p = predict_arap(c.pyramid, visible_only(c.gt, c.mask), c.mask);
  const auto r = predict_rigid(c.pyramid.levels[0], visible_only(c.gt, c.mask), c.mask);
  for (std::size_t i = 0; i < c.gt.size(); ++i) {
    if (!c.mask[i]) {
      EXPECT_LT((p.nodes[i].mu - c.gt[i]).norm(), 0.005) << i;
    }
  }
  EXPECT_LT(occluded_epe(p, c.gt, c.mask), occluded_epe(r, c.gt, c.mask));
}

TEST(PredictArap, VisibleNodesReproducedAndSigmaByHops) {
  const Chain c = articulated_chain(0.35);
  const auto p = predict_arap(c.pyramid, visible_only(c.gt, c.mask), c.mask);
  const auto hops = hop_distances(c.pyramid.levels[0], c.mask);
  for (std::size_t i = 0; i < c.gt.size(); ++i) {
    if (c.mask[i]) {
      EXPECT_LT((p.nodes[i].mu - c.gt[i]).norm(), 1e-4);
      EXPECT_EQ(p.nodes[i].sigma, 0.0);
    } else {
      EXPECT_DOUBLE_EQ(p.nodes[i].sigma, 0.001 * (1.0 + static_cast<double>(hops[i])));
    }
  }
}

TEST(PredictArap, UnreachableNodesFallBackToRigid) {
  // Two disconnected triangles; the second has no visible node.
  NodeGraph g;
  g.positions = {{0, 0, 1}, {0.1, 0, 1}, {0, 0.1, 1}, {1, 0, 1}, {1.1, 0, 1}, {1, 0.1, 1}};
  g.edges = {{1, 2}, {0, 2}, {0, 1}, {4, 5}, {3, 5}, {3, 4}};
  PyramidConfig cfg;
  cfg.intervals = {0.05, 0.1, 0.2, 0.4};
  cfg.neighbors = {2, 2, 2, 2};
  GraphPyramid pyr = build_pyramid_from_nodes(g.positions, cfg);
  pyr.levels[0] = g;
  const VisibilityMask mask{1, 1, 1, 0, 0, 0};
  std::vector<Motion3> m(6, Vec3(0.02, 0, 0));
  const auto p = predict_arap(pyr, visible_only(m, mask), mask);
  EXPECT_EQ(p.unreachable, (std::vector<std::size_t>{3, 4, 5}));
  for (std::size_t i = 3; i < 6; ++i) {
    EXPECT_LT((p.nodes[i].mu - Vec3(0.02, 0, 0)).norm(), 1e-12);
    EXPECT_EQ(p.nodes[i].sigma, 0.1);
  }
}

TEST(ArapRefine, GroundTruthOnRigidMotionUnchanged) {
  const Chain c = articulated_chain(0.0);
  const auto& g = c.pyramid.levels[0];
  const auto rot = RigidTransform::rotation_around({0.2, 0.025, 1.0}, Vec3::UnitY(), 0.2);
  std::vector<Motion3> m;
  MotionPrediction pred;
  for (const auto& p : g.positions) {
    m.push_back(rot(p) - p);
    pred.nodes.push_back({m.back(), 0.02});
  }
  const auto out = arap_refine(c.pyramid, pred, c.mask, visible_only(m, c.mask));
  EXPECT_EQ(out.source, PredictionSource::ArapRefined);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_LT((out.nodes[i].mu - m[i]).norm(), 1e-6);
    EXPECT_EQ(out.nodes[i].sigma, pred.nodes[i].sigma);
  }
}

TEST(ArapRefine, ArapOptimalPredictionIsFixedPoint) {
  const Chain c = articulated_chain(0.35);
  const auto vis = visible_only(c.gt, c.mask);
  MotionParams mp;
  mp.solver.max_iters = 50;
  mp.solver.rel_tol = 1e-12;
  const auto arap = predict_arap(c.pyramid, vis, c.mask, mp);
  const auto out = arap_refine(c.pyramid, arap, c.mask, vis);
  for (std::size_t i = 0; i < c.gt.size(); ++i) EXPECT_LT((out.nodes[i].mu - arap.nodes[i].mu).norm(), 1e-4) << i;
}

TEST(ArapRefine, NoisyPredictionImprovesAndEnergyDrops) {
  std::mt19937_64 rng(20);
  std::normal_distribution<double> n(0.0, 0.02 / std::sqrt(3.0));
  int improved = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Chain c = articulated_chain(0.1 + 0.05 * trial);
    MotionPrediction pred;
    for (std::size_t i = 0; i < c.gt.size(); ++i) {
      const Vec3 noise = c.mask[i] ? Vec3::Zero() : Vec3(n(rng), n(rng), n(rng));
      pred.nodes.push_back({c.gt[i] + noise, c.mask[i] ? 0.0 : 0.02});
    }
    SolveReport rep;
    const auto out = arap_refine(c.pyramid, pred, c.mask, visible_only(c.gt, c.mask), {}, &rep);
    EXPECT_LE(rep.after.total, rep.before.total);
    for (std::size_t i = 1; i < rep.iterations.size(); ++i) EXPECT_LE(rep.iterations[i].energy, rep.iterations[i - 1].energy);
    if (occluded_epe(out, c.gt, c.mask) <= occluded_epe(pred, c.gt, c.mask)) ++improved;
    for (std::size_t i = 0; i < c.gt.size(); ++i) {
      if (c.mask[i]) {
        EXPECT_LT((out.nodes[i].mu - c.gt[i]).norm(), 1e-4);
      }
    }
  }
  EXPECT_GE(improved, 9);
}

TEST(ArapRefine, RowCountChecked) {
  const Chain c = articulated_chain(0.0);
  MotionPrediction pred;
  pred.nodes.assign(3, {Vec3::Zero(), 0.0});
  EXPECT_EQ(code_of([&] { arap_refine(c.pyramid, pred, c.mask, c.gt); }), ErrorCode::CountMismatch);
}

TEST(Predictors, PluggableInterface) {
  const Chain c = articulated_chain(0.2);
  const auto vis = visible_only(c.gt, c.mask);
  const PredictionInput in{c.pyramid, vis, c.mask};
  const RefinedPredictor refined(std::make_unique<RigidPredictor>());
  const auto a = refined.predict(in);
  const auto b = arap_refine(c.pyramid, predict_rigid(c.pyramid.levels[0], vis, c.mask), c.mask, vis);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.nodes[i].mu, b.nodes[i].mu);
  EXPECT_EQ(ArapPredictor().predict(in).source, PredictionSource::Arap);
}

// ------------------------------------------------------ external predictions

TEST(ExternalPredictions, ZerosTruncateSigma) {
  const fs::path p = scratch("zeros.csv");
  write_text(p, "node_id,mu_x,mu_y,mu_z,sigma\n0,0,0,0,0\n1,0,0,0,0\n2,0,0,0,0\n");
  const auto pred = load_external_predictions(p, 3);
  ASSERT_EQ(pred.size(), 3u);
  for (const auto& g : pred.nodes) {
    EXPECT_EQ(g.mu, Vec3::Zero());
    EXPECT_EQ(g.sigma, 0.001);
  }
  EXPECT_EQ(pred.source, PredictionSource::External);
}

TEST(ExternalPredictions, RoundTripCsvAndJson) {
  std::mt19937_64 rng(21);
  MotionPrediction p;
  std::uniform_real_distribution<double> s(0.002, 0.2);
  for (std::size_t i = 0; i < 7; ++i) {
    p.nodes.push_back({oracle::random_point(rng, -0.1, 0.1), s(rng)});
    p.node_ids.push_back(10 + i);
  }
  const fs::path csv = scratch("rt.csv");
  write_text(csv, prediction_to_csv(p));
  const fs::path js = scratch("rt.json");
  write_text(js, prediction_to_json(p).dump());
  for (const auto& path : {csv, js}) {
    const auto q = load_external_predictions(path, 7);
    EXPECT_EQ(q.node_ids, p.node_ids);
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_LT((q.nodes[i].mu - p.nodes[i].mu).cwiseAbs().maxCoeff(), 1e-9 * 0.1);
      // Nine significant digits on values below 1.
      EXPECT_NEAR(q.nodes[i].sigma, p.nodes[i].sigma, 5e-10);
    }
  }
}

TEST(ExternalPredictions, MalformedRowNamesLine) {
  const fs::path p = scratch("bad.csv");
  write_text(p, "node_id,mu_x,mu_y,mu_z,sigma\n0,0,0,0,0.1\n1,0,zero,0,0.1\n");
  const std::string msg = message_of([&] { load_external_predictions(p, 2); });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("bad.csv"), std::string::npos) << msg;
  EXPECT_EQ(code_of([&] { load_external_predictions(p, 2); }), ErrorCode::ParseError);
  write_text(p, "node_id,mu_x,mu_y,mu_z,sigma\n0,0,0,0\n");
  EXPECT_NE(message_of([&] { load_external_predictions(p, 1); }).find("line 2"), std::string::npos);
}

TEST(ExternalPredictions, CountMismatch) {
  const fs::path p = scratch("count.csv");
  write_text(p, "node_id,mu_x,mu_y,mu_z,sigma\n0,0,0,0,0.1\n");
  EXPECT_EQ(code_of([&] { load_external_predictions(p, 2); }), ErrorCode::CountMismatch);
}

TEST(ExternalPredictions, NegativeSigmaRejected) {
  const fs::path p = scratch("neg.csv");
  write_text(p, "node_id,mu_x,mu_y,mu_z,sigma\n0,0,0,0,-0.1\n");
  EXPECT_EQ(code_of([&] { load_external_predictions(p, 1); }), ErrorCode::NegativeSigma);
}

TEST(ExternalPredictions, MissingFile) {
  EXPECT_EQ(code_of([&] { load_external_predictions(scratch("absent.csv"), 1); }), ErrorCode::IoError);
}

#pragma once

// Levenberg-Marquardt damped Gauss-Newton over per-node rigid transforms.
//
// Every energy the library minimizes over a deformation graph is a weighted
// sum of four residual families:
//   point-to-plane   n^T (v' - u)                     (dense depth alignment)
//   projection       proj(v') - proj(u)               (2D flow consistency)
//   node target      T_i p_i - target_i               (predicted / observed motion)
//   regularizer      T_j(p_i) - T_i(p_i), i in N_j    (as-rigid-as-possible)
// Each node has six parameters, an axis-angle increment applied on the left
// of its rotation plus a translation increment. The normal equations are
// assembled block-sparse and factored with a simplicial LDL^T.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/warpfield.hpp"

namespace ofusion {

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// A canonical vertex paired with a target surface point and its normal.
struct Correspondence {
  SkinnedVertex vertex;
  Point3 target = Point3::Zero();
  Vec3 normal = Vec3::UnitZ();
};

/// Pulls node i's position T_i p_i toward `target` with `weight`.
struct NodeTarget {
  std::size_t node = 0;
  Point3 target = Point3::Zero();
  double weight = 1.0;
};

enum class RegForm {
  /// |T_j(p_i) - T_i(p_i)|^2: zero for any globally rigid field.
  Standard,
  /// |T_j(p_i) - T_i(p_j)|^2, the mixed form; nonzero even for the identity
  /// field. Kept for comparison only.
  Printed,
};

struct DeformProblem {
  std::span<const Correspondence> correspondences;
  std::optional<Camera> camera;
  std::vector<NodeTarget> targets;
  double lambda_depth = 0.0;
  double lambda_2d = 0.0;
  double lambda_targets = 0.0;
  double lambda_reg = 0.0;
  RegForm reg_form = RegForm::Standard;
};

struct SolverParams {
  int max_iters = 10;
  double damping = 1e-4;
  double rel_tol = 1e-6;

  bool is_valid() const { return max_iters >= 1 && damping >= 0.0 && rel_tol >= 0.0; }
};

/// Unweighted value of each term plus the weighted total.
struct TermEnergies {
  double depth = 0.0;
  double projection = 0.0;
  double targets = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t skipped_projection = 0;
};

struct IterationRecord {
  int iteration = 0;
  double energy = 0.0;
  double damping = 0.0;
  bool accepted = false;
};

struct SolveReport {
  TermEnergies before;
  TermEnergies after;
  std::vector<IterationRecord> iterations;
  int accepted_steps = 0;
  bool converged = false;
};

// ---------------------------------------------------------------------------
// Energies

inline double depth_energy(const WarpField& f, std::span<const Correspondence> corr) {
  double e = 0.0;
  for (const auto& c : corr) {
    const double r = c.normal.dot(warp_point(f, c.vertex) - c.target);
    e += r * r;
  }
  return e;
}

/// Sum of squared pixel distances; pairs with either point at z <= 0 are
/// skipped and counted in `skipped`.
inline double projection_energy(const WarpField& f, std::span<const Correspondence> corr, const Camera& cam,
                                std::size_t* skipped = nullptr) {
  double e = 0.0;
  std::size_t skip = 0;
  for (const auto& c : corr) {
    const Point3 w = warp_point(f, c.vertex);
    if (!(w.z() > 0.0) || !(c.target.z() > 0.0)) {
      ++skip;
      continue;
    }
    e += (project(cam, w) - project(cam, c.target)).squaredNorm();
  }
  if (skipped != nullptr) *skipped = skip;
  return e;
}

inline double target_energy(const WarpField& f, std::span<const NodeTarget> targets) {
  double e = 0.0;
  for (const auto& t : targets) e += t.weight * (f.node_position(t.node) - t.target).squaredNorm();
  return e;
}

inline Vec3 reg_residual(const WarpField& f, std::size_t j, std::size_t i, RegForm form) {
  const Vec3 d = f.graph.positions[i] - f.graph.positions[j];
  const auto& tj = f.transforms[j];
  const auto& ti = f.transforms[i];
  // Differences taken before adding node positions back, so identical
  // transforms give exactly zero.
  if (form == RegForm::Standard) return (tj.rotation() * d - d) + (tj.translation() - ti.translation());
  return (tj.rotation() * d + ti.rotation() * d) + (tj.translation() - ti.translation()) - d;
}

inline double reg_energy(const WarpField& f, RegForm form = RegForm::Standard) {
  double e = 0.0;
  for (std::size_t j = 0; j < f.size(); ++j) {
    for (std::size_t i : f.graph.edges[j]) e += reg_residual(f, j, i, form).squaredNorm();
  }
  return e;
}

inline TermEnergies evaluate_terms(const DeformProblem& p, const WarpField& f) {
  TermEnergies t;
  if (p.lambda_depth != 0.0) t.depth = depth_energy(f, p.correspondences);
  if (p.lambda_2d != 0.0 && p.camera) t.projection = projection_energy(f, p.correspondences, *p.camera, &t.skipped_projection);
  if (p.lambda_targets != 0.0) t.targets = target_energy(f, p.targets);
  if (p.lambda_reg != 0.0) t.reg = reg_energy(f, p.reg_form);
  t.total = p.lambda_depth * t.depth + p.lambda_2d * t.projection + p.lambda_targets * t.targets +
            p.lambda_reg * t.reg;
  return t;
}

// ---------------------------------------------------------------------------
// Linearization

namespace detail {

/// Accumulates J^T J blocks (upper triangle, by node) and J^T r.
class NormalEquations {
 public:
  explicit NormalEquations(std::size_t nodes) : nodes_(nodes), g_(Eigen::VectorXd::Zero(6 * nodes)) {}

  template <int M>
  void add(const Eigen::Matrix<double, M, 1>& r,
           std::span<const std::pair<std::size_t, Eigen::Matrix<double, M, 6>>> blocks, double weight) {
    for (const auto& [a, ja] : blocks) {
      g_.segment<6>(6 * static_cast<Eigen::Index>(a)) += weight * ja.transpose() * r;
      for (const auto& [b, jb] : blocks) {
        if (b < a) continue;
        Mat6& h = block(a, b);
        h.noalias() += weight * ja.transpose() * jb;
      }
    }
  }

  const Eigen::VectorXd& gradient_half() const { return g_; }

  Eigen::SparseMatrix<double> hessian_upper(double damping) const {
    std::vector<std::uint64_t> keys;
    keys.reserve(blocks_.size());
    for (const auto& kv : blocks_) keys.push_back(kv.first);
    std::sort(keys.begin(), keys.end());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(keys.size() * 36 + 6 * nodes_);
    for (std::uint64_t key : keys) {
      const auto a = static_cast<Eigen::Index>(key >> 32);
      const auto b = static_cast<Eigen::Index>(key & 0xffffffffu);
      const Mat6& h = blocks_.at(key);
      for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 6; ++c) {
          if (a == b && c < r) continue;
          trip.emplace_back(6 * a + r, 6 * b + c, h(r, c));
        }
      }
    }
    for (Eigen::Index d = 0; d < static_cast<Eigen::Index>(6 * nodes_); ++d) trip.emplace_back(d, d, damping);
    Eigen::SparseMatrix<double> h(static_cast<Eigen::Index>(6 * nodes_), static_cast<Eigen::Index>(6 * nodes_));
    h.setFromTriplets(trip.begin(), trip.end());
    return h;
  }

  /// delta^T H delta using the stored blocks.
  double quadratic(const Eigen::VectorXd& delta) const {
    double q = 0.0;
    for (const auto& [key, h] : blocks_) {
      const auto a = static_cast<Eigen::Index>(key >> 32);
      const auto b = static_cast<Eigen::Index>(key & 0xffffffffu);
      const double v = delta.segment<6>(6 * a).dot(h * delta.segment<6>(6 * b));
      q += a == b ? v : 2.0 * v;
    }
    return q;
  }

 private:
  Mat6& block(std::size_t a, std::size_t b) {
    const std::uint64_t key = (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
    auto it = blocks_.find(key);
    if (it == blocks_.end()) it = blocks_.emplace(key, Mat6::Zero()).first;
    return it->second;
  }

  std::size_t nodes_;
  Eigen::VectorXd g_;
  std::unordered_map<std::uint64_t, Mat6> blocks_;
};

using Block3 = std::pair<std::size_t, Eigen::Matrix<double, 3, 6>>;

/// d v' / d(node params) for every anchor of a skinned vertex.
inline std::vector<Block3> warp_jacobian(const WarpField& f, const SkinnedVertex& sv) {
  std::vector<Block3> out;
  out.reserve(sv.anchors.size());
  for (const Anchor& a : sv.anchors) {
    const Vec3 arm = f.transforms[a.node].rotation() * (sv.position - f.graph.positions[a.node]);
    Eigen::Matrix<double, 3, 6> j;
    j.leftCols<3>() = -a.weight * skew(arm);
    j.rightCols<3>() = a.weight * Mat3::Identity();
    out.emplace_back(a.node, j);
  }
  return out;
}

inline NormalEquations linearize(const DeformProblem& p, const WarpField& f) {
  NormalEquations ne(f.size());
  if (p.lambda_depth != 0.0 || (p.lambda_2d != 0.0 && p.camera)) {
    for (const auto& c : p.correspondences) {
      const Point3 w = warp_point(f, c.vertex);
      const auto jv = warp_jacobian(f, c.vertex);
      if (p.lambda_depth != 0.0) {
        Eigen::Matrix<double, 1, 1> r;
        r(0) = c.normal.dot(w - c.target);
        std::vector<std::pair<std::size_t, Eigen::Matrix<double, 1, 6>>> blocks;
        blocks.reserve(jv.size());
        for (const auto& [n, j] : jv) blocks.emplace_back(n, c.normal.transpose() * j);
        ne.add<1>(r, blocks, p.lambda_depth);
      }
      if (p.lambda_2d != 0.0 && p.camera && w.z() > 0.0 && c.target.z() > 0.0) {
        const Eigen::Vector2d r = project(*p.camera, w) - project(*p.camera, c.target);
        const auto pj = project_jacobian(*p.camera, w);
        std::vector<std::pair<std::size_t, Eigen::Matrix<double, 2, 6>>> blocks;
        blocks.reserve(jv.size());
        for (const auto& [n, j] : jv) blocks.emplace_back(n, pj * j);
        ne.add<2>(r, blocks, p.lambda_2d);
      }
    }
  }
  if (p.lambda_targets != 0.0) {
    for (const auto& t : p.targets) {
      const Vec3 r = f.node_position(t.node) - t.target;
      Eigen::Matrix<double, 3, 6> j = Eigen::Matrix<double, 3, 6>::Zero();
      j.rightCols<3>() = Mat3::Identity();
      const Block3 b{t.node, j};
      ne.add<3>(r, std::span<const Block3>(&b, 1), p.lambda_targets * t.weight);
    }
  }
  if (p.lambda_reg != 0.0) {
    for (std::size_t jn = 0; jn < f.size(); ++jn) {
      for (std::size_t in : f.graph.edges[jn]) {
        const Vec3 r = reg_residual(f, jn, in, p.reg_form);
        const Point3& pi = f.graph.positions[in];
        const Point3& pj = f.graph.positions[jn];
        Eigen::Matrix<double, 3, 6> jj;
        jj.leftCols<3>() = -skew(f.transforms[jn].rotation() * (pi - pj));
        jj.rightCols<3>() = Mat3::Identity();
        Eigen::Matrix<double, 3, 6> ji = Eigen::Matrix<double, 3, 6>::Zero();
        ji.rightCols<3>() = -Mat3::Identity();
        if (p.reg_form == RegForm::Printed) ji.leftCols<3>() = skew(f.transforms[in].rotation() * (pj - pi));
        const std::array<Block3, 2> blocks{Block3{jn, jj}, Block3{in, ji}};
        ne.add<3>(r, blocks, p.lambda_reg);
      }
    }
  }
  return ne;
}

}  // namespace detail

/// Applies a stacked 6N increment: R_i <- exp(dtheta_i) R_i, t_i <- t_i + dt_i.
inline WarpField retract(const WarpField& f, const Eigen::VectorXd& delta) {
  WarpField out = f;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto s = delta.segment<6>(6 * static_cast<Eigen::Index>(i));
    const Mat3 r = orthonormalize(so3_exp(s.head<3>()) * f.transforms[i].rotation());
    out.transforms[i] = RigidTransform(r, f.transforms[i].translation() + s.tail<3>());
  }
  return out;
}

/// Gradient of the weighted total energy with respect to the stacked node
/// increments at zero.
inline Eigen::VectorXd energy_gradient(const DeformProblem& p, const WarpField& f) {
  return 2.0 * detail::linearize(p, f).gradient_half();
}

/// Minimizes the problem's energy starting from `init`. Accepted steps never
/// increase the energy.
inline WarpField solve_deformation(const DeformProblem& p, const WarpField& init, const SolverParams& params,
                                   SolveReport* report = nullptr) {
  require(params.is_valid(), ErrorCode::InvalidArgument, "solver parameters out of range");
  if (p.lambda_2d != 0.0) {
    require(p.camera.has_value(), ErrorCode::InvalidArgument, "projection term needs a camera");
  }
  SolveReport rep;
  WarpField cur = init;
  rep.before = evaluate_terms(p, cur);
  if (!std::isfinite(rep.before.total)) fail(ErrorCode::NumericalFailure, "initial energy is not finite");
  double energy = rep.before.total;
  double damping = params.damping;
  rep.iterations.push_back({0, energy, damping, true});
  bool stalled = false;

  for (int it = 1; it <= params.max_iters; ++it) {
    if (energy == 0.0) {
      rep.converged = true;
      break;
    }
    const auto ne = detail::linearize(p, cur);
    const Eigen::VectorXd& g = ne.gradient_half();
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Upper> ldlt;
    ldlt.compute(ne.hessian_upper(std::max(damping, 1e-12)));
    if (ldlt.info() != Eigen::Success) {
      damping = std::max(damping, 1e-12) * 10.0;
      rep.iterations.push_back({it, energy, damping, false});
      continue;
    }
    const Eigen::VectorXd delta = ldlt.solve(-g);
    // Decrease predicted by the undamped quadratic model, in energy units.
    const double predicted = -(2.0 * g.dot(delta) + ne.quadratic(delta));
    if (!(predicted > 1e-3 * params.rel_tol * energy)) {
      rep.converged = true;
      break;
    }
    WarpField trial = retract(cur, delta);
    const double e_trial = evaluate_terms(p, trial).total;
    if (std::isfinite(e_trial) && e_trial < energy) {
      const double rel = (energy - e_trial) / energy;
      cur = std::move(trial);
      energy = e_trial;
      damping = std::max(damping / 10.0, 1e-12);
      ++rep.accepted_steps;
      rep.iterations.push_back({it, energy, damping, true});
      if (rel < params.rel_tol) {
        rep.converged = true;
        break;
      }
    } else {
      damping = std::max(damping, 1e-12) * 10.0;
      rep.iterations.push_back({it, energy, damping, false});
      stalled = true;
    }
  }
  if (rep.accepted_steps == 0 && !rep.converged && stalled) {
    fail(ErrorCode::SolverDiverged, "no step decreased the energy within max_iters");
  }
  rep.after = evaluate_terms(p, cur);
  if (report != nullptr) *report = std::move(rep);
  return cur;
}

}  // namespace ofusion

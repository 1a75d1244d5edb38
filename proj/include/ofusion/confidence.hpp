#pragma once

// Gaussian motion likelihoods with analytic gradients, and the
// confidence weight that turns a predicted (mu, sigma) into a data-term weight.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"

namespace ofusion {

/// Isotropic Gaussian N(mu, sigma^2 I) over a node's motion.
struct GaussianMotion {
  Motion3 mu = Motion3::Zero();
  double sigma = 0.0;
};

struct LossValue {
  double value = 0.0;
  std::vector<Motion3> grad_mu;
  std::vector<double> grad_sigma;
};

struct WeightParams {
  double k = 4.0;
  double epsilon = 0.01;

  bool is_valid() const { return k > 0.0 && epsilon > 0.0; }
};

inline double truncate_sigma(double sigma, double sigma_min = 0.1) { return std::max(sigma, sigma_min); }

/// L = (1/N) sum_i (log sigma_i + |y_i - mu_i|^2 / sigma_i^2).
/// This is the negative log-likelihood with its additive and multiplicative
/// constants dropped, which leaves the minimizer unchanged.
inline LossValue nll_loss(std::span<const GaussianMotion> pred, std::span<const Motion3> gt) {
  require(pred.size() == gt.size(), ErrorCode::CountMismatch, "nll_loss: prediction/gt count mismatch");
  require(!pred.empty(), ErrorCode::CountMismatch, "nll_loss: empty input");
  const double n = static_cast<double>(pred.size());
  LossValue out;
  out.grad_mu.resize(pred.size());
  out.grad_sigma.resize(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double s = pred[i].sigma;
    if (!(s > 0.0)) fail(ErrorCode::NonpositiveSigma, "nll_loss: sigma must be positive");
    const Vec3 diff = pred[i].mu - gt[i];
    const double r2 = diff.squaredNorm();
    sum += std::log(s) + r2 / (s * s);
    out.grad_mu[i] = (2.0 / n) * diff / (s * s);
    out.grad_sigma[i] = (1.0 / n) * (1.0 / s - 2.0 * r2 / (s * s * s));
  }
  out.value = sum / n;
  return out;
}

inline constexpr double kTemporalLossWeight = 0.1;

struct TotalLoss {
  double value = 0.0;
  /// Gradients with respect to the final outputs (mu, sigma).
  LossValue out;
  /// Gradients with respect to the temporal encoder outputs (mu', sigma'),
  /// already scaled by the 0.1 mixing weight.
  LossValue temporal;
};

/// L_total = L_out + 0.1 L_temp, where L_temp scores the temporal encoder's
/// own (mu', sigma') outputs against the same ground truth.
inline TotalLoss total_loss(std::span<const GaussianMotion> out_pred, std::span<const GaussianMotion> temporal_pred,
                            std::span<const Motion3> gt) {
  TotalLoss t;
  t.out = nll_loss(out_pred, gt);
  t.temporal = nll_loss(temporal_pred, gt);
  t.value = t.out.value + kTemporalLossWeight * t.temporal.value;
  t.temporal.value *= kTemporalLossWeight;
  for (auto& g : t.temporal.grad_mu) g *= kTemporalLossWeight;
  for (auto& g : t.temporal.grad_sigma) g *= kTemporalLossWeight;
  return t;
}

/// w = exp(-k sigma^2 / (|mu| + eps)^2), in (0, 1].
inline double motion_weight(const GaussianMotion& g, const WeightParams& params) {
  require(params.is_valid(), ErrorCode::InvalidArgument, "motion_weight: k and epsilon must be positive");
  const double denom = g.mu.norm() + params.epsilon;
  return std::exp(-params.k * g.sigma * g.sigma / (denom * denom));
}

inline std::vector<double> motion_weights(std::span<const GaussianMotion> g, const WeightParams& params) {
  std::vector<double> w;
  w.reserve(g.size());
  for (const auto& m : g) w.push_back(motion_weight(m, params));
  return w;
}

}  // namespace ofusion

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <utility>

#include "sdfatlas/errors.hpp"
#include "sdfatlas/geometry.hpp"
#include "sdfatlas/neural_field.hpp"

namespace sdfatlas {

// Negative-log-likelihood weights and scale parameters of the mapping
// objective: lambda_* multiply the per-term losses, sigma_* are the model
// standard deviations, sdf_bandwidth the Laplace scale, beta the far-field
// sharpness, tau the truncation band, smooth_delta the perturbation radius of
// the smoothness prior.
struct LossWeights {
  double lambda_range = 1.0;
  double lambda_sdf = 10.0;
  double lambda_semantic = 1.0;  // 0 when no semantics
  double lambda_eikonal = 0.1;
  double lambda_smooth = 0.1;  // 0 disables the smoothness prior
  double sigma_range = 0.1;    // meters
  double sdf_bandwidth = 0.05; // meters
  double beta = 10.0;          // per meter
  double tau = 0.3;            // meters
  double sigma_eikonal = 1.0;
  double sigma_smooth = 1.0;
  double smooth_delta = 0.088;  // meters

  void validate() const {
    if (lambda_range < 0 || lambda_sdf < 0 || lambda_semantic < 0 || lambda_eikonal < 0 ||
        lambda_smooth < 0)
      throw ConfigError("loss weights must be >= 0");
    if (!(sigma_range > 0) || !(sdf_bandwidth > 0) || !(beta > 0) || !(tau > 0) ||
        !(sigma_eikonal > 0) || !(sigma_smooth > 0) || !(smooth_delta > 0))
      throw ConfigError("loss scales must be > 0");
  }
};

inline double range_loss(double measured, double rendered, double sigma) {
  const double e = measured - rendered;
  return e * e / (2.0 * sigma * sigma);
}

// d loss / d rendered.
inline double range_loss_grad(double measured, double rendered, double sigma) {
  return (rendered - measured) / (sigma * sigma);
}

// b = measured_range - sample_depth. Near-surface (|b| <= tau): truncated
// Laplace |b - s| / bandwidth; otherwise max(0, exp(-beta s) - 1, s - b).
inline double sdf_loss(double b, double s, double tau, double bandwidth, double beta) {
  if (std::abs(b) <= tau) return std::abs(b - s) / bandwidth;
  return std::max({0.0, std::exp(-beta * s) - 1.0, s - b});
}

// Subgradient d loss / d s (0 at ties / kinks).
inline double sdf_loss_grad(double b, double s, double tau, double bandwidth, double beta) {
  if (std::abs(b) <= tau) {
    const double d = b - s;
    if (d > 0) return -1.0 / bandwidth;
    if (d < 0) return 1.0 / bandwidth;
    return 0.0;
  }
  const double t1 = std::exp(-beta * s) - 1.0;
  const double t2 = s - b;
  if (t1 <= 0.0 && t2 <= 0.0) return 0.0;
  if (t1 > t2) return -beta * std::exp(-beta * s);
  return 1.0;
}

// Cross-entropy of softmax(scores) against the one-hot target class.
inline double semantic_loss(const VecX& scores, uint32_t target) {
  if (static_cast<Eigen::Index>(target) >= scores.size())
    throw DataError("semantic_loss: class id out of range");
  const double mx = scores.maxCoeff();
  const double lse = std::log((scores.array() - mx).exp().sum()) + mx;
  return lse - scores(target);
}

// d loss / d scores = softmax(scores) - onehot(target).
inline VecX semantic_loss_grad(const VecX& scores, uint32_t target) {
  const double mx = scores.maxCoeff();
  VecX p = (scores.array() - mx).exp();
  p /= p.sum();
  p(target) -= 1.0;
  return p;
}

inline double eikonal_loss(const Vec3& grad, double sigma) {
  const double e = 1.0 - grad.norm();
  return e * e / (2.0 * sigma * sigma);
}

inline Vec3 eikonal_loss_grad(const Vec3& grad, double sigma) {
  const double nrm = grad.norm();
  if (nrm < 1e-12) return Vec3::Zero();
  return ((nrm - 1.0) / (sigma * sigma)) * (grad / nrm);
}

inline double smoothness_loss(const Vec3& grad_a, const Vec3& grad_b, double sigma) {
  return (grad_a - grad_b).squaredNorm() / (2.0 * sigma * sigma);
}

// Returns (d/d grad_a, d/d grad_b).
inline std::pair<Vec3, Vec3> smoothness_loss_grad(const Vec3& grad_a, const Vec3& grad_b,
                                                  double sigma) {
  const Vec3 g = (grad_a - grad_b) / (sigma * sigma);
  return {g, -g};
}

}  // namespace sdfatlas

#pragma once

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/types.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace shrinkalloc {

/// ‖τ̂‖² or τ̂ᵀΣ⁻¹τ̂ too small to divide by.
class ZeroContrastError : public Error {
 public:
  ZeroContrastError() : Error("shrinkage undefined: contrast vector is zero") {}
};

inline constexpr double kZeroNormSquared = 1e-300;

/// Difference-in-means contrasts with their covariance.
struct ContrastEstimate {
  Vector tau_hat;
  CovarianceSummary sigma;

  ContrastEstimate(Vector t, CovarianceSummary s) : tau_hat(std::move(t)), sigma(std::move(s)) {
    if (tau_hat.size() != sigma.dim()) {
      throw InvalidArgument("contrast vector has length " + std::to_string(tau_hat.size()) +
                            " but covariance is " + std::to_string(sigma.dim()) + "-dimensional");
    }
  }
};

struct ShrinkOptions {
  /// Clamp shrinkage multipliers at zero. Off by default.
  bool positive_part = false;
};

/// mean_k − mean_0 for k = 1..K.
inline Vector diff_in_means(const Vector& arm_means) {
  if (arm_means.size() < 2) throw InvalidArgument("need a control arm and at least one active arm");
  if (!arm_means.allFinite()) throw InvalidArgument("arm means must be finite");
  return arm_means.tail(arm_means.size() - 1).array() - arm_means(0);
}

namespace detail {

inline void require_shrinkable(const Vector& tau_hat) {
  if (tau_hat.size() < 3) {
    throw InvalidArgument("shrinkage estimators need K >= 3 (got K = " + std::to_string(tau_hat.size()) + ")");
  }
  if (!(tau_hat.squaredNorm() >= kZeroNormSquared)) throw ZeroContrastError();
}

inline double clamp_factor(double f, const ShrinkOptions& opts) {
  return opts.positive_part ? std::max(0.0, f) : f;
}

}  // namespace detail

/// Shrinkage multiplier(s) applied to τ̂ by each estimator. Scalar kinds return
/// a constant vector.
inline Vector shrink_factors(EstimatorKind kind, const Vector& tau_hat, const CovarianceSummary& sigma,
                             const ShrinkOptions& opts = {}) {
  const Eigen::Index k = tau_hat.size();
  if (kind == EstimatorKind::DiffInMeans) return Vector::Ones(k);
  detail::require_shrinkable(tau_hat);
  switch (kind) {
    case EstimatorKind::Bock: {
      const double q = sigma.inverse_quadratic(tau_hat);
      if (!(q >= kZeroNormSquared)) throw ZeroContrastError();
      return Vector::Constant(k, detail::clamp_factor(1.0 - (sigma.effective_dim() - 2.0) / q, opts));
    }
    case EstimatorKind::SureMin: {
      const double f = 1.0 - sigma.trace() / tau_hat.squaredNorm();
      return Vector::Constant(k, detail::clamp_factor(f, opts));
    }
    case EstimatorKind::Dimmery: {
      const double scale = static_cast<double>(k - 2) / tau_hat.squaredNorm();
      Vector f = 1.0 - scale * sigma.sigma_sq().array();
      if (opts.positive_part) f = f.cwiseMax(0.0);
      return f;
    }
    case EstimatorKind::DiffInMeans: break;
  }
  return Vector::Ones(k);
}

inline Vector estimate(EstimatorKind kind, const Vector& tau_hat, const CovarianceSummary& sigma,
                       const ShrinkOptions& opts = {}) {
  return shrink_factors(kind, tau_hat, sigma, opts).cwiseProduct(tau_hat);
}

inline Vector estimate(EstimatorKind kind, const ContrastEstimate& e, const ShrinkOptions& opts = {}) {
  return estimate(kind, e.tau_hat, e.sigma, opts);
}

/// (1 − (p̃ − 2) / τ̂ᵀΣ⁻¹τ̂) τ̂ with p̃ = tr Σ / λ_max.
inline Vector bock(const ContrastEstimate& e, const ShrinkOptions& opts = {}) {
  return estimate(EstimatorKind::Bock, e, opts);
}

/// (1 − tr Σ / ‖τ̂‖²) τ̂.
inline Vector sure_min(const ContrastEstimate& e, const ShrinkOptions& opts = {}) {
  return estimate(EstimatorKind::SureMin, e, opts);
}

/// Entry k: (1 − (K − 2) σ_k² / ‖τ̂‖²) τ̂_k.
inline Vector dimmery(const ContrastEstimate& e, const ShrinkOptions& opts = {}) {
  return estimate(EstimatorKind::Dimmery, e, opts);
}

/// Pointwise Stein unbiased risk estimate of the raw (not positive-part)
/// estimator at τ̂.
inline double sure_value(EstimatorKind kind, const Vector& tau_hat, const CovarianceSummary& sigma) {
  const double tr = sigma.trace();
  if (kind == EstimatorKind::DiffInMeans) return tr;
  detail::require_shrinkable(tau_hat);
  const double k = static_cast<double>(tau_hat.size());
  const double norm2 = tau_hat.squaredNorm();
  switch (kind) {
    case EstimatorKind::Bock: {
      const double p = sigma.effective_dim();
      const double q = sigma.inverse_quadratic(tau_hat);
      if (!(q >= kZeroNormSquared)) throw ZeroContrastError();
      return tr + (p * p - 4.0) * norm2 / (q * q) - 2.0 * (p - 2.0) * tr / q;
    }
    case EstimatorKind::SureMin: {
      const double quad = tau_hat.dot(sigma.dense() * tau_hat);
      return tr - tr * tr / norm2 + 4.0 * tr * quad / (norm2 * norm2);
    }
    case EstimatorKind::Dimmery: {
      const Vector& s2 = sigma.sigma_sq();
      const Vector star_tau = s2.cwiseProduct(tau_hat);  // Σ⋆ τ̂
      const double star_sq = star_tau.squaredNorm();     // τ̂ᵀ Σ⋆² τ̂
      const double cross = star_tau.dot(sigma.dense() * tau_hat);  // τ̂ᵀ Σ Σ⋆ τ̂
      const double norm4 = norm2 * norm2;
      return tr + (k - 2.0) * (k - 2.0) * star_sq / norm4 + 4.0 * (k - 2.0) * cross / norm4 -
             2.0 * (k - 2.0) * s2.squaredNorm() / norm2;
    }
    case EstimatorKind::DiffInMeans: break;
  }
  return tr;
}

inline double sure_value(EstimatorKind kind, const ContrastEstimate& e) {
  return sure_value(kind, e.tau_hat, e.sigma);
}

}  // namespace shrinkalloc

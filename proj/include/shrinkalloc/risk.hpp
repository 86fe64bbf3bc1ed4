#pragma once

// Exact risk E‖δ̂ − τ‖² of each estimator under τ̂ ~ N(τ, Σ).
//
// Every shrinker risk is tr Σ plus a combination of
//   E[X^T A X / (X^T B X)^2]  and  E[1 / X^T B X],   X = Σ^{-1/2} τ̂ ~ N(Σ^{-1/2} τ, I),
// evaluated by the quadform kernel:
//   Bock:     B = I, A = Σ
//   SURE-min: B = Σ, A = Σ²
//   Dimmery:  B = Σ, A = Σ^{1/2} ((K-2)² Σ⋆² + 4(K-2) sym(Σ Σ⋆)) Σ^{1/2}
// In the eigenbasis Σ = P Λ P^T these numerators are cheap to rotate, and the
// mean becomes Λ^{-1/2} P^T τ.

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/estimators.hpp"
#include "shrinkalloc/quadform.hpp"
#include "shrinkalloc/random.hpp"
#include "shrinkalloc/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace shrinkalloc {

struct RiskQuery {
  EstimatorKind kind = EstimatorKind::DiffInMeans;
  ArmCounts n;
  ArmVariances v;
  EffectVector tau;
};

/// A closed-form approximation whose denominator is not positive.
class ApproximationInvalid : public NumericalError {
 public:
  explicit ApproximationInvalid(const std::string& what)
      : NumericalError("approximation invalid: " + what) {}
};

namespace detail {

inline void check_risk_inputs(EstimatorKind kind, const CovarianceSummary& sigma, const Vector& tau) {
  if (tau.size() != sigma.dim()) {
    throw InvalidArgument("effect vector has length " + std::to_string(tau.size()) + " but K = " +
                          std::to_string(sigma.dim()));
  }
  if (!tau.allFinite()) throw InvalidArgument("effects must be finite");
  if (is_shrinker(kind) && sigma.dim() < 3) {
    throw InvalidArgument("shrinker risk needs K >= 3 (got K = " + std::to_string(sigma.dim()) + ")");
  }
}

struct Whitened {
  Vector eigenvalues;
  Matrix basis;
  Vector mean;  // Λ^{-1/2} P^T τ
};

inline Whitened whiten(const CovarianceSummary& sigma, const Vector& tau) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sigma.dense());
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition of Σ failed");
  Whitened w;
  w.eigenvalues = solver.eigenvalues();
  w.basis = solver.eigenvectors();
  w.mean = (w.basis.transpose() * tau).cwiseQuotient(w.eigenvalues.cwiseSqrt());
  return w;
}

}  // namespace detail

/// Exact risk at effects τ for covariance Σ (structured or dense).
inline double risk_exact(EstimatorKind kind, const CovarianceSummary& sigma, const Vector& tau,
                         const QuadratureSettings& settings = {}) {
  detail::check_risk_inputs(kind, sigma, tau);
  const double tr = sigma.trace();
  const int k = sigma.dim();
  switch (kind) {
    case EstimatorKind::DiffInMeans:
      return tr;
    case EstimatorKind::Bock: {
      const double p = sigma.effective_dim();
      const auto form = GaussianQuadForm::isotropic(k, 1.0, sigma.inverse_quadratic(tau));
      return tr + form.combination_isotropic(p * p - 4.0, tr, tau.squaredNorm(), -2.0 * (p - 2.0) * tr,
                                             settings).value;
    }
    case EstimatorKind::SureMin: {
      auto w = detail::whiten(sigma, tau);
      const Vector a_diag = w.eigenvalues.array().square();
      const auto form = GaussianQuadForm::from_eigen(w.eigenvalues, std::move(w.basis), std::move(w.mean));
      return tr + form.combination_diagonal(4.0 * tr, a_diag, -tr * tr, settings).value;
    }
    case EstimatorKind::Dimmery: {
      auto w = detail::whiten(sigma, tau);
      const double km2 = k - 2.0;
      const Vector& s2 = sigma.sigma_sq();
      const Matrix g = w.basis.transpose() * s2.asDiagonal() * w.basis;                    // P^T Σ⋆ P
      const Matrix g2 = w.basis.transpose() * s2.array().square().matrix().asDiagonal() * w.basis;
      const Vector lam = w.eigenvalues;
      const Vector root = lam.cwiseSqrt();
      Matrix inner = km2 * km2 * g2;
      inner += 2.0 * km2 * (lam.asDiagonal() * g + g * lam.asDiagonal());
      const Matrix a_rot = root.asDiagonal() * inner * root.asDiagonal();
      const auto form = GaussianQuadForm::from_eigen(lam, std::move(w.basis), std::move(w.mean));
      return tr + form.combination(1.0, a_rot, -2.0 * km2 * s2.squaredNorm(), settings).value;
    }
  }
  return tr;
}

inline double risk_exact(const RiskQuery& q, const QuadratureSettings& settings = {}) {
  return risk_exact(q.kind, CovarianceSummary(build_covariance(q.n, q.v)), q.tau, settings);
}

struct McRisk {
  double mean = 0.0;
  double se = 0.0;
  long draws = 0;
};

/// Monte Carlo risk: averages ‖δ̂(τ̂) − τ‖² over τ̂ ~ N(τ, Σ). Draws are split
/// into fixed chunks with derived seeds, so the result depends only on
/// (draws, seed), not on `threads`.
inline McRisk risk_mc(EstimatorKind kind, const CovarianceSummary& sigma, const Vector& tau, long draws,
                      std::uint64_t seed, int threads = 1) {
  detail::check_risk_inputs(kind, sigma, tau);
  if (draws < 10'000) throw InvalidArgument("Monte Carlo risk needs at least 10^4 draws");
  const Eigen::LLT<Matrix> llt(sigma.dense());
  if (llt.info() != Eigen::Success) throw NumericalError("Cholesky of Σ failed");
  const Matrix chol = llt.matrixL();
  const Eigen::Index k = tau.size();

  constexpr long kChunk = 1 << 16;
  const long chunks = (draws + kChunk - 1) / kChunk;
  struct Partial {
    double n = 0.0;
    double mean = 0.0;
    double m2 = 0.0;
  };
  std::vector<Partial> partial(static_cast<std::size_t>(chunks));

  auto run_chunk = [&](long c) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    std::normal_distribution<double> normal;
    Vector z(k);
    Partial p;
    const long count = std::min(kChunk, draws - c * kChunk);
    for (long i = 0; i < count; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) z(j) = normal(rng);
      const Vector tau_hat = tau + chol * z;
      const double loss = (estimate(kind, tau_hat, sigma) - tau).squaredNorm();
      p.n += 1.0;
      const double delta = loss - p.mean;
      p.mean += delta / p.n;
      p.m2 += delta * (loss - p.mean);
    }
    partial[static_cast<std::size_t>(c)] = p;
  };

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(chunks)));
  if (workers == 1) {
    for (long c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (long c = w; c < chunks; c += workers) run_chunk(c);
      });
    }
    for (auto& t : pool) t.join();
  }

  // Chan et al. pairwise combination, in chunk order.
  Partial total;
  for (const auto& p : partial) {
    const double n = total.n + p.n;
    const double delta = p.mean - total.mean;
    total.mean += delta * p.n / n;
    total.m2 += p.m2 + delta * delta * total.n * p.n / n;
    total.n = n;
  }
  const double var = total.m2 / (total.n - 1.0);
  return McRisk{total.mean, std::sqrt(var / total.n), draws};
}

inline McRisk risk_mc(const RiskQuery& q, long draws, std::uint64_t seed, int threads = 1) {
  return risk_mc(q.kind, CovarianceSummary(build_covariance(q.n, q.v)), q.tau, draws, seed, threads);
}

/// Bock risk at τ = 0 in closed form:
///   tr Σ (1 − 2(p̃ − 2)/K + (p̃ − 2)² / (K(K − 2))).
inline double risk_bock_zero(const CovarianceSummary& sigma) {
  const double k = sigma.dim();
  if (k <= 2) throw InvalidArgument("Bock risk at zero needs K > 2");
  const double pm2 = sigma.effective_dim() - 2.0;
  return sigma.trace() * (1.0 - 2.0 * pm2 / k + pm2 * pm2 / (k * (k - 2.0)));
}

inline double risk_bock_zero(const StructuredCovariance& s) { return risk_bock_zero(CovarianceSummary(s)); }

// The three approximations below are diagnostics only; the adaptive engine and
// the greedy optimizer always use risk_exact.

/// Low-SNR SURE-min proxy: tr Σ (1 + (4 tr Σ² − (tr Σ)²) / ((tr Σ)² − 2 tr Σ²)).
inline double risk_suremin_lowsnr(const CovarianceSummary& sigma) {
  const double tr = sigma.trace();
  const double tr2 = sigma.dense().squaredNorm();
  const double denom = tr * tr - 2.0 * tr2;
  if (!(denom > 0.0)) throw ApproximationInvalid("(tr Σ)² − 2 tr Σ² ≤ 0");
  return tr * (1.0 + (4.0 * tr2 - tr * tr) / denom);
}

/// Dimmery proxy with E[1/‖τ̂‖²] ≈ 1/tr Σ and E[τ̂ᵀAτ̂/‖τ̂‖⁴] ≈ tr(AΣ)/(tr Σ)².
inline double risk_dimmery_proxy(const CovarianceSummary& sigma) {
  const double tr = sigma.trace();
  if (!(tr > 0.0)) throw ApproximationInvalid("tr Σ ≤ 0");
  const double k = sigma.dim();
  const Matrix& s = sigma.dense();
  const Vector& d = sigma.sigma_sq();
  const double star2_sigma = (d.array().square() * s.diagonal().array()).sum();  // tr(Σ⋆² Σ)
  const double sigma_star_sigma = (s * d.asDiagonal() * s).trace();             // tr(Σ Σ⋆ Σ)
  return tr + ((k - 2.0) * (k - 2.0) * star2_sigma + 4.0 * (k - 2.0) * sigma_star_sigma) / (tr * tr) -
         2.0 * (k - 2.0) * d.squaredNorm() / tr;
}

/// Moment-matched Gamma approximation of E[1/‖τ̂‖²]:
///   m / (m² − v),  m = tr Σ + ‖τ‖²,  v = 2 tr Σ² + 4 τᵀΣτ.
inline double satterthwaite_reciprocal(const CovarianceSummary& sigma, const Vector& tau) {
  if (tau.size() != sigma.dim()) throw InvalidArgument("effect vector has the wrong length");
  const double m = sigma.trace() + tau.squaredNorm();
  const double v = 2.0 * sigma.dense().squaredNorm() + 4.0 * tau.dot(sigma.dense() * tau);
  const double denom = m * m - v;
  if (!(denom > 0.0)) throw ApproximationInvalid("m² − v ≤ 0");
  return m / denom;
}

}  // namespace shrinkalloc

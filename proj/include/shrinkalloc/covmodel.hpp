#pragma once

#include "shrinkalloc/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <memory>
#include <mutex>
#include <string>

namespace shrinkalloc {

/// Largest eigenpair of a symmetric matrix. The eigenvector has unit norm and
/// nonnegative entries whenever the matrix is diagonal plus a positive rank-one
/// term.
struct Spectrum {
  double lambda_max = 0.0;
  Vector eigvec;
};

/// Condition numbers above this are rejected before Σ reaches quadrature.
inline constexpr double kMaxConditionNumber = 1e14;

namespace detail {

inline Spectrum dense_largest_eigen(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("symmetric eigendecomposition failed");
  }
  const Eigen::Index last = m.rows() - 1;
  Spectrum s;
  s.lambda_max = solver.eigenvalues()(last);
  s.eigvec = solver.eigenvectors().col(last);
  if (s.eigvec.sum() < 0.0) s.eigvec = -s.eigvec;
  return s;
}

// Largest root of the secular equation 1 - c * sum_i 1/(lambda - d_i) = 0,
// i.e. the top eigenvalue of diag(d) + c 11^T with c > 0. The root lies in
// (max d, max d + K c]; bisection runs on the offset from max d so that the
// gaps lambda - d_i keep full relative precision.
inline Spectrum secular_largest_eigen(const Vector& d, double c) {
  const Eigen::Index k = d.size();
  const double dmax = d.maxCoeff();
  const Vector gap = dmax - d.array();  // >= 0

  auto secular = [&](double delta) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) s += 1.0 / (delta + gap(i));
    return 1.0 - c * s;
  };

  double lo = 0.0;
  double hi = static_cast<double>(k) * c;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (secular(mid) < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double delta = 0.5 * (lo + hi);

  Spectrum s;
  s.lambda_max = dmax + delta;
  s.eigvec.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) s.eigvec(i) = 1.0 / (delta + gap(i));
  s.eigvec.normalize();
  return s;
}

}  // namespace detail

/// Covariance of the difference-in-means contrasts,
///   Σ = diag(V_k / n_k) + (V_0 / n_0) 11^T,   k = 1..K.
///
/// Immutable. Spectral quantities and the inverse are computed on first use
/// and shared between copies; concurrent first use is serialized per cache.
class StructuredCovariance {
 public:
  StructuredCovariance(Vector diag_part, double off)
      : diag_(std::move(diag_part)), off_(off), cache_(std::make_shared<Cache>()) {
    if (diag_.size() < 1) throw InvalidArgument("covariance needs at least one active arm");
    if (!(off_ >= 0.0) || !std::isfinite(off_)) {
      throw InvalidArgument("off-diagonal term must be finite and nonnegative");
    }
    for (Eigen::Index i = 0; i < diag_.size(); ++i) {
      if (!(diag_(i) > 0.0) || !std::isfinite(diag_(i))) {
        throw InvalidArgument("diagonal terms must be finite and positive");
      }
    }
  }

  /// Continuous allocations (e.g. the unrounded Neyman solution) are allowed.
  static StructuredCovariance from_allocation(const Vector& n, const ArmVariances& v) {
    if (n.size() != v.size()) {
      throw InvalidArgument("allocation and variance vectors differ in length (" +
                            std::to_string(n.size()) + " vs " + std::to_string(v.size()) + ")");
    }
    if (n.size() < 2) throw InvalidArgument("need a control arm and at least one active arm");
    for (Eigen::Index i = 0; i < n.size(); ++i) {
      if (!(n(i) > 0.0)) throw InvalidArgument("arm counts must be positive");
      if (!(v(i) > 0.0) || !std::isfinite(v(i))) {
        throw InvalidArgument("arm variances must be finite and positive");
      }
    }
    const Eigen::Index k = n.size() - 1;
    Vector d = v.tail(k).array() / n.tail(k).array();
    return StructuredCovariance(std::move(d), v(0) / n(0));
  }

  static StructuredCovariance from_counts(const ArmCounts& n, const ArmVariances& v) {
    Vector nd(static_cast<Eigen::Index>(n.size()));
    for (std::size_t i = 0; i < n.size(); ++i) {
      if (n[i] < 1) throw InvalidArgument("arm counts must be at least 1");
      nd(static_cast<Eigen::Index>(i)) = n[i];
    }
    return from_allocation(nd, v);
  }

  int dim() const { return static_cast<int>(diag_.size()); }

  /// V_k / n_k for the active arms.
  const Vector& diag_part() const { return diag_; }

  /// V_0 / n_0, shared by every entry.
  double off() const { return off_; }

  /// Σ_kk = V_k/n_k + V_0/n_0.
  Vector diagonal() const { return diag_.array() + off_; }

  Matrix dense() const {
    const Eigen::Index k = diag_.size();
    Matrix m = Matrix::Constant(k, k, off_);
    m.diagonal() += diag_;
    return m;
  }

  double trace() const { return diag_.sum() + static_cast<double>(diag_.size()) * off_; }

  double trace_square() const {
    const double k = static_cast<double>(diag_.size());
    return (diag_.array() + off_).square().sum() + k * (k - 1.0) * off_ * off_;
  }

  const Spectrum& spectrum() const {
    std::call_once(cache_->spectral_once, [this] {
      const double scale = diag_.maxCoeff();
      if (off_ <= 1e-12 * scale) {
        cache_->spectrum = detail::dense_largest_eigen(dense());
      } else {
        cache_->spectrum = detail::secular_largest_eigen(diag_, off_);
      }
    });
    return cache_->spectrum;
  }

  double lambda_max() const { return spectrum().lambda_max; }

  /// Upper bound on the spectral condition number (λ_min ≥ min_k V_k/n_k).
  double condition_bound() const { return lambda_max() / diag_.minCoeff(); }

  /// Dense Σ^{-1} via Sherman–Morrison.
  const Matrix& inverse() const {
    std::call_once(cache_->inverse_once, [this] {
      try {
        check_conditioning();
        const Vector dinv = diag_.cwiseInverse();
        const double denom = 1.0 + off_ * dinv.sum();
        Matrix inv = -(off_ / denom) * (dinv * dinv.transpose());
        inv.diagonal() += dinv;
        cache_->inverse = std::move(inv);
      } catch (...) {
        cache_->inverse_error = std::current_exception();
      }
    });
    if (cache_->inverse_error) std::rethrow_exception(cache_->inverse_error);
    return cache_->inverse;
  }

  /// x^T Σ^{-1} x in O(K) without forming the inverse.
  double inverse_quadratic(const Vector& x) const {
    if (x.size() != diag_.size()) throw InvalidArgument("dimension mismatch in quadratic form");
    const Vector dinv = diag_.cwiseInverse();
    const double s = x.dot(dinv.asDiagonal() * x);
    const double t = x.dot(dinv);
    return s - off_ * t * t / (1.0 + off_ * dinv.sum());
  }

  void check_conditioning() const {
    const double cond = condition_bound();
    if (!(cond <= kMaxConditionNumber)) {
      throw NumericalError("covariance is numerically singular (condition bound " +
                           std::to_string(cond) + ")");
    }
  }

 private:
  struct Cache {
    std::once_flag spectral_once;
    std::once_flag inverse_once;
    Spectrum spectrum;
    Matrix inverse;
    std::exception_ptr inverse_error;
  };

  Vector diag_;
  double off_;
  std::shared_ptr<Cache> cache_;
};

inline StructuredCovariance build_covariance(const ArmCounts& n, const ArmVariances& v) {
  return StructuredCovariance::from_counts(n, v);
}

inline Spectrum spectral(const StructuredCovariance& s) { return s.spectrum(); }

inline Matrix inverse(const StructuredCovariance& s) { return s.inverse(); }

/// Covariance quantities consumed by the estimators and the risk formulas.
/// Built either from the structured model or from an arbitrary SPD matrix
/// (the latter is how Σ = I and other unreachable test cases enter).
class CovarianceSummary {
 public:
  explicit CovarianceSummary(const StructuredCovariance& s)
      : dense_(s.dense()),
        sigma_sq_(s.diagonal()),
        trace_(s.trace()),
        lambda_max_(s.lambda_max()) {
    s.check_conditioning();
    inverse_ = s.inverse();
  }

  explicit CovarianceSummary(Matrix sigma) : dense_(std::move(sigma)) {
    if (dense_.rows() != dense_.cols() || dense_.rows() < 1) {
      throw InvalidArgument("covariance must be a nonempty square matrix");
    }
    if (!dense_.isApprox(dense_.transpose(), 1e-12)) {
      throw InvalidArgument("covariance must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(dense_, Eigen::EigenvaluesOnly);
    const double lo = solver.eigenvalues()(0);
    lambda_max_ = solver.eigenvalues()(dense_.rows() - 1);
    if (!(lo > 0.0) || lambda_max_ / lo > kMaxConditionNumber) {
      throw NumericalError("covariance is not safely positive definite");
    }
    sigma_sq_ = dense_.diagonal();
    trace_ = sigma_sq_.sum();
    inverse_ = dense_.llt().solve(Matrix::Identity(dense_.rows(), dense_.cols()));
  }

  int dim() const { return static_cast<int>(dense_.rows()); }
  const Matrix& dense() const { return dense_; }
  const Matrix& inverse() const { return inverse_; }
  /// Diagonal entries σ_k² of Σ.
  const Vector& sigma_sq() const { return sigma_sq_; }
  double trace() const { return trace_; }
  double lambda_max() const { return lambda_max_; }
  /// Effective dimension tr Σ / λ_max.
  double effective_dim() const { return trace_ / lambda_max_; }
  double inverse_quadratic(const Vector& x) const { return x.dot(inverse_ * x); }

 private:
  Matrix dense_;
  Matrix inverse_;
  Vector sigma_sq_;
  double trace_ = 0.0;
  double lambda_max_ = 0.0;
};

struct DominanceChecks {
  bool bock = false;
  bool sure_min = false;
  bool dimmery = false;
};

/// Sufficient conditions for each shrinker to dominate difference-in-means:
/// Bock's trace condition, 4 λ_max < tr Σ for SURE-min, and the Dimmery bound
/// ½ max σ² ((K-2) max σ² + 4 λ_max) ≤ Σ σ⁴.
inline DominanceChecks dominance_checks(double trace, double lambda_max, const Vector& sigma_sq) {
  const double k = static_cast<double>(sigma_sq.size());
  const double smax = sigma_sq.maxCoeff();
  DominanceChecks out;
  out.bock = trace > 2.0 * lambda_max;
  out.sure_min = 4.0 * lambda_max < trace;
  out.dimmery = 0.5 * smax * ((k - 2.0) * smax + 4.0 * lambda_max) <= sigma_sq.squaredNorm();
  return out;
}

inline DominanceChecks dominance_checks(const StructuredCovariance& s) {
  return dominance_checks(s.trace(), s.lambda_max(), s.diagonal());
}

inline DominanceChecks dominance_checks(const CovarianceSummary& s) {
  return dominance_checks(s.trace(), s.lambda_max(), s.sigma_sq());
}

/// Mild-heteroscedasticity condition under which, at the Neyman allocation,
/// adding units to control raises tr Σ / λ_max fastest:
///   max_k √V_k − min_k √V_k ≤ ½ √(K V_0).
inline bool bock_alloc_condition(const ArmVariances& v) {
  if (v.size() < 2) throw InvalidArgument("need a control arm and at least one active arm");
  const Eigen::Index k = v.size() - 1;
  const Vector sd = v.tail(k).cwiseSqrt();
  return sd.maxCoeff() - sd.minCoeff() <= 0.5 * std::sqrt(static_cast<double>(k) * v(0));
}

}  // namespace shrinkalloc

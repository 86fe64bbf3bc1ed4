#pragma once

// Moments of ratios of Gaussian quadratic forms as one-dimensional integrals.
//
// For X ~ N(mu, I_K) and SPD B with eigen-decomposition B = P Λ P^T, write
// w_i(t) = 1 / (1 + 2 t λ_i) and m = P^T mu. Then
//
//   E[1 / X^T B X]          = ∫_0^∞ ψ(t) dt
//   E[X^T A X / (X^T B X)^2] = ∫_0^∞ t ψ(t) [ Σ_i Ã_ii w_i + y^T Ã y ] dt,
//
// where ψ(t) = Π_i w_i^{1/2} · exp(-t Σ_i λ_i m_i² w_i), Ã = P^T A P and
// y_i = m_i w_i. Both follow from E[exp(-t X^T B X)] and the tilted Gaussian
// moments under that weight.
//
// The half-line is mapped onto [0, 1) with t = h s², s = u / (1 - u), where h
// is the reciprocal mean eigenvalue. The square keeps the mapped integrand
// bounded at u → 1 even for K = 3, where ψ decays like t^{-3/2}.

#include "shrinkalloc/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <queue>
#include <string>
#include <utility>
#include <vector>

namespace shrinkalloc {

struct QuadratureSettings {
  double abs_tol = 1e-10;
  double rel_tol = 1e-9;
  int max_panels = 2048;

  void validate() const {
    if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) {
      throw InvalidArgument("quadrature tolerances must be positive");
    }
    if (max_panels < 8) throw InvalidArgument("quadrature needs max_panels >= 8");
  }
};

struct QuadratureResult {
  double value = 0.0;
  double error = 0.0;  // estimated absolute error
  int panels = 0;
};

/// Tolerance not reached within the panel budget.
class QuadratureError : public NumericalError {
 public:
  QuadratureError(double estimate, double error_bound, int panels)
      : NumericalError("quadrature did not converge after " + std::to_string(panels) +
                       " panels (estimate " + std::to_string(estimate) + ", error bound " +
                       std::to_string(error_bound) + ")"),
        estimate_(estimate),
        error_bound_(error_bound) {}

  double estimate() const { return estimate_; }
  double error_bound() const { return error_bound_; }

 private:
  double estimate_;
  double error_bound_;
};

namespace quad {

/// Number of adaptive integrations started in this process. Diagnostic only.
inline std::atomic<unsigned long long> call_count{0};

namespace gk21 {
// 21-point Kronrod extension of the 10-point Gauss rule (nodes in [0, 1]).
inline constexpr std::array<double, 11> nodes = {
    0.995657163025808080735527280689003, 0.973906528517171720077964012084452,
    0.930157491355708226001207180059508, 0.865063366688984510732096688423493,
    0.780817726586416897063717578345042, 0.679409568299024406234327365114874,
    0.562757134668604683339000099272694, 0.433395394129247190799265943165784,
    0.294392862701460198131126603103866, 0.148874338981631210884826001129720,
    0.0};
inline constexpr std::array<double, 11> kronrod = {
    0.011694638867371874278064396062192, 0.032558162307964727478818972459390,
    0.054755896574351996031381300244580, 0.075039674810919952767043140916190,
    0.093125454583697605535065465083366, 0.109387158802297641899210590325805,
    0.123491976262065851077208980223165, 0.134709217311473325928054001771707,
    0.142775938577060080797094273138717, 0.147739104901338491374841515972068,
    0.149445554002916905664936468389821};
// Gauss weights for nodes[1], nodes[3], ..., nodes[9].
inline constexpr std::array<double, 5> gauss = {
    0.066671344308688137593568809893332, 0.149451349150580593145776339657697,
    0.219086362515982043995534934228163, 0.269266719309996355091226921569469,
    0.295524224714752870173892994651338};
}  // namespace gk21

struct Panel {
  double a = 0.0;
  double b = 0.0;
  double value = 0.0;
  double error = 0.0;
  bool operator<(const Panel& other) const { return error < other.error; }
};

template <class F>
Panel gauss_kronrod(F& f, double a, double b) {
  const double center = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  const double fc = f(center);
  double kron = fc * gk21::kronrod[10];
  double gauss = 0.0;
  for (int j = 0; j < 10; ++j) {
    const double dx = half * gk21::nodes[static_cast<std::size_t>(j)];
    const double fsum = f(center - dx) + f(center + dx);
    kron += gk21::kronrod[static_cast<std::size_t>(j)] * fsum;
    if (j % 2 == 1) gauss += gk21::gauss[static_cast<std::size_t>(j / 2)] * fsum;
  }
  return Panel{a, b, kron * half, std::abs((kron - gauss) * half)};
}

/// Globally adaptive Gauss–Kronrod on [0, 1]: the panel with the largest error
/// estimate is bisected until Σ error ≤ max(abs_tol, rel_tol · |Σ value|).
template <class F>
QuadratureResult integrate_unit(F&& f, const QuadratureSettings& settings) {
  settings.validate();
  call_count.fetch_add(1, std::memory_order_relaxed);

  constexpr int kInitialPanels = 4;
  std::priority_queue<Panel> heap;
  double total = 0.0;
  double error = 0.0;
  for (int i = 0; i < kInitialPanels; ++i) {
    Panel p = gauss_kronrod(f, static_cast<double>(i) / kInitialPanels,
                            static_cast<double>(i + 1) / kInitialPanels);
    total += p.value;
    error += p.error;
    heap.push(p);
  }
  int panels = kInitialPanels;

  auto converged = [&] { return error <= std::max(settings.abs_tol, settings.rel_tol * std::abs(total)); };

  while (!converged()) {
    if (panels >= settings.max_panels) throw QuadratureError(total, error, panels);
    Panel worst = heap.top();
    heap.pop();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) throw QuadratureError(total, error, panels);
    Panel left = gauss_kronrod(f, worst.a, mid);
    Panel right = gauss_kronrod(f, mid, worst.b);
    total += left.value + right.value - worst.value;
    error += left.error + right.error - worst.error;
    heap.push(left);
    heap.push(right);
    ++panels;
  }
  // Re-sum to shed the drift of the running updates.
  total = 0.0;
  error = 0.0;
  while (!heap.empty()) {
    total += heap.top().value;
    error += heap.top().error;
    heap.pop();
  }
  return QuadratureResult{total, error, panels};
}

}  // namespace quad

/// The law of X^T B X for X ~ N(mu, I), held in the eigenbasis of B.
///
/// Numerators X^T A X must be supplied in the same basis (see rotate()).
/// Callers with a nonsymmetric numerator matrix M pass (M + M^T)/2.
class GaussianQuadForm {
 public:
  /// General SPD B. Eigen-decomposes once.
  GaussianQuadForm(const Matrix& b, const Vector& mu) {
    if (b.rows() != b.cols() || b.rows() != mu.size()) {
      throw InvalidArgument("quadratic form shapes disagree");
    }
    check_dimension(static_cast<int>(mu.size()));
    Eigen::SelfAdjointEigenSolver<Matrix> solver(b);
    if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition of B failed");
    if (!(solver.eigenvalues()(0) > 0.0)) throw InvalidArgument("B must be positive definite");
    basis_ = solver.eigenvectors();
    lambda_ = solver.eigenvalues();
    mu_ = basis_.transpose() * mu;
    finish_setup();
  }

  /// B given directly by its eigenvalues and basis; mu_rotated = P^T mu.
  static GaussianQuadForm from_eigen(Vector eigenvalues, Matrix basis, Vector mu_rotated) {
    GaussianQuadForm g;
    check_dimension(static_cast<int>(eigenvalues.size()));
    if (!(eigenvalues.minCoeff() > 0.0)) throw InvalidArgument("B must be positive definite");
    g.lambda_ = std::move(eigenvalues);
    g.basis_ = std::move(basis);
    g.mu_ = std::move(mu_rotated);
    g.finish_setup();
    return g;
  }

  /// B = scale · I_K; only ‖mu‖² matters.
  static GaussianQuadForm isotropic(int k, double scale, double mu_squared) {
    check_dimension(k);
    if (!(scale > 0.0)) throw InvalidArgument("B must be positive definite");
    if (!(mu_squared >= 0.0)) throw InvalidArgument("squared mean norm must be nonnegative");
    GaussianQuadForm g;
    g.isotropic_ = true;
    g.k_ = k;
    g.iso_scale_ = scale;
    g.iso_mu_sq_ = mu_squared;
    g.h_ = 1.0 / scale;
    return g;
  }

  int dim() const { return k_; }
  bool is_isotropic() const { return isotropic_; }
  const Vector& eigenvalues() const { return lambda_; }

  /// P^T A P for a numerator given in the original coordinates.
  Matrix rotate(const Matrix& a) const {
    if (isotropic_) return a;
    return basis_.transpose() * a * basis_;
  }

  /// E[1 / X^T B X].
  QuadratureResult reciprocal(const QuadratureSettings& settings = {}) const {
    return integrate([&](double t, double log_weight) {
      (void)t;
      return std::exp(log_weight);
    }, settings);
  }

  /// E[X^T A X / (X^T B X)^2], A already rotated into the eigenbasis.
  QuadratureResult ratio(const Matrix& a_rotated, const QuadratureSettings& settings = {}) const {
    return combination(1.0, a_rotated, 0.0, settings);
  }

  /// As ratio() for an A that is diagonal in the eigenbasis of B.
  QuadratureResult ratio_diagonal(const Vector& a_diag, const QuadratureSettings& settings = {}) const {
    return combination_diagonal(1.0, a_diag, 0.0, settings);
  }

  /// Isotropic B only: the numerator enters through tr A and mu^T A mu.
  QuadratureResult ratio_isotropic(double trace_a, double mu_a_mu,
                                   const QuadratureSettings& settings = {}) const {
    return combination_isotropic(1.0, trace_a, mu_a_mu, 0.0, settings);
  }

  /// α E[X^T A X / (X^T B X)^2] + β E[1 / X^T B X] as a single integral.
  QuadratureResult combination(double alpha, const Matrix& a_rotated, double beta,
                               const QuadratureSettings& settings = {}) const {
    if (isotropic_) {
      throw InvalidArgument("use combination_isotropic for an isotropic form");
    }
    if (a_rotated.rows() != k_ || a_rotated.cols() != k_) {
      throw InvalidArgument("numerator matrix has the wrong shape");
    }
    const Vector a_diag = a_rotated.diagonal();
    Vector y(k_);
    return integrate([&](double t, double log_weight) {
      const double weight = std::exp(log_weight);
      if (weight == 0.0) return 0.0;
      double bracket = 0.0;
      for (int i = 0; i < k_; ++i) {
        const double w = 1.0 / (1.0 + 2.0 * t * lambda_(i));
        bracket += a_diag(i) * w;
        y(i) = mu_(i) * w;
      }
      for (int i = 0; i < k_; ++i) {
        double row = 0.0;
        for (int j = i + 1; j < k_; ++j) row += a_rotated(i, j) * y(j);
        bracket += y(i) * (a_rotated(i, i) * y(i) + 2.0 * row);
      }
      return weight * (alpha * t * bracket + beta);
    }, settings);
  }

  QuadratureResult combination_diagonal(double alpha, const Vector& a_diag, double beta,
                                        const QuadratureSettings& settings = {}) const {
    if (isotropic_) {
      throw InvalidArgument("use combination_isotropic for an isotropic form");
    }
    if (a_diag.size() != k_) throw InvalidArgument("numerator diagonal has the wrong length");
    return integrate([&](double t, double log_weight) {
      const double weight = std::exp(log_weight);
      if (weight == 0.0) return 0.0;
      double bracket = 0.0;
      for (int i = 0; i < k_; ++i) {
        const double w = 1.0 / (1.0 + 2.0 * t * lambda_(i));
        bracket += a_diag(i) * w * (1.0 + mu_sq_(i) * w);
      }
      return weight * (alpha * t * bracket + beta);
    }, settings);
  }

  QuadratureResult combination_isotropic(double alpha, double trace_a, double mu_a_mu, double beta,
                                         const QuadratureSettings& settings = {}) const {
    if (!isotropic_) throw InvalidArgument("form is not isotropic");
    return integrate([&](double t, double log_weight) {
      const double weight = std::exp(log_weight);
      if (weight == 0.0) return 0.0;
      const double w = 1.0 / (1.0 + 2.0 * t * iso_scale_);
      return weight * (alpha * t * (trace_a * w + mu_a_mu * w * w) + beta);
    }, settings);
  }

 private:
  GaussianQuadForm() = default;

  static void check_dimension(int k) {
    if (k < 3) {
      throw InvalidArgument("quadratic-form moments need K >= 3 (got K = " + std::to_string(k) + ")");
    }
  }

  void finish_setup() {
    k_ = static_cast<int>(lambda_.size());
    if (mu_.size() != k_) throw InvalidArgument("mean vector has the wrong length");
    mu_sq_ = mu_.array().square();
    h_ = 1.0 / lambda_.mean();
  }

  // log ψ(t) = -½ Σ log(1 + 2tλ_i) - t Σ λ_i m_i² / (1 + 2tλ_i)
  double log_weight(double t) const {
    if (isotropic_) {
      const double x = 2.0 * t * iso_scale_;
      return -0.5 * k_ * std::log1p(x) - t * iso_scale_ * iso_mu_sq_ / (1.0 + x);
    }
    double logdet = 0.0;
    double expo = 0.0;
    for (int i = 0; i < k_; ++i) {
      const double x = 2.0 * t * lambda_(i);
      logdet += std::log1p(x);
      expo += lambda_(i) * mu_sq_(i) / (1.0 + x);
    }
    return -0.5 * logdet - t * expo;
  }

  // g(t, log ψ(t)) integrated over t ∈ [0, ∞) through the map described above.
  template <class G>
  QuadratureResult integrate(G&& g, const QuadratureSettings& settings) const {
    constexpr double kNegligibleLog = -745.0;
    auto mapped = [&](double u) {
      const double one_minus = 1.0 - u;
      const double s = u / one_minus;
      const double t = h_ * s * s;
      const double jac = 2.0 * h_ * s / (one_minus * one_minus);
      const double lw = log_weight(t);
      if (lw + std::log(jac) < kNegligibleLog) return 0.0;
      return g(t, lw) * jac;
    };
    return quad::integrate_unit(mapped, settings);
  }

  bool isotropic_ = false;
  int k_ = 0;
  double iso_scale_ = 1.0;
  double iso_mu_sq_ = 0.0;
  double h_ = 1.0;
  Vector lambda_;
  Matrix basis_;
  Vector mu_;
  Vector mu_sq_;
};

/// E[1 / X^T B X] for X ~ N(mu, I).
inline double reciprocal_moment(const Matrix& b, const Vector& mu, const QuadratureSettings& settings = {}) {
  return GaussianQuadForm(b, mu).reciprocal(settings).value;
}

/// E[X^T A X / (X^T B X)^2] for X ~ N(mu, I). A must be symmetric.
inline double ratio_moment(const Matrix& a, const Matrix& b, const Vector& mu,
                           const QuadratureSettings& settings = {}) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument("numerator and denominator matrices differ in shape");
  }
  if ((a - a.transpose()).norm() > 1e-12 * a.norm()) {
    throw InvalidArgument("numerator matrix must be symmetric");
  }
  GaussianQuadForm form(b, mu);
  return form.ratio(form.rotate(a), settings).value;
}

}  // namespace shrinkalloc

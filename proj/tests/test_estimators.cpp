#include "shrinkalloc/estimators.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace shrinkalloc {
namespace {

CovarianceSummary identity(int k) { return CovarianceSummary(Matrix(Matrix::Identity(k, k))); }

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

// Dense restatement of each estimator, straight from the matrix formulas.
Vector dense_estimator(EstimatorKind kind, const Vector& t, const Matrix& s) {
  const int k = static_cast<int>(t.size());
  switch (kind) {
    case EstimatorKind::DiffInMeans:
      return t;
    case EstimatorKind::Bock: {
      const double p = s.trace() / testing::dense_lambda_max(s);
      return (1.0 - (p - 2.0) / t.dot(s.llt().solve(t))) * t;
    }
    case EstimatorKind::SureMin:
      return (1.0 - s.trace() / t.dot(t)) * t;
    case EstimatorKind::Dimmery: {
      Vector out(k);
      for (int i = 0; i < k; ++i) out(i) = (1.0 - (k - 2.0) * s(i, i) / t.dot(t)) * t(i);
      return out;
    }
  }
  return t;
}

// Generic Stein identity: with δ(x) = x − g(x), SURE = tr Σ + ‖g‖² − 2 tr(Σ ∂g/∂x).
// The Jacobian is taken by central differences.
double generic_sure(EstimatorKind kind, const Vector& t, const CovarianceSummary& sigma) {
  const Eigen::Index k = t.size();
  auto g = [&](const Vector& x) -> Vector { return x - estimate(kind, x, sigma); };
  Matrix jac(k, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const double h = 1e-5 * std::max(1.0, std::abs(t(j)));
    Vector up = t;
    Vector dn = t;
    up(j) += h;
    dn(j) -= h;
    jac.col(j) = (g(up) - g(dn)) / (2.0 * h);
  }
  return sigma.trace() + g(t).squaredNorm() - 2.0 * (sigma.dense() * jac).trace();
}

TEST(Estimators, DiffInMeans) {
  EXPECT_TRUE(diff_in_means(vec({1.0, 2.0, 0.5})).isApprox(vec({1.0, -0.5})));
  EXPECT_TRUE(diff_in_means(Vector::Constant(5, 3.3)).isZero());
  EXPECT_TRUE(diff_in_means(vec({0, 3, 4, 5})).isApprox(vec({3, 4, 5})));
  EXPECT_THROW(diff_in_means(vec({1.0, NAN})), InvalidArgument);
}

TEST(Estimators, BockExamples) {
  const ContrastEstimate e(vec({2, 0, 0, 0}), identity(4));
  EXPECT_TRUE(bock(e).isApprox(vec({1, 0, 0, 0}), 1e-15));
  const ContrastEstimate z(vec({1, 1, 1, 1, 0, 0}), identity(6));
  EXPECT_NEAR(bock(z).norm(), 0.0, 1e-15);
}

TEST(Estimators, SureMinExamples) {
  const ContrastEstimate e(vec({2, 2, 2, 2}), identity(4));
  EXPECT_TRUE(sure_min(e).isApprox(Vector::Constant(4, 1.5), 1e-15));
  // ‖τ̂‖² = tr Σ.
  const ContrastEstimate z(vec({1, 1, 1, 1}), identity(4));
  EXPECT_NEAR(sure_min(z).norm(), 0.0, 1e-15);
}

TEST(Estimators, DimmeryExamples) {
  const ContrastEstimate e(vec({2, 2, 2, 2}), identity(4));
  EXPECT_TRUE(dimmery(e).isApprox(Vector::Constant(4, 1.75), 1e-15));
  Matrix het = Matrix::Zero(4, 4);
  het.diagonal() = vec({1, 2, 1, 2});
  const CovarianceSummary s(het);
  const Vector f = shrink_factors(EstimatorKind::Dimmery, vec({2, 2, 2, 2}), s);
  EXPECT_TRUE(f.isApprox(vec({0.875, 0.75, 0.875, 0.75}), 1e-15));
}

TEST(Estimators, MatchDenseFormulas) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 25; ++rep) {
    const auto [n, v] = testing::random_design(6, rng);
    const CovarianceSummary s(build_covariance(n, v));
    const Matrix dense = testing::dense_sigma(n, v);
    const Vector t = testing::random_vector(6, rng, 0.5);
    for (auto kind : kAllEstimators) {
      EXPECT_TRUE(estimate(kind, t, s).isApprox(dense_estimator(kind, t, dense), 1e-10))
          << to_string(kind) << " rep " << rep;
    }
  }
}

TEST(Estimators, RejectZeroAndSmallK) {
  for (auto kind : kShrinkers) {
    EXPECT_THROW(estimate(kind, Vector::Zero(4), identity(4)), ZeroContrastError);
    EXPECT_THROW(estimate(kind, Vector::Constant(4, 1e-160), identity(4)), ZeroContrastError);
    EXPECT_THROW(estimate(kind, vec({1, 2}), identity(2)), InvalidArgument);
    EXPECT_THROW(sure_value(kind, Vector::Zero(4), identity(4)), ZeroContrastError);
  }
  EXPECT_TRUE(estimate(EstimatorKind::DiffInMeans, Vector::Zero(4), identity(4)).isZero());
  EXPECT_THROW(ContrastEstimate(Vector::Ones(3), identity(4)), InvalidArgument);
}

TEST(Estimators, PositivePartIsOptIn) {
  const Vector t = vec({0.1, 0.1, 0.1, 0.1});
  const auto s = identity(4);
  EXPECT_LT(shrink_factors(EstimatorKind::SureMin, t, s)(0), 0.0);
  EXPECT_EQ(shrink_factors(EstimatorKind::SureMin, t, s, {true})(0), 0.0);
  EXPECT_EQ(shrink_factors(EstimatorKind::Dimmery, t, s, {true}).maxCoeff(), 0.0);
}

TEST(Estimators, MultipliersAtMostOne) {
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 200; ++rep) {
    const int k = 3 + rep % 10;
    const auto [n, v] = testing::random_design(k, rng);
    const CovarianceSummary s(build_covariance(n, v));
    const Vector t = testing::random_vector(k, rng, rep % 2 ? 0.05 : 3.0);
    for (auto kind : kShrinkers) {
      const Vector f = shrink_factors(kind, t, s);
      // Bock expands when p̃ < 2; see BockExpandsBelowEffectiveDimensionTwo.
      if (kind != EstimatorKind::Bock || s.effective_dim() >= 2.0) EXPECT_LE(f.maxCoeff(), 1.0);
      EXPECT_TRUE(estimate(kind, t, s).isApprox(f.cwiseProduct(t)));
      if (kind != EstimatorKind::Dimmery) EXPECT_EQ(f.minCoeff(), f.maxCoeff());
    }
  }
}

TEST(Estimators, BockExpandsBelowEffectiveDimensionTwo) {
  // A dominant shared control variance pushes λ_max above tr Σ / 2.
  ArmVariances v(4);
  v << 50.0, 1.0, 1.0, 1.0;
  const CovarianceSummary s(build_covariance({10, 10, 10, 10}, v));
  ASSERT_LT(s.effective_dim(), 2.0);
  const Vector f = shrink_factors(EstimatorKind::Bock, Vector::Ones(3), s);
  EXPECT_GT(f(0), 1.0);
  EXPECT_LE(shrink_factors(EstimatorKind::Bock, Vector::Ones(3), s, {true})(0), f(0));
}

TEST(Estimators, PermutationEquivariance) {
  std::mt19937_64 rng(77);
  for (int rep = 0; rep < 10; ++rep) {
    const int k = 7;
    const auto [n, v] = testing::random_design(k, rng);
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ArmCounts pn = n;
    ArmVariances pv = v;
    for (int i = 0; i < k; ++i) {
      pn[static_cast<std::size_t>(i + 1)] = n[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] + 1)];
      pv(i + 1) = v(perm[static_cast<std::size_t>(i)] + 1);
    }
    const Vector t = testing::random_vector(k, rng);
    Vector pt(k);
    for (int i = 0; i < k; ++i) pt(i) = t(perm[static_cast<std::size_t>(i)]);
    const CovarianceSummary s(build_covariance(n, v));
    const CovarianceSummary ps(build_covariance(pn, pv));
    for (auto kind : kAllEstimators) {
      const Vector out = estimate(kind, t, s);
      const Vector pout = estimate(kind, pt, ps);
      for (int i = 0; i < k; ++i) EXPECT_NEAR(pout(i), out(perm[static_cast<std::size_t>(i)]), 1e-12);
      EXPECT_NEAR(sure_value(kind, t, s), sure_value(kind, pt, ps), 1e-10);
    }
  }
}

TEST(Estimators, SureValueExamples) {
  EXPECT_NEAR(sure_value(EstimatorKind::SureMin, vec({2, 2, 2, 2}), identity(4)), 4.0, 1e-14);
  EXPECT_NEAR(generic_sure(EstimatorKind::SureMin, vec({2, 2, 2, 2}), identity(4)), 4.0, 1e-7);
  std::mt19937_64 rng(4);
  const auto [n, v] = testing::random_design(5, rng);
  const CovarianceSummary s(build_covariance(n, v));
  EXPECT_DOUBLE_EQ(sure_value(EstimatorKind::DiffInMeans, testing::random_vector(5, rng), s), s.trace());
}

TEST(Estimators, ClosedFormSureMatchesStein) {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 30; ++rep) {
    const int k = 3 + rep % 8;
    const auto [n, v] = testing::random_design(k, rng);
    const CovarianceSummary s(build_covariance(n, v));
    const Vector t = testing::random_vector(k, rng, 0.4);
    for (auto kind : kAllEstimators) {
      const double closed = sure_value(kind, t, s);
      const double generic = generic_sure(kind, t, s);
      EXPECT_NEAR(closed, generic, 1e-5 * std::max(1.0, std::abs(closed))) << to_string(kind) << " K=" << k;
    }
  }
}

TEST(Estimators, BockSureAveragesToLemmaFiveAtIdentity) {
  const int k = 6;
  const auto s = identity(k);
  const auto mc = testing::monte_carlo_standard(Vector::Zero(k), 1'000'000, 606, [&](const Vector& x) {
    return sure_value(EstimatorKind::Bock, x, s);
  });
  EXPECT_LT(std::abs(mc.mean - 2.0), 3.0 * mc.se) << mc.mean << " ± " << mc.se;
}

}  // namespace
}  // namespace shrinkalloc

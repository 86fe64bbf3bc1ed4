#include "shrinkalloc/covmodel.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <thread>
#include <vector>

namespace shrinkalloc {
namespace {

TEST(Covmodel, BuildSmallExample) {
  ArmVariances v(3);
  v << 1.0, 2.0, 3.0;
  const auto s = build_covariance({10, 10, 10}, v);
  EXPECT_DOUBLE_EQ(s.diag_part()(0), 0.2);
  EXPECT_DOUBLE_EQ(s.diag_part()(1), 0.3);
  EXPECT_DOUBLE_EQ(s.off(), 0.1);
  Matrix expected(2, 2);
  expected << 0.3, 0.1, 0.1, 0.4;
  EXPECT_TRUE(s.dense().isApprox(expected, 1e-15));
  EXPECT_NEAR(s.trace(), 0.7, 1e-15);
  EXPECT_NEAR(s.trace_square(), 0.27, 1e-15);
}

TEST(Covmodel, SingleActiveArm) {
  ArmVariances v(2);
  v << 1.0, 1.0;
  const auto s = build_covariance({1, 1}, v);
  ASSERT_EQ(s.dim(), 1);
  EXPECT_DOUBLE_EQ(s.dense()(0, 0), 2.0);
}

TEST(Covmodel, RejectsBadInput) {
  ArmVariances v(3);
  v << 1.0, 2.0, 3.0;
  EXPECT_THROW(build_covariance({10, 10}, v), InvalidArgument);
  EXPECT_THROW(build_covariance({10, 0, 10}, v), InvalidArgument);
  v(1) = 0.0;
  EXPECT_THROW(build_covariance({10, 10, 10}, v), InvalidArgument);
  v(1) = -1.0;
  EXPECT_THROW(build_covariance({10, 10, 10}, v), InvalidArgument);
}

TEST(Covmodel, SpectralTwoByTwo) {
  ArmVariances v(3);
  v << 1.0, 2.0, 3.0;
  const auto sp = spectral(build_covariance({10, 10, 10}, v));
  EXPECT_NEAR(sp.lambda_max, 0.35 + std::sqrt(0.0125), 1e-14);
  EXPECT_NEAR(sp.eigvec.norm(), 1.0, 1e-14);
  EXPECT_GT(sp.eigvec.minCoeff(), 0.0);
}

TEST(Covmodel, SpectralSymmetricCase) {
  for (int k : {2, 5, 9}) {
    const double d = 0.7;
    const double c = 0.3;
    StructuredCovariance s(Vector::Constant(k, d), c);
    const auto sp = s.spectrum();
    EXPECT_NEAR(sp.lambda_max, d + k * c, 1e-13);
    for (int i = 0; i < k; ++i) EXPECT_NEAR(sp.eigvec(i), 1.0 / std::sqrt(k), 1e-12);
  }
}

TEST(Covmodel, SpectralMatchesDenseOracle) {
  std::mt19937_64 rng(20240611);
  std::uniform_int_distribution<int> pick_k(2, 16);
  for (int rep = 0; rep < 100; ++rep) {
    const int k = pick_k(rng);
    const auto [n, v] = testing::random_design(k, rng);
    const auto s = build_covariance(n, v);
    const Matrix dense = testing::dense_sigma(n, v);
    const double oracle = testing::dense_lambda_max(dense);
    const auto sp = s.spectrum();
    EXPECT_NEAR(sp.lambda_max, oracle, 1e-10 * std::max(1.0, oracle)) << "rep " << rep;
    EXPECT_GE(sp.lambda_max, s.trace() / k - 1e-14);
    EXPECT_NEAR(sp.eigvec.norm(), 1.0, 1e-12);
    EXPECT_GE(sp.eigvec.minCoeff(), 0.0);
    // Eigen-equation residual.
    EXPECT_LT((dense * sp.eigvec - sp.lambda_max * sp.eigvec).norm(), 1e-10);
    // Trace identity.
    double expected_trace = k * v(0) / n[0];
    for (int i = 1; i <= k; ++i) expected_trace += v(i) / n[static_cast<std::size_t>(i)];
    EXPECT_NEAR(s.trace(), expected_trace, 1e-13 * expected_trace);
    EXPECT_NEAR(s.trace_square(), (dense * dense).trace(), 1e-12 * s.trace_square());
  }
}

TEST(Covmodel, ZeroOffDiagonalFallsBackToDense) {
  Vector d(4);
  d << 1.0, 3.0, 2.0, 3.0 - 1e-13;
  StructuredCovariance s(d, 0.0);
  EXPECT_NEAR(s.lambda_max(), 3.0, 1e-12);
}

TEST(Covmodel, InverseSmallExample) {
  ArmVariances v(3);
  v << 1.0, 2.0, 3.0;
  const Matrix inv = inverse(build_covariance({10, 10, 10}, v));
  Matrix expected(2, 2);
  expected << 0.4, -0.1, -0.1, 0.3;
  expected /= 0.11;
  EXPECT_TRUE(inv.isApprox(expected, 1e-13));
  EXPECT_NEAR(inv(0, 0), 3.6364, 1e-4);
  EXPECT_NEAR(inv(0, 1), -0.9091, 1e-4);
  EXPECT_NEAR(inv(1, 1), 2.7273, 1e-4);
}

TEST(Covmodel, InverseOfIdentity) {
  StructuredCovariance s(Vector::Ones(5), 0.0);
  EXPECT_TRUE(s.inverse().isApprox(Matrix::Identity(5, 5), 1e-15));
}

TEST(Covmodel, InverseResidual) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const auto [n, v] = testing::random_design(8, rng);
    const auto s = build_covariance(n, v);
    const Matrix residual = s.dense() * s.inverse() - Matrix::Identity(8, 8);
    EXPECT_LE(residual.cwiseAbs().maxCoeff(), 1e-10);
    const Vector x = testing::random_vector(8, rng);
    EXPECT_NEAR(s.inverse_quadratic(x), x.dot(s.inverse() * x), 1e-10 * x.squaredNorm());
  }
}

TEST(Covmodel, InverseRejectsNearSingular) {
  Vector d(3);
  d << 1.0, 1e-16, 1.0;
  StructuredCovariance s(d, 1.0);
  EXPECT_THROW(s.inverse(), NumericalError);
  // The failure is sticky, not recomputed into a different answer.
  EXPECT_THROW(s.inverse(), NumericalError);
}

TEST(Covmodel, ConcurrentLazyCache) {
  std::mt19937_64 rng(3);
  const auto [n, v] = testing::random_design(12, rng);
  const auto s = build_covariance(n, v);
  std::vector<double> seen(8, 0.0);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] { seen[static_cast<std::size_t>(i)] = s.lambda_max() + s.inverse()(0, 0); });
  }
  for (auto& t : threads) t.join();
  for (double x : seen) EXPECT_EQ(x, seen[0]);
}

TEST(Covmodel, DominanceChecks) {
  StructuredCovariance eye4(Vector::Ones(4), 0.0);
  auto d4 = dominance_checks(eye4);
  EXPECT_TRUE(d4.bock);
  EXPECT_FALSE(d4.sure_min);

  StructuredCovariance eye6(Vector::Ones(6), 0.0);
  auto d6 = dominance_checks(eye6);
  EXPECT_TRUE(d6.sure_min);
  // ½·1·(4·1 + 4·1) = 4 ≤ 6.
  EXPECT_TRUE(d6.dimmery);

  const double s = 2.5;
  auto ds = dominance_checks(StructuredCovariance(Vector::Constant(6, s), 0.0));
  EXPECT_TRUE(ds.dimmery);
}

TEST(Covmodel, DominanceSummaryMatchesStructured) {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 10; ++rep) {
    const auto [n, v] = testing::random_design(6, rng);
    const auto s = build_covariance(n, v);
    const auto a = dominance_checks(s);
    const auto b = dominance_checks(CovarianceSummary(s.dense()));
    EXPECT_EQ(a.bock, b.bock);
    EXPECT_EQ(a.sure_min, b.sure_min);
    EXPECT_EQ(a.dimmery, b.dimmery);
  }
}

TEST(Covmodel, BockAllocationCondition) {
  ArmVariances a(4);
  a << 1, 1, 1, 1;
  EXPECT_TRUE(bock_alloc_condition(a));
  ArmVariances b(3);
  b << 0.01, 1, 100;
  EXPECT_FALSE(bock_alloc_condition(b));
  ArmVariances c(3);
  c << 4, 1, 4;
  EXPECT_TRUE(bock_alloc_condition(c));
}

TEST(Covmodel, SummaryFromStructuredAgreesWithDense) {
  std::mt19937_64 rng(5);
  const auto [n, v] = testing::random_design(7, rng);
  const auto s = build_covariance(n, v);
  CovarianceSummary a(s);
  CovarianceSummary b(s.dense());
  EXPECT_NEAR(a.trace(), b.trace(), 1e-13);
  EXPECT_NEAR(a.lambda_max(), b.lambda_max(), 1e-10);
  EXPECT_TRUE(a.inverse().isApprox(b.inverse(), 1e-10));
  EXPECT_TRUE(a.sigma_sq().isApprox(b.sigma_sq(), 1e-14));
}

}  // namespace
}  // namespace shrinkalloc

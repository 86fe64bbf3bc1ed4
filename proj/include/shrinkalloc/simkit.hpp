#pragma once

// Simulation protocol: a data-generating process drawn once per experiment,
// oracle (known-parameter) designs from greedy swapping, and repeated
// sequential trials scored by compound MSE Σ_k (δ̂_k − τ_k)².

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/design.hpp"
#include "shrinkalloc/estimators.hpp"
#include "shrinkalloc/random.hpp"
#include "shrinkalloc/trial.hpp"
#include "shrinkalloc/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace shrinkalloc {

enum class V0Regime { Low, High };
enum class TauShape { Zero, Dense, Sparse };

inline std::string to_string(V0Regime r) { return r == V0Regime::Low ? "low" : "high"; }

inline std::string to_string(TauShape s) {
  switch (s) {
    case TauShape::Zero: return "zero";
    case TauShape::Dense: return "dense";
    case TauShape::Sparse: return "sparse";
  }
  return "unknown";
}

inline V0Regime parse_v0_regime(const std::string& s) {
  if (s == "low") return V0Regime::Low;
  if (s == "high") return V0Regime::High;
  throw InvalidArgument("unknown V0 regime '" + s + "' (expected low or high)");
}

inline TauShape parse_tau_shape(const std::string& s) {
  if (s == "zero") return TauShape::Zero;
  if (s == "dense") return TauShape::Dense;
  if (s == "sparse") return TauShape::Sparse;
  throw InvalidArgument("unknown tau shape '" + s + "' (expected zero, dense or sparse)");
}

/// κ = 0 exactly when τ = 0.
inline void validate_signal(TauShape shape, double kappa) {
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw InvalidArgument("kappa must be finite and nonnegative");
  if ((kappa == 0.0) != (shape == TauShape::Zero)) {
    throw InvalidArgument("kappa = 0 requires tau shape 'zero' and kappa > 0 requires dense or sparse");
  }
}

struct Dgp {
  ArmVariances v;
  EffectVector tau;
};

inline constexpr double kLogVarianceLocation = 5.857933154483459;  // log(350)
inline constexpr double kLogVarianceScale = 0.6;

/// Active-arm variances are lognormal and sorted ascending; V₀ is half (low)
/// or four times (high) their mean. τ is scaled so that τᵀ Σ_NA⁻¹ τ = κ,
/// with Σ_NA the covariance at the continuous Neyman allocation for N.
/// Variances are drawn before τ̃, so cells differing only in (shape, κ) share
/// variance draws under the same generator state.
inline Dgp draw_dgp(int k, V0Regime regime, TauShape shape, double kappa, int n_total, std::mt19937_64& rng) {
  if (k < 1) throw InvalidArgument("K must be at least 1");
  if (n_total < 1) throw InvalidArgument("N must be positive");
  validate_signal(shape, kappa);
  std::lognormal_distribution<double> lognormal(kLogVarianceLocation, kLogVarianceScale);
  std::vector<double> active(static_cast<std::size_t>(k));
  for (auto& x : active) x = lognormal(rng);
  std::sort(active.begin(), active.end());

  Dgp d;
  d.v.resize(k + 1);
  double mean = 0.0;
  for (int i = 0; i < k; ++i) {
    d.v(i + 1) = active[static_cast<std::size_t>(i)];
    mean += active[static_cast<std::size_t>(i)];
  }
  mean /= k;
  d.v(0) = (regime == V0Regime::Low ? 0.5 : 4.0) * mean;

  d.tau = Vector::Zero(k);
  if (shape == TauShape::Zero) return d;
  Vector raw(k);
  if (shape == TauShape::Dense) {
    std::uniform_real_distribution<double> unif(1.0, 2.0);
    for (int i = 0; i < k; ++i) raw(i) = unif(rng);
  } else {
    raw = Vector::Zero(k);
    raw(0) = 1.0;
  }
  const auto sigma_na = StructuredCovariance::from_allocation(neyman_allocation(k, n_total, d.v), d.v);
  d.tau = std::sqrt(kappa / sigma_na.inverse_quadratic(raw)) * raw;
  return d;
}

// Oracle tables -------------------------------------------------------------

struct OracleDraw {
  Dgp dgp;
  double neyman_share = 0.0;  // continuous n₀*/N
  ArmCounts neyman;           // rounded
  std::vector<std::pair<EstimatorKind, GreedyResult>> optimized;
};

struct OracleSummary {
  EstimatorKind kind = EstimatorKind::DiffInMeans;
  double delta_n0 = 0.0;  // mean (n₀ − n₀^Neyman)/N
  double delta_n1 = 0.0;
  double delta_nk = 0.0;
  double positive_n0_fraction = 0.0;  // share of draws with Δn₀ ≥ 0
  Vector mean_allocation;             // per arm, across draws
};

struct OracleTable {
  int k = 0;
  V0Regime regime = V0Regime::Low;
  TauShape shape = TauShape::Zero;
  double kappa = 0.0;
  int n_total = 0;
  double neyman_share = 0.0;
  Vector neyman_mean_allocation;
  std::vector<OracleSummary> rows;
  std::vector<OracleDraw> draws;
};

struct OracleOptions {
  std::vector<EstimatorKind> kinds{kShrinkers, kShrinkers + 3};
  int min_per_arm = 2;
  GreedySettings greedy;
};

/// Across-draw means of the oracle reallocation relative to rounded Neyman.
/// DiffInMeans, if requested, is the Neyman allocation itself (Δ = 0).
inline OracleTable oracle_table(int k, V0Regime regime, TauShape shape, double kappa, int n_total, int draws,
                                std::uint64_t seed, const OracleOptions& opts = {}) {
  if (draws < 1) throw InvalidArgument("draws must be at least 1");
  validate_signal(shape, kappa);
  OracleTable t{k, regime, shape, kappa, n_total, 0.0, Vector::Zero(k + 1), {}, {}};
  for (auto kind : opts.kinds) {
    t.rows.push_back({kind, 0.0, 0.0, 0.0, 0.0, Vector::Zero(k + 1)});
  }
  for (int d = 0; d < draws; ++d) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(d)));
    OracleDraw od;
    od.dgp = draw_dgp(k, regime, shape, kappa, n_total, rng);
    const Vector cont = neyman_allocation(k, n_total, od.dgp.v);
    od.neyman_share = cont(0) / n_total;
    od.neyman = round_allocation(cont, n_total, opts.min_per_arm);
    t.neyman_share += od.neyman_share / draws;
    for (int a = 0; a <= k; ++a) t.neyman_mean_allocation(a) += od.neyman[static_cast<std::size_t>(a)] / double(draws);

    for (std::size_t r = 0; r < opts.kinds.size(); ++r) {
      const EstimatorKind kind = opts.kinds[r];
      GreedyResult g;
      if (kind == EstimatorKind::DiffInMeans) {
        g.alloc = od.neyman;
      } else {
        DesignProblem p{k, n_total, od.dgp.v, od.dgp.tau, kind, opts.min_per_arm};
        GreedySettings gs = opts.greedy;
        gs.start.reset();
        g = greedy_minimize(p, gs);
      }
      auto& row = t.rows[r];
      const double d0 = g.alloc[0] - od.neyman[0];
      row.delta_n0 += d0 / n_total / draws;
      row.delta_n1 += (g.alloc[1] - od.neyman[1]) / double(n_total) / draws;
      row.delta_nk += (g.alloc[static_cast<std::size_t>(k)] - od.neyman[static_cast<std::size_t>(k)]) /
                      double(n_total) / draws;
      row.positive_n0_fraction += (d0 >= 0 ? 1.0 : 0.0) / draws;
      for (int a = 0; a <= k; ++a) row.mean_allocation(a) += g.alloc[static_cast<std::size_t>(a)] / double(draws);
      od.optimized.emplace_back(kind, std::move(g));
    }
    t.draws.push_back(std::move(od));
  }
  return t;
}

// Adaptive simulations ------------------------------------------------------

struct AllocatorSpec {
  std::string label;
  Target target = Target::CompleteRandomization;
};

struct SimConfig {
  int k = 6;
  int n_total = 2000;
  int iterations = 200;
  std::uint64_t seed = 1;
  V0Regime regime = V0Regime::High;
  TauShape shape = TauShape::Zero;
  double kappa = 0.0;
  double mu0 = 0.0;
  std::vector<AllocatorSpec> allocators;
  std::vector<EstimatorKind> estimators;
  int burn_in_per_arm = 10;
  double variance_floor = 1e-8;
  QuadratureSettings quadrature;
  int metric_unit = 1000;  // unit at which the Table-3 style metrics start
  int threads = 1;
  /// Use these instead of drawing from the regime.
  std::optional<Dgp> fixed_dgp;

  void validate() const {
    if (k < 1) throw InvalidArgument("K must be at least 1");
    if (iterations < 1) throw InvalidArgument("iterations must be at least 1");
    if (allocators.empty()) throw InvalidArgument("no allocators configured");
    if (estimators.empty()) throw InvalidArgument("no estimators to score");
    if (threads < 1) throw InvalidArgument("threads must be at least 1");
    if (metric_unit < 1) throw InvalidArgument("metric unit must be positive");
    if (burn_in_per_arm < 2) throw InvalidArgument("burnInPerArm must be at least 2");
    if (n_total < (k + 1) * burn_in_per_arm) throw InvalidArgument("N is shorter than the burn-in");
    if (!std::isfinite(mu0)) throw InvalidArgument("mu0 must be finite");
    if (fixed_dgp) {
      if (fixed_dgp->v.size() != k + 1 || fixed_dgp->tau.size() != k) {
        throw InvalidArgument("fixed DGP has the wrong dimensions");
      }
      if ((fixed_dgp->v.array() <= 0.0).any()) throw InvalidArgument("fixed DGP variances must be positive");
    } else {
      validate_signal(shape, kappa);
    }
    for (auto e : estimators) {
      if (is_shrinker(e) && k < 3) throw InvalidArgument("shrinkers need K >= 3");
    }
    for (const auto& a : allocators) trial_config(a).validate();
  }

  TrialConfig trial_config(const AllocatorSpec& a) const {
    TrialConfig c;
    c.k = k;
    c.target = a.target;
    c.burn_in_per_arm = burn_in_per_arm;
    c.n_planned = n_total;
    c.variance_floor = variance_floor;
    c.quadrature = quadrature;
    return c;
  }
};

/// One iteration: trajectories[allocator][estimator][unit], plus final counts.
struct IterationResult {
  std::vector<std::vector<std::vector<double>>> trajectories;
  std::vector<ArmCounts> final_counts;
};

inline Dgp experiment_dgp(const SimConfig& c) {
  if (c.fixed_dgp) return *c.fixed_dgp;
  std::mt19937_64 rng(derive_seed(c.seed, 0));
  return draw_dgp(c.k, c.regime, c.shape, c.kappa, c.n_total, rng);
}

/// Potential outcomes Y_i ~ N(μ, diag V) for i = 1..N, shared by every
/// allocator in the iteration.
inline Matrix draw_potential_outcomes(const SimConfig& c, const Dgp& dgp, int iteration) {
  std::mt19937_64 rng(derive_seed(c.seed, static_cast<std::uint64_t>(iteration) + 1));
  std::normal_distribution<double> z;
  const int arms = c.k + 1;
  Vector mu(arms);
  mu(0) = c.mu0;
  mu.tail(c.k) = c.mu0 + dgp.tau.array();
  const Vector sd = dgp.v.array().sqrt();
  Matrix y(c.n_total, arms);
  for (int i = 0; i < c.n_total; ++i) {
    for (int a = 0; a < arms; ++a) y(i, a) = mu(a) + sd(a) * z(rng);
  }
  return y;
}

inline IterationResult run_iteration(const SimConfig& c, const Dgp& dgp, int iteration) {
  const Matrix y = draw_potential_outcomes(c, dgp, iteration);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  IterationResult out;
  for (const auto& alloc : c.allocators) {
    const TrialConfig tc = c.trial_config(alloc);
    TrialState state(c.k);
    std::vector<std::vector<double>> series(c.estimators.size(), std::vector<double>(static_cast<std::size_t>(c.n_total), nan));
    for (int i = 0; i < c.n_total; ++i) {
      const int arm = next_assignment(state, tc);
      state.record_outcome(arm, y(i, arm));
      if (state.min_count() < 2) continue;
      const Vector tau_hat = diff_in_means(state.means());
      const CovarianceSummary sigma(build_covariance(state.counts(), state.variances(c.variance_floor)));
      for (std::size_t e = 0; e < c.estimators.size(); ++e) {
        try {
          series[e][static_cast<std::size_t>(i)] = (estimate(c.estimators[e], tau_hat, sigma) - dgp.tau).squaredNorm();
        } catch (const ZeroContrastError&) {
          // Leave NaN; τ̂ = 0 exactly has probability zero under continuous outcomes.
        }
      }
    }
    out.trajectories.push_back(std::move(series));
    out.final_counts.push_back(state.counts());
  }
  return out;
}

struct Series {
  std::string allocator;
  Target target = Target::CompleteRandomization;
  EstimatorKind estimator = EstimatorKind::DiffInMeans;
  std::vector<double> mean;  // mean compound MSE per unit (index i = unit i+1)
  std::optional<double> mse_at;        // unit metric_unit
  std::optional<double> mean_mse_from; // units metric_unit..N
};

struct TrajectoryResult {
  Dgp dgp;
  int iterations = 0;
  int metric_unit = 1000;
  std::vector<Series> series;  // allocator-major, estimator-minor
  std::vector<Vector> mean_final_counts;  // per allocator

  const Series& find(const std::string& allocator, EstimatorKind estimator) const {
    for (const auto& s : series) {
      if (s.allocator == allocator && s.estimator == estimator) return s;
    }
    throw InvalidArgument("no series for allocator '" + allocator + "' and estimator " + std::string(to_string(estimator)));
  }
};

/// Averages compound-MSE trajectories over iterations. Iterations run in
/// blocks of `threads` and are summed in index order, so the output does not
/// depend on the thread count.
inline TrajectoryResult run_experiment(const SimConfig& c) {
  c.validate();
  TrajectoryResult res;
  res.dgp = experiment_dgp(c);
  res.iterations = c.iterations;
  res.metric_unit = c.metric_unit;
  const std::size_t na = c.allocators.size();
  const std::size_t ne = c.estimators.size();
  const auto n = static_cast<std::size_t>(c.n_total);

  std::vector<std::vector<std::vector<double>>> sum(na, std::vector<std::vector<double>>(ne, std::vector<double>(n, 0.0)));
  std::vector<Vector> counts(na, Vector::Zero(c.k + 1));

  auto merge = [&](const IterationResult& r) {
    for (std::size_t a = 0; a < na; ++a) {
      for (std::size_t e = 0; e < ne; ++e) {
        for (std::size_t i = 0; i < n; ++i) sum[a][e][i] += r.trajectories[a][e][i];
      }
      for (int arm = 0; arm <= c.k; ++arm) counts[a](arm) += r.final_counts[a][static_cast<std::size_t>(arm)];
    }
  };

  const int block = std::min(c.threads, c.iterations);
  std::vector<IterationResult> results(static_cast<std::size_t>(block));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(block));
  for (int start = 0; start < c.iterations; start += block) {
    const int count = std::min(block, c.iterations - start);
    if (count == 1) {
      results[0] = run_iteration(c, res.dgp, start);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < count; ++w) {
        pool.emplace_back([&, w] {
          try {
            results[static_cast<std::size_t>(w)] = run_iteration(c, res.dgp, start + w);
          } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    for (int w = 0; w < count; ++w) merge(results[static_cast<std::size_t>(w)]);
  }

  const auto first = static_cast<std::size_t>(c.metric_unit - 1);
  for (std::size_t a = 0; a < na; ++a) {
    res.mean_final_counts.push_back(counts[a] / c.iterations);
    for (std::size_t e = 0; e < ne; ++e) {
      Series s;
      s.allocator = c.allocators[a].label;
      s.target = c.allocators[a].target;
      s.estimator = c.estimators[e];
      s.mean = std::move(sum[a][e]);
      for (auto& x : s.mean) x /= c.iterations;
      if (first < n) {
        s.mse_at = s.mean[first];
        double acc = 0.0;
        for (std::size_t i = first; i < n; ++i) acc += s.mean[i];
        s.mean_mse_from = acc / static_cast<double>(n - first);
      }
      res.series.push_back(std::move(s));
    }
  }
  return res;
}

/// The allocators of the paper's summary table: complete randomization,
/// sequential Neyman, and risk minimization for each shrinker.
inline std::vector<AllocatorSpec> standard_allocators() {
  return {{"CR", Target::CompleteRandomization},
          {"Neyman", Target::Neyman},
          {"Bock", Target::Bock},
          {"SURE-min", Target::SureMin},
          {"Dimmery", Target::Dimmery}};
}

}  // namespace shrinkalloc

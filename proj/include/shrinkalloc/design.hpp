#pragma once

// Oracle designs: modified Neyman allocation, integer rounding, greedy
// single-unit swapping against an exact risk, and tr(Σ²) gradients.

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/quadform.hpp"
#include "shrinkalloc/risk.hpp"
#include "shrinkalloc/types.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace shrinkalloc {

struct DesignProblem {
  int k = 0;
  int n_total = 0;
  ArmVariances v;
  EffectVector tau;
  EstimatorKind kind = EstimatorKind::DiffInMeans;
  int min_per_arm = 2;

  void validate() const {
    if (k < 1) throw InvalidArgument("need at least one active arm");
    if (v.size() != k + 1) throw InvalidArgument("variance vector must have K + 1 entries");
    if (tau.size() != k) throw InvalidArgument("effect vector must have K entries");
    if ((v.array() <= 0.0).any() || !v.allFinite()) throw InvalidArgument("variances must be positive");
    if (min_per_arm < 1) throw InvalidArgument("minPerArm must be at least 1");
    if (n_total < (k + 1) * min_per_arm) {
      throw InvalidArgument("budget N = " + std::to_string(n_total) + " is below (K+1)·minPerArm = " +
                            std::to_string((k + 1) * min_per_arm));
    }
    if (is_shrinker(kind) && k < 3) throw InvalidArgument("shrinker designs need K >= 3");
  }
};

/// Continuous risk-minimizing allocation for difference-in-means:
/// n₀ ∝ √(K V₀), n_k ∝ √V_k.
inline Vector neyman_allocation(int k, double n_total, const ArmVariances& v) {
  if (v.size() != k + 1) throw InvalidArgument("variance vector must have K + 1 entries");
  if ((v.array() <= 0.0).any()) throw InvalidArgument("variances must be positive");
  if (!(n_total > 0.0)) throw InvalidArgument("budget must be positive");
  Vector w = v.array().sqrt();
  w(0) = std::sqrt(k * v(0));
  return n_total * w / w.sum();
}

/// Largest-remainder rounding to integers summing to N, then arms under the
/// floor are topped up from the arm with the most units above it. Ties go to
/// the lowest index.
inline ArmCounts round_allocation(const Vector& continuous, int n_total, int min_per_arm = 2) {
  const auto arms = static_cast<std::size_t>(continuous.size());
  if (arms == 0) throw InvalidArgument("empty allocation");
  if ((continuous.array() < 0.0).any() || !continuous.allFinite()) {
    throw InvalidArgument("continuous allocation must be finite and nonnegative");
  }
  if (static_cast<long>(arms) * min_per_arm > n_total) throw InvalidArgument("minPerArm infeasible for budget");
  if (std::abs(continuous.sum() - n_total) > 1e-6 * std::max(1, n_total)) {
    throw InvalidArgument("continuous allocation does not sum to N");
  }

  ArmCounts out(arms);
  std::vector<double> frac(arms);
  long assigned = 0;
  for (std::size_t i = 0; i < arms; ++i) {
    const double f = std::floor(continuous(static_cast<Eigen::Index>(i)));
    out[i] = static_cast<int>(f);
    frac[i] = continuous(static_cast<Eigen::Index>(i)) - f;
    assigned += out[i];
  }
  std::vector<std::size_t> order(arms);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  long remaining = n_total - assigned;
  if (remaining < 0) throw InvalidArgument("continuous allocation exceeds N");
  for (std::size_t j = 0; remaining > 0; j = (j + 1) % arms, --remaining) ++out[order[j]];

  for (std::size_t i = 0; i < arms; ++i) {
    while (out[i] < min_per_arm) {
      std::size_t donor = arms;
      for (std::size_t j = 0; j < arms; ++j) {
        if (j == i || out[j] <= min_per_arm) continue;
        if (donor == arms || out[j] > out[donor]) donor = j;
      }
      if (donor == arms) throw InvalidArgument("minPerArm infeasible for budget");
      --out[donor];
      ++out[i];
    }
  }
  return out;
}

/// Gradient of tr(Σ²) with respect to (n₀, …, n_K), treating n as continuous.
inline Vector trsigsq_gradient(const ArmCounts& n, const ArmVariances& v) {
  const auto s = build_covariance(n, v);  // validates
  const int k = s.dim();
  const double c = s.off();
  const Vector& d = s.diag_part();
  Vector g(k + 1);
  g(0) = -2.0 * v(0) / (double(n[0]) * n[0]) * (double(k) * k * c + d.sum());
  for (int i = 1; i <= k; ++i) {
    const double ni = n[static_cast<std::size_t>(i)];
    g(i) = -2.0 * v(i) / (ni * ni) * (c + d(i - 1));
  }
  return g;
}

struct GreedyStep {
  int iteration = 0;
  int from = 0;  // arm losing a unit
  int to = 0;    // arm gaining a unit
  double risk = 0.0;
};

struct GreedySettings {
  QuadratureSettings quadrature;
  /// Start here instead of the rounded Neyman allocation.
  std::optional<ArmCounts> start;
  int max_iterations = 1'000'000;
  int threads = 1;
};

struct GreedyResult {
  ArmCounts alloc;
  double risk = 0.0;
  double start_risk = 0.0;
  std::vector<GreedyStep> trace;
  bool hit_iteration_cap = false;
};

inline double design_risk(const DesignProblem& p, const ArmCounts& n, const QuadratureSettings& settings = {}) {
  return risk_exact(p.kind, CovarianceSummary(build_covariance(n, p.v)), p.tau, settings);
}

/// Greedy swapping: from the current allocation, evaluate every ordered
/// single-unit move (from, to) that keeps all arms at or above minPerArm,
/// move to the strict minimizer, and stop when nothing improves. Equal-risk
/// candidates resolve to the lexicographically smallest (from, to).
inline GreedyResult greedy_minimize(const DesignProblem& p, const GreedySettings& settings = {}) {
  p.validate();
  settings.quadrature.validate();
  const int arms = p.k + 1;

  GreedyResult result;
  if (settings.start) {
    result.alloc = *settings.start;
    if (static_cast<int>(result.alloc.size()) != arms) throw InvalidArgument("start allocation has wrong length");
    if (std::accumulate(result.alloc.begin(), result.alloc.end(), 0L) != p.n_total) {
      throw InvalidArgument("start allocation does not sum to N");
    }
    for (int x : result.alloc) {
      if (x < p.min_per_arm) throw InvalidArgument("start allocation violates minPerArm");
    }
  } else {
    result.alloc = round_allocation(neyman_allocation(p.k, p.n_total, p.v), p.n_total, p.min_per_arm);
  }
  result.risk = design_risk(p, result.alloc, settings.quadrature);
  result.start_risk = result.risk;

  std::vector<std::pair<int, int>> moves;
  std::vector<double> risks;
  for (int it = 1; it <= settings.max_iterations; ++it) {
    moves.clear();
    for (int from = 0; from < arms; ++from) {
      if (result.alloc[static_cast<std::size_t>(from)] <= p.min_per_arm) continue;
      for (int to = 0; to < arms; ++to) {
        if (to != from) moves.emplace_back(from, to);
      }
    }
    risks.assign(moves.size(), std::numeric_limits<double>::infinity());
    auto eval = [&](std::size_t m) {
      ArmCounts cand = result.alloc;
      --cand[static_cast<std::size_t>(moves[m].first)];
      ++cand[static_cast<std::size_t>(moves[m].second)];
      risks[m] = design_risk(p, cand, settings.quadrature);
    };
    const int workers = std::max(1, std::min<int>(settings.threads, static_cast<int>(moves.size())));
    if (workers == 1) {
      for (std::size_t m = 0; m < moves.size(); ++m) eval(m);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t m = static_cast<std::size_t>(w); m < moves.size(); m += static_cast<std::size_t>(workers)) {
              eval(m);
            }
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

    // Moves are generated in lexicographic order, so a strict < keeps the
    // smallest pair among ties.
    std::size_t best = moves.size();
    double best_risk = result.risk;
    for (std::size_t m = 0; m < moves.size(); ++m) {
      if (risks[m] < best_risk) {
        best_risk = risks[m];
        best = m;
      }
    }
    if (best == moves.size()) return result;
    --result.alloc[static_cast<std::size_t>(moves[best].first)];
    ++result.alloc[static_cast<std::size_t>(moves[best].second)];
    result.risk = best_risk;
    result.trace.push_back({it, moves[best].first, moves[best].second, best_risk});
  }
  result.hit_iteration_cap = true;
  return result;
}

inline nlohmann::json to_json(const GreedyStep& s) {
  return {{"iteration", s.iteration}, {"swap", {{"from", s.from}, {"to", s.to}}}, {"risk", s.risk}};
}

/// One JSON object per line: {"iteration", "swap": {"from", "to"}, "risk"}.
inline void write_trace_jsonl(std::ostream& out, const std::vector<GreedyStep>& trace) {
  for (const auto& s : trace) out << to_json(s).dump() << '\n';
}

}  // namespace shrinkalloc

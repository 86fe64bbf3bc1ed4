#pragma once

// Sequential adaptive assignment. After a balanced burn-in, each arrival goes
// to the arm whose extra unit minimizes the estimated risk of the target
// estimator, with (V, τ) replaced by their running estimates.

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/design.hpp"
#include "shrinkalloc/estimators.hpp"
#include "shrinkalloc/quadform.hpp"
#include "shrinkalloc/random.hpp"
#include "shrinkalloc/risk.hpp"
#include "shrinkalloc/types.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace shrinkalloc {

/// What the assignment rule optimizes. The first two are baselines that
/// ignore shrinkage.
enum class Target { CompleteRandomization, Neyman, DiffInMeans, Bock, SureMin, Dimmery };

inline constexpr Target kAllTargets[] = {Target::CompleteRandomization, Target::Neyman, Target::DiffInMeans,
                                         Target::Bock, Target::SureMin, Target::Dimmery};

inline std::string to_string(Target t) {
  switch (t) {
    case Target::CompleteRandomization: return "complete_randomization";
    case Target::Neyman: return "neyman";
    case Target::DiffInMeans: return "diff_in_means";
    case Target::Bock: return "bock";
    case Target::SureMin: return "sure_min";
    case Target::Dimmery: return "dimmery";
  }
  return "unknown";
}

/// Accepts the snake_case names and their CamelCase spellings (SureMin).
inline Target parse_target(const std::string& s) {
  for (auto t : kAllTargets) {
    const std::string name = to_string(t);
    std::string camel;
    bool up = true;
    for (char ch : name) {
      if (ch == '_') {
        up = true;
        continue;
      }
      camel += up ? static_cast<char>(std::toupper(static_cast<unsigned char>(ch))) : ch;
      up = false;
    }
    if (s == name || s == camel) return t;
  }
  throw InvalidArgument("unknown target '" + s + "'");
}

/// Risk minimized by the rule, or nothing for the baselines.
inline std::optional<EstimatorKind> risk_kind(Target t) {
  switch (t) {
    case Target::DiffInMeans: return EstimatorKind::DiffInMeans;
    case Target::Bock: return EstimatorKind::Bock;
    case Target::SureMin: return EstimatorKind::SureMin;
    case Target::Dimmery: return EstimatorKind::Dimmery;
    default: return std::nullopt;
  }
}

/// Estimator reported for a target; baselines use difference-in-means.
inline EstimatorKind scoring_kind(Target t) { return risk_kind(t).value_or(EstimatorKind::DiffInMeans); }

inline Target target_for(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::DiffInMeans: return Target::DiffInMeans;
    case EstimatorKind::Bock: return Target::Bock;
    case EstimatorKind::SureMin: return Target::SureMin;
    case EstimatorKind::Dimmery: return Target::Dimmery;
  }
  return Target::DiffInMeans;
}

enum class BurnInMode { RoundRobin, UniformRandom };

/// Adaptive phase requested before the statistics it needs exist.
class PhaseError : public Error {
 public:
  using Error::Error;
};

struct TrialConfig {
  int k = 0;
  Target target = Target::SureMin;
  int burn_in_per_arm = 10;
  std::optional<long> n_planned;
  double variance_floor = 1e-8;
  QuadratureSettings quadrature;
  BurnInMode burn_in_mode = BurnInMode::RoundRobin;
  std::uint64_t seed = 0;  // uniform-random burn-in only

  int arms() const { return k + 1; }

  void validate() const {
    if (k < 1) throw InvalidArgument("K must be at least 1");
    if (burn_in_per_arm < 2) throw InvalidArgument("burnInPerArm must be at least 2");
    if (risk_kind(target) && is_shrinker(*risk_kind(target)) && k < 3) {
      throw InvalidArgument("shrinker targets need K >= 3");
    }
    if (!(variance_floor > 0.0) || !std::isfinite(variance_floor)) {
      throw InvalidArgument("varianceFloor must be positive");
    }
    if (n_planned && *n_planned < static_cast<long>(arms()) * burn_in_per_arm) {
      throw InvalidArgument("planned N is shorter than the burn-in");
    }
    quadrature.validate();
  }
};

/// Welford running mean and sum of squared deviations.
struct ArmStats {
  long n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double y) {
    ++n;
    const double delta = y - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (y - mean);
  }

  /// Sample variance, floored; the floor also stands in when n < 2.
  double variance(double floor) const {
    if (n < 2) return floor;
    return std::max(floor, m2 / static_cast<double>(n - 1));
  }
};

struct TrialEvent {
  long i = 0;  // 1-based arrival index
  int arm = 0;
  double y = 0.0;
  bool deviation = false;  // operator overrode the recommended arm
};

class TrialState {
 public:
  explicit TrialState(int k) : arms_(static_cast<std::size_t>(k + 1)) {
    if (k < 1) throw InvalidArgument("K must be at least 1");
  }

  int k() const { return static_cast<int>(arms_.size()) - 1; }
  long arrivals() const { return static_cast<long>(events_.size()); }
  const std::vector<ArmStats>& arms() const { return arms_; }
  const std::vector<TrialEvent>& events() const { return events_; }

  ArmCounts counts() const {
    ArmCounts out;
    out.reserve(arms_.size());
    for (const auto& a : arms_) out.push_back(static_cast<int>(a.n));
    return out;
  }

  Vector means() const {
    Vector out(static_cast<Eigen::Index>(arms_.size()));
    for (std::size_t i = 0; i < arms_.size(); ++i) out(static_cast<Eigen::Index>(i)) = arms_[i].mean;
    return out;
  }

  ArmVariances variances(double floor) const {
    ArmVariances out(static_cast<Eigen::Index>(arms_.size()));
    for (std::size_t i = 0; i < arms_.size(); ++i) out(static_cast<Eigen::Index>(i)) = arms_[i].variance(floor);
    return out;
  }

  long min_count() const {
    long m = arms_.front().n;
    for (const auto& a : arms_) m = std::min(m, a.n);
    return m;
  }

  const TrialEvent& record_outcome(int arm, double y, bool deviation = false) {
    if (arm < 0 || arm > k()) throw InvalidArgument("arm " + std::to_string(arm) + " out of range");
    if (!std::isfinite(y)) throw InvalidArgument("outcome must be finite");
    arms_[static_cast<std::size_t>(arm)].add(y);
    events_.push_back({arrivals() + 1, arm, y, deviation});
    return events_.back();
  }

 private:
  std::vector<ArmStats> arms_;
  std::vector<TrialEvent> events_;
};

namespace detail {

inline int uniform_arm(std::uint64_t seed, long i, int arms) {
  const std::uint64_t x = derive_seed(seed, static_cast<std::uint64_t>(i));
  return static_cast<int>((static_cast<unsigned __int128>(x) * static_cast<unsigned>(arms)) >> 64);
}

inline int lowest_count_arm(const ArmCounts& n) {
  return static_cast<int>(std::min_element(n.begin(), n.end()) - n.begin());
}

/// Arm for arrival i (1-based) while in burn-in, given counts so far.
inline int burn_in_arm(const TrialConfig& c, long i, const ArmCounts& counts) {
  const long planned = static_cast<long>(c.arms()) * c.burn_in_per_arm;
  if (i > planned) return lowest_count_arm(counts);  // catch-up after overrides
  if (c.burn_in_mode == BurnInMode::RoundRobin) return static_cast<int>((i - 1) % c.arms());
  return uniform_arm(c.seed, i, c.arms());
}

}  // namespace detail

/// Burn-in lasts (K+1)·burnInPerArm arrivals and then until every arm has
/// burnInPerArm observations.
inline bool in_burn_in(const TrialState& s, const TrialConfig& c) {
  return s.arrivals() < static_cast<long>(c.arms()) * c.burn_in_per_arm || s.min_count() < c.burn_in_per_arm;
}

/// The burn-in order when every recommendation is followed.
inline std::vector<int> burn_in_schedule(const TrialConfig& c) {
  c.validate();
  std::vector<int> out;
  ArmCounts counts(static_cast<std::size_t>(c.arms()), 0);
  auto done = [&] {
    return static_cast<long>(out.size()) >= static_cast<long>(c.arms()) * c.burn_in_per_arm &&
           *std::min_element(counts.begin(), counts.end()) >= c.burn_in_per_arm;
  };
  while (!done()) {
    const int arm = detail::burn_in_arm(c, static_cast<long>(out.size()) + 1, counts);
    ++counts[static_cast<std::size_t>(arm)];
    out.push_back(arm);
  }
  return out;
}

struct TrialSnapshot {
  ArmCounts counts;
  Vector means;
  ArmVariances v_hat;
  Vector tau_hat;
  StructuredCovariance sigma;
  /// Risk after giving the next unit to arm k, k = 0..K. Baseline targets
  /// report difference-in-means risk.
  Vector candidate_risks;
  EstimatorKind scored_with = EstimatorKind::DiffInMeans;
};

inline TrialSnapshot snapshot(const TrialState& s, const TrialConfig& c) {
  if (s.k() != c.k) throw InvalidArgument("state and config disagree on K");
  if (s.min_count() < 2) throw PhaseError("adaptive phase needs at least 2 observations on every arm");
  const ArmCounts n = s.counts();
  const ArmVariances v = s.variances(c.variance_floor);
  const Vector means = s.means();
  const Vector tau = diff_in_means(means);
  const EstimatorKind kind = scoring_kind(c.target);
  Vector risks(c.arms());
  for (int arm = 0; arm < c.arms(); ++arm) {
    ArmCounts plus = n;
    ++plus[static_cast<std::size_t>(arm)];
    risks(arm) = risk_exact(kind, CovarianceSummary(build_covariance(plus, v)), tau, c.quadrature);
  }
  return {n, means, v, tau, build_covariance(n, v), risks, kind};
}

/// Lowest index among the minimal entries.
inline int argmin_lowest(const Vector& x) {
  int best = 0;
  for (int i = 1; i < x.size(); ++i) {
    if (x(i) < x(best)) best = i;
  }
  return best;
}

inline int next_assignment(const TrialState& s, const TrialConfig& c) {
  if (s.k() != c.k) throw InvalidArgument("state and config disagree on K");
  const long i = s.arrivals() + 1;
  if (in_burn_in(s, c)) return detail::burn_in_arm(c, i, s.counts());
  switch (c.target) {
    case Target::CompleteRandomization:
      if (c.burn_in_mode == BurnInMode::RoundRobin) return static_cast<int>((i - 1) % c.arms());
      return detail::uniform_arm(c.seed, i, c.arms());
    case Target::Neyman: {
      if (s.min_count() < 2) throw PhaseError("adaptive phase needs at least 2 observations on every arm");
      const Vector goal = neyman_allocation(c.k, static_cast<double>(i), s.variances(c.variance_floor));
      const ArmCounts n = s.counts();
      Vector deficit(c.arms());
      for (int a = 0; a < c.arms(); ++a) deficit(a) = n[static_cast<std::size_t>(a)] - goal(a);
      return argmin_lowest(deficit);  // largest shortfall
    }
    default:
      return argmin_lowest(snapshot(s, c).candidate_risks);
  }
}

inline TrialState replay(const TrialConfig& c, const std::vector<TrialEvent>& events) {
  TrialState s(c.k);
  for (const auto& e : events) {
    if (e.i != s.arrivals() + 1) {
      throw InvalidArgument("event log out of order at arrival " + std::to_string(e.i));
    }
    s.record_outcome(e.arm, e.y, e.deviation);
  }
  return s;
}

/// SURE of the scored estimator after each arrival, once every arm has two
/// observations; empty where undefined.
inline std::vector<std::optional<double>> sure_trajectory(const TrialState& s, const TrialConfig& c) {
  const EstimatorKind kind = scoring_kind(c.target);
  std::vector<std::optional<double>> out;
  out.reserve(s.events().size());
  TrialState run(c.k);
  for (const auto& e : s.events()) {
    run.record_outcome(e.arm, e.y, e.deviation);
    if (run.min_count() < 2) {
      out.emplace_back();
      continue;
    }
    const CovarianceSummary sigma(build_covariance(run.counts(), run.variances(c.variance_floor)));
    try {
      out.emplace_back(sure_value(kind, diff_in_means(run.means()), sigma));
    } catch (const ZeroContrastError&) {
      out.emplace_back();
    }
  }
  return out;
}

// JSON ---------------------------------------------------------------------

inline std::string to_string(BurnInMode m) {
  return m == BurnInMode::RoundRobin ? "round_robin" : "uniform_random";
}

inline BurnInMode parse_burn_in_mode(const std::string& s) {
  if (s == "round_robin") return BurnInMode::RoundRobin;
  if (s == "uniform_random") return BurnInMode::UniformRandom;
  throw InvalidArgument("unknown burn-in mode '" + s + "'");
}

inline nlohmann::json to_json(const TrialEvent& e) {
  nlohmann::json j = {{"i", e.i}, {"arm", e.arm}, {"y", e.y}};
  if (e.deviation) j["deviation"] = true;
  return j;
}

inline TrialEvent event_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("event must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "i" && key != "arm" && key != "y" && key != "deviation") {
      throw InvalidArgument("unknown event field '" + key + "'");
    }
  }
  try {
    TrialEvent e;
    e.i = j.at("i").get<long>();
    e.arm = j.at("arm").get<int>();
    e.y = j.at("y").get<double>();
    e.deviation = j.value("deviation", false);
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidArgument(std::string("malformed event: ") + ex.what());
  }
}

inline void write_events_jsonl(std::ostream& out, const std::vector<TrialEvent>& events) {
  for (const auto& e : events) out << to_json(e).dump() << '\n';
}

inline std::vector<TrialEvent> read_events_jsonl(std::istream& in) {
  std::vector<TrialEvent> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(event_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& ex) {
      throw InvalidArgument(std::string("malformed event line: ") + ex.what());
    }
  }
  return out;
}

inline nlohmann::json to_json(const QuadratureSettings& q) {
  return {{"absTol", q.abs_tol}, {"relTol", q.rel_tol}, {"maxPanels", q.max_panels}};
}

inline nlohmann::json to_json(const TrialConfig& c) {
  nlohmann::json j = {{"K", c.k},
                      {"kind", to_string(c.target)},
                      {"burnInPerArm", c.burn_in_per_arm},
                      {"varianceFloor", c.variance_floor},
                      {"burnInMode", to_string(c.burn_in_mode)},
                      {"seed", c.seed},
                      {"quadrature", to_json(c.quadrature)}};
  if (c.n_planned) j["N"] = *c.n_planned;
  return j;
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw InvalidArgument("unknown field '" + key + "' in " + where);
    }
  }
}

}  // namespace detail

inline QuadratureSettings quadrature_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"absTol", "relTol", "maxPanels"}, "quadrature");
  QuadratureSettings q;
  try {
    q.abs_tol = j.value("absTol", q.abs_tol);
    q.rel_tol = j.value("relTol", q.rel_tol);
    q.max_panels = j.value("maxPanels", q.max_panels);
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidArgument(std::string("quadrature: ") + ex.what());
  }
  q.validate();
  return q;
}

/// Parses and validates; missing optional fields take their defaults.
inline TrialConfig trial_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"K", "kind", "burnInPerArm", "N", "varianceFloor", "burnInMode", "seed", "quadrature"}, "trial config");
  TrialConfig c;
  try {
    c.k = j.at("K").get<int>();
    c.target = parse_target(j.at("kind").get<std::string>());
    c.burn_in_per_arm = j.value("burnInPerArm", c.burn_in_per_arm);
    if (j.contains("N") && !j.at("N").is_null()) c.n_planned = j.at("N").get<long>();
    c.variance_floor = j.value("varianceFloor", c.variance_floor);
    if (j.contains("burnInMode")) c.burn_in_mode = parse_burn_in_mode(j.at("burnInMode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    if (j.contains("quadrature")) c.quadrature = quadrature_from_json(j.at("quadrature"));
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidArgument(std::string("trial config: ") + ex.what());
  }
  c.validate();
  return c;
}

}  // namespace shrinkalloc

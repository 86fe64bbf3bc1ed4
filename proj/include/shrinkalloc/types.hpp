#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace shrinkalloc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Units per arm. Index 0 is the control arm, 1..K the active arms.
using ArmCounts = std::vector<int>;

// Potential-outcome variances, same indexing as ArmCounts (length K+1).
using ArmVariances = Vector;

// Treatment effects versus control (length K, no control entry).
using EffectVector = Vector;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition (shape, sign, domain).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A numerical routine could not produce a trustworthy answer.
class NumericalError : public Error {
 public:
  using Error::Error;
};

enum class EstimatorKind { DiffInMeans, Bock, SureMin, Dimmery };

inline constexpr EstimatorKind kAllEstimators[] = {
    EstimatorKind::DiffInMeans, EstimatorKind::Bock, EstimatorKind::SureMin,
    EstimatorKind::Dimmery};

inline constexpr EstimatorKind kShrinkers[] = {
    EstimatorKind::Bock, EstimatorKind::SureMin, EstimatorKind::Dimmery};

inline bool is_shrinker(EstimatorKind kind) {
  return kind != EstimatorKind::DiffInMeans;
}

inline std::string_view to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::DiffInMeans: return "diff_in_means";
    case EstimatorKind::Bock: return "bock";
    case EstimatorKind::SureMin: return "sure_min";
    case EstimatorKind::Dimmery: return "dimmery";
  }
  return "unknown";
}

inline EstimatorKind parse_estimator_kind(std::string_view name) {
  if (name == "diff_in_means" || name == "dim") return EstimatorKind::DiffInMeans;
  if (name == "bock") return EstimatorKind::Bock;
  if (name == "sure_min" || name == "suremin") return EstimatorKind::SureMin;
  if (name == "dimmery") return EstimatorKind::Dimmery;
  throw InvalidArgument("unknown estimator kind: " + std::string(name));
}

}  // namespace shrinkalloc

#pragma once

#include <stdexcept>
#include <string>

namespace htmle {

// Error taxonomy mirrored by the CLI exit codes:
//   ConfigError -> 2, DataError -> 3, EstimationError (and children) -> 4.

// Invalid run configuration: bad option values, unknown estimator or learner
// names, fold counts exceeding the number of clusters, malformed config files.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Data that violates the schema or domain contracts: missing/NA fields,
// outcomes outside [0,1], non-binary exposure, E or A varying within a
// cluster, unknown columns, empty clusters, fewer than two clusters.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failures while estimating: rank-deficient designs, zero propensities,
// fluctuation breakdown, single-arm datasets.
struct EstimationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RankDeficiencyError : EstimationError {
  using EstimationError::EstimationError;
};

struct PositivityError : EstimationError {
  using EstimationError::EstimationError;
};

struct TargetingError : EstimationError {
  using EstimationError::EstimationError;
};

}  // namespace htmle

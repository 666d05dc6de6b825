#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "htmle/data.hpp"
#include "htmle/glm.hpp"

namespace htmle {

// Where a candidate regression lives. ClusterLevel learners see one row per
// cluster (response Y^c or A, unit weights); IndividualLevel learners pool
// one row per individual (response Y_ij or the cluster's A, weights alpha_ij).
enum class LearnerLevel { ClusterLevel, IndividualLevel };

// One candidate logistic regression in the library. Adjustment names resolve
// against the dataset schema:
//   - an E column name:   the cluster-level value (constant within cluster);
//   - a W column name:    the individual value at IndividualLevel, the
//                         within-cluster mean at ClusterLevel;
//   - "avg:<W column>":   the within-cluster mean at either level.
// Outcome-regression designs include the exposure unless include_exposure is
// false; propensity designs never include it.
struct LearnerSpec {
  LearnerLevel level = LearnerLevel::ClusterLevel;
  std::vector<std::string> adjustment;
  bool include_exposure = true;
  std::string label;

  std::string describe() const;
};

// What the regression predicts.
enum class SlResponse { Outcome, Exposure };

// Cross-validation losses; Cluster* score cluster-level predictions of Y^c
// (or A), Individual* score per-individual predictions with weights alpha_ij
// summed within cluster. cv risk = mean over validation clusters.
enum class SlLoss { ClusterNLL, IndividualNLL, ClusterMSE, IndividualMSE };

enum class SlMode { Convex, Discrete };

// Cluster-level V-fold assignment; clusters are never split across folds.
struct FoldAssignment {
  int V = 0;
  std::vector<int> fold_of_cluster;  // by cluster index, values in [0, V)
};

// Deterministic in (seed, cluster order); fold sizes differ by at most one.
// V outside [2, J] raises ConfigError. V = 0 selects the default:
// 10 when J >= 30, otherwise J (leave-one-cluster-out).
FoldAssignment make_folds(const HierarchicalDataset& d, int V,
                          std::uint64_t seed);

struct SlConfig {
  std::vector<LearnerSpec> library;
  SlLoss loss = SlLoss::ClusterNLL;
  int V = 0;  // 0 = default rule
  SlMode mode = SlMode::Convex;
};

// Predictions at both levels, probability scale, clipped to
// [1e-6, 1 - 1e-6]. ClusterLevel learners replicate their cluster value to
// members; IndividualLevel learners aggregate to cluster level by the
// alpha-weighted within-cluster sum.
struct SlPrediction {
  std::vector<double> cluster;                  // length J
  std::vector<std::vector<double>> individual;  // ragged, cluster x member
};

struct SuperLearnerFit {
  std::vector<LearnerSpec> library;
  SlResponse response = SlResponse::Outcome;
  SlLoss loss = SlLoss::ClusterNLL;
  SlMode mode = SlMode::Convex;
  FoldAssignment folds;
  std::vector<double> cv_risks;      // per learner, V-fold cross-validated
  std::vector<double> meta_weights;  // nonnegative, sums to 1
  double ensemble_cv_risk = 0.0;     // cv risk of the weighted combination
  std::vector<GlmFit> refit_learners;  // full-data refits, library order
  std::vector<std::string> diagnostics;  // fold fallback notes etc.
};

// Fits one learner on the clusters selected by cluster_mask (empty = all).
GlmFit fit_single_learner(const HierarchicalDataset& d, const LearnerSpec& spec,
                          SlResponse response,
                          const std::vector<bool>& cluster_mask = {},
                          const GlmOptions& options = {});

// Predictions from a fitted learner on the whole dataset; exposure_override
// (0/1) replaces the exposure column for counterfactual predictions and is
// ignored for propensity fits.
SlPrediction predict_single_learner(const GlmFit& fit,
                                    const HierarchicalDataset& d,
                                    const LearnerSpec& spec, SlResponse response,
                                    std::optional<int> exposure_override);

// V-fold cross-validated risk of one learner under the named loss.
double cv_risk(const LearnerSpec& learner, const HierarchicalDataset& d,
               const FoldAssignment& folds, SlLoss loss,
               SlResponse response = SlResponse::Outcome);

// Discrete or convex Super Learner over the library. Results are a pure
// function of (data, config, seed). Learner fits that fail on a training
// fold fall back to intercept-only and are recorded in diagnostics.
SuperLearnerFit fit_superlearner(const HierarchicalDataset& d,
                                 const SlConfig& config, std::uint64_t seed,
                                 SlResponse response = SlResponse::Outcome);

// Ensemble predictions from the full-data refits.
SlPrediction sl_predict(const SuperLearnerFit& fit, const HierarchicalDataset& d,
                        std::optional<int> exposure_override);

}  // namespace htmle

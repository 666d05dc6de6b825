#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "htmle/data.hpp"
#include "htmle/super_learner.hpp"

namespace htmle {

// Outcome-regression specification: a full Super Learner or one direct GLM.
struct QSpec {
  std::optional<SlConfig> sl;
  std::optional<LearnerSpec> single;

  static QSpec superlearner(SlConfig cfg) {
    QSpec q;
    q.sl = std::move(cfg);
    return q;
  }
  static QSpec glm(LearnerSpec spec) {
    QSpec q;
    q.single = std::move(spec);
    return q;
  }
};

// Propensity-score specification: a known randomization probability, known
// per-cluster probabilities, a direct GLM, or a Super Learner.
struct GSpec {
  std::optional<double> known;
  std::optional<std::vector<double>> known_per_cluster;
  std::optional<LearnerSpec> single;
  std::optional<SlConfig> sl;

  static GSpec known_value(double p) {
    GSpec g;
    g.known = p;
    return g;
  }
  static GSpec known_vector(std::vector<double> p) {
    GSpec g;
    g.known_per_cluster = std::move(p);
    return g;
  }
  static GSpec glm(LearnerSpec spec) {
    GSpec g;
    g.single = std::move(spec);
    return g;
  }
  static GSpec superlearner(SlConfig cfg) {
    GSpec g;
    g.sl = std::move(cfg);
    return g;
  }
};

struct TmleOptions {
  double g_truncation = 0.01;  // estimated propensities forced into
                               // [g_truncation, 1 - g_truncation]
  std::uint64_t seed = 1;      // drives fold assignment
};

enum class ModelKind { I, II };

// Fitted nuisance values. Cluster-level vectors are always filled (for the
// individual-level model they hold the alpha-weighted within-cluster
// reductions); the nested vectors are filled only by the individual-level
// model.
struct NuisanceEstimates {
  std::vector<double> qbar_obs, qbar_1, qbar_0;  // per cluster
  std::vector<double> g_1;                       // per cluster, truncated
  std::vector<std::vector<double>> i_qbar_obs, i_qbar_1, i_qbar_0;
  std::vector<std::vector<double>> i_g_1;
  double truncation_level = 0.01;
};

struct TmleDiagnostics {
  int g_truncated = 0;  // propensity values moved by truncation
  bool eps1_irls_converged = true, eps0_irls_converged = true;
  bool eps1_golden = false, eps0_golden = false;
  std::vector<double> q_meta_weights, g_meta_weights;
  std::vector<double> q_cv_risks, g_cv_risks;
  std::vector<std::string> notes;
};

struct CandidateRecord {
  std::string label;
  double cv_ic_variance = 0.0;
};

struct TmleResult {
  std::string estimator;
  ModelKind model = ModelKind::I;
  double psi_1 = 0.0, psi_0 = 0.0;
  double ate = 0.0;
  double risk_ratio = 0.0;
  double epsilon_1 = 0.0, epsilon_0 = 0.0;
  std::vector<double> ic_values;  // per-cluster IC of the ATE
  std::vector<double> ic_1, ic_0; // per-cluster arm-specific ICs
  double variance = 0.0;          // sample variance of ic_values / J
  double ci_low = 0.0, ci_high = 0.0;  // 95% Wald
  double p_value = 1.0;
  double rr_ci_low = 0.0, rr_ci_high = 0.0, rr_p_value = 1.0;
  TmleDiagnostics diagnostics;
  std::vector<CandidateRecord> selection;  // adaptive pre-specification only
  int selected_candidate = -1;
};

// Indicator-over-propensity clever covariate I(A=a)/g(a|...) for target arm
// a. Raises PositivityError on an untruncated zero propensity.
std::vector<double> clever_covariate(const std::vector<int>& exposure,
                                     const std::vector<double>& g1, int a);

struct FluctuationFit {
  double epsilon = 0.0;
  bool irls_converged = true;  // weighted score zeroed to 1e-8 by IRLS
  bool used_golden = false;    // fell back to golden-section search
};

// One-parameter logistic fluctuation: maximizes the weighted log likelihood
// of y on clever with offset logit(qbar) and no intercept. IRLS first; on
// failure, golden-section search over epsilon in [-10, 10]; a non-finite
// result raises TargetingError.
FluctuationFit fluctuate(const std::vector<double>& y,
                         const std::vector<double>& qbar,
                         const std::vector<double>& clever,
                         const std::vector<double>& weights);

// Efficient influence curve contributions, one value per cluster, for target
// arm a at the supplied parameter value psi.
std::vector<double> eic_cluster(const HierarchicalDataset& d,
                                const NuisanceEstimates& nuis, double psi,
                                int a);
std::vector<double> eic_individual(const HierarchicalDataset& d,
                                   const NuisanceEstimates& nuis, double psi,
                                   int a);

// Cluster-level TMLE: cluster-level outcome regression (any learner levels,
// reduced to cluster predictions), cluster-level propensity, one fluctuation
// per target arm, substitution estimates, IC-based Wald inference.
TmleResult tmle_cluster(const HierarchicalDataset& d, const QSpec& q,
                        const GSpec& g, const TmleOptions& options = {});

// Individual-level TMLE: pooled individual-level regressions, alpha-weighted
// pooled fluctuation, per-cluster collapsed IC.
TmleResult tmle_individual(const HierarchicalDataset& d, const QSpec& q,
                           const GSpec& g, const TmleOptions& options = {});

// Comparators, all with plug-in influence-curve inference holding nuisance
// fits fixed.
TmleResult unadjusted(const HierarchicalDataset& d);
TmleResult iptw(const HierarchicalDataset& d, const GSpec& g,
                const TmleOptions& options = {});
TmleResult gcomp(const HierarchicalDataset& d, const QSpec& q,
                 const TmleOptions& options = {});

// Adaptive pre-specification for trials with known randomization probability:
// for every candidate adjustment set (cluster-level column names), runs the
// cluster-level TMLE with collaborative logistic re-estimation of g on the
// candidate set, scores each candidate by a cross-validated IC variance
// estimate, and returns the full-data fit of the minimizer (ties broken by
// order).
TmleResult adaptive_prespec(const HierarchicalDataset& d,
                            const std::vector<std::vector<std::string>>& candidates,
                            double known_g, const TmleOptions& options = {});

}  // namespace htmle

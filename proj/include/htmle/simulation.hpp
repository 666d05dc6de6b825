#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "htmle/data.hpp"
#include "htmle/estimators.hpp"
#include "htmle/rng.hpp"

namespace htmle {

// Data-generating process for a two-arm hierarchical trial with J clusters.
// Cluster sizes are Gaussian (rounded, floored at 1). Each individual carries
// covariates W1 and W2 with corr(W1, W2) = w_corr; cluster-level aggregates
// W1c and W2c are their within-cluster means. The exposure is Bernoulli with
// probability expit(0.75 * W1c). Individual counterfactual outcomes are
// threshold indicators Y(a) = 1{U < p_a} with shared U across arms, where
//   covariate_interference = false:
//     p_a = expit(0.25 + 0.10 a + 0.15 W1c + 1.15 W1 + W2)
//   covariate_interference = true:
//     p_a = expit(0.25 + 0.10 a + 0.15 W1c + 0.25 W1 + W2c)
// U is iid uniform, or exchangeable within cluster via a Gaussian copula with
// correlation error_rho when error_dependence is true. Under null_effect both
// counterfactuals are drawn from the a = 0 surface.
//
// w_icc sets the within-cluster correlation of each covariate across members:
// every individual pair (W1, W2)_ij keeps mean 0, unit variances and
// corr(W1, W2) = w_corr regardless of w_icc, but members of the same cluster
// share a common component so that corr(W1_ij, W1_kj) = w_icc for i != k.
// At w_icc = 0 covariates are independent across individuals and the
// cluster aggregates shrink like 1/sqrt(N); at w_icc > 0 the aggregates keep
// variance ~ w_icc, so exposure assignment is materially confounded.
struct Sim1Config {
  int n_clusters = 100;
  double size_mean = 50.0;
  double size_sd = 10.0;
  double w_corr = 0.0;
  double w_icc = 0.0;
  bool covariate_interference = false;
  bool error_dependence = false;
  double error_rho = 0.5;
  bool null_effect = false;
  std::uint64_t seed = 1;

  void validate() const;  // ConfigError on out-of-range values
};

// One simulated trial plus the generator-side quantities an estimator can
// never see: per-cluster counterfactual outcome means and the true exposure
// probabilities.
struct SimulatedWorld {
  HierarchicalDataset dataset;
  std::vector<double> counterfactual_yc_1;
  std::vector<double> counterfactual_yc_0;
  std::vector<double> true_g;
};

// n uniforms that are exchangeable via a one-factor Gaussian copula:
// X_i = sqrt(rho) Z0 + sqrt(1 - rho) Z_i, U_i = Phi(X_i). rho = 0 gives iid
// uniforms. rho must lie in [0, 1).
std::vector<double> copula_uniforms(std::size_t n, double rho, Rng& rng);

// Draws one world from the supplied generator state.
SimulatedWorld simulate_world(const Sim1Config& cfg, Rng& rng);

// Convenience overload seeded like replication 0, so a standalone simulated
// dataset equals the first replication's dataset for the same config.
SimulatedWorld simulate_world(const Sim1Config& cfg);

// Monte-Carlo approximation of the true cluster-level effect from a large
// simulated population (seeded from its own stream, disjoint from the
// replications).
struct TruthEstimate {
  double ate = 0.0;
  double psi_1 = 0.0;
  double psi_0 = 0.0;
  double mcse = 0.0;  // Monte-Carlo standard error of ate
  std::size_t population = 0;
};

TruthEstimate true_ate(const Sim1Config& cfg,
                       std::size_t population_clusters = 10000);

// An estimator under study: a name plus a callable applied to each simulated
// dataset. The callable also receives the generator-side world (for bindings
// that use the true exposure probabilities) and a per-replication seed for
// anything cross-validated.
struct EstimatorBinding {
  std::string name;
  std::function<TmleResult(const HierarchicalDataset&, const SimulatedWorld&,
                           std::uint64_t rep_seed)>
      fn;
};

// Standard bindings by token:
//   unadjusted         difference of arm means
//   iptw               stabilized weighting, cluster GLM for g on {W1c, W2c}
//   gcomp              cluster GLM outcome regression on {W1c, W2c}
//   tmle-cluster       cluster-level TMLE, cluster GLMs on {W1c, W2c}
//   tmle-cluster:ib    cluster-level TMLE, pooled individual-level outcome
//                      GLM on {W1, W2}, cluster GLM for g on {W1c, W2c}
//   tmle-individual    individual-level TMLE, pooled GLMs on {W1, W2}
//   adaptive-prespec   adaptive pre-specification over candidate adjustment
//                      sets {}, {W1c}, {W2c}, {W1c, W2c}
// Unknown tokens raise ConfigError.
EstimatorBinding make_standard_binding(const std::string& token);

// Per-estimator Monte-Carlo summary, in percentage points. reject_pct is the
// share of replications with p < 0.05: power off the null, type-I error rate
// under it. Failed replications are counted and excluded from the summaries.
struct EstimatorSummary {
  std::string name;
  int n_ok = 0;
  int n_failed = 0;
  double bias_pct = 0.0;
  double sigma_pct = 0.0;  // population SD of the estimates
  double rmse_pct = 0.0;   // rmse^2 = bias^2 + sigma^2
  double coverage_pct = 0.0;
  double reject_pct = 0.0;
};

// One replication's outcome for one estimator, kept only when traces are
// requested.
struct ReplicationTrace {
  int rep = 0;
  std::string estimator;
  bool ok = false;
  double estimate = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  double p_value = 1.0;
};

struct ReplicationReport {
  Sim1Config config;
  TruthEstimate truth;
  int n_reps = 0;
  std::vector<EstimatorSummary> estimators;
  std::vector<ReplicationTrace> traces;  // rep-major, binding order
};

// Runs n_reps simulated trials, applying every binding to each; replication r
// is seeded by derive_seed(cfg.seed, replication stream, r), so the report is
// byte-identical for any thread count.
ReplicationReport replicate(const Sim1Config& cfg, int n_reps,
                            const std::vector<EstimatorBinding>& bindings,
                            const TruthEstimate& truth, int threads = 1,
                            bool keep_traces = false);

// Deterministic CSV rendering of a report; the rejection column is named
// power_pct or type1_pct according to config.null_effect.
std::string report_to_csv(const ReplicationReport& report);

}  // namespace htmle

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "htmle/data.hpp"
#include "htmle/errors.hpp"
#include "htmle/mathfn.hpp"
#include "htmle/simulation.hpp"
#include "htmle/super_learner.hpp"

using namespace htmle;

namespace {

HierarchicalDataset sim_data(int J, std::uint64_t seed, double size_mean = 8,
                             double size_sd = 3) {
  Sim1Config cfg;
  cfg.n_clusters = J;
  cfg.size_mean = size_mean;
  cfg.size_sd = size_sd;
  cfg.seed = seed;
  return simulate_world(cfg).dataset;
}

// A dataset whose extra W column "Z" is the same for everyone, so any design
// containing both an intercept and Z is rank deficient.
HierarchicalDataset with_constant_column(HierarchicalDataset d) {
  d.w_names.push_back("Z");
  for (auto& c : d.clusters)
    for (auto& m : c.members) m.w.push_back(1.0);
  return d;
}

LearnerSpec cluster_learner(std::vector<std::string> adj,
                            bool include_exposure = true) {
  LearnerSpec s;
  s.level = LearnerLevel::ClusterLevel;
  s.adjustment = std::move(adj);
  s.include_exposure = include_exposure;
  return s;
}

LearnerSpec individual_learner(std::vector<std::string> adj,
                               bool include_exposure = true) {
  LearnerSpec s;
  s.level = LearnerLevel::IndividualLevel;
  s.adjustment = std::move(adj);
  s.include_exposure = include_exposure;
  return s;
}

constexpr GlmOptions kTightGlm{200, 1e-12, 1e-14};

}  // namespace

TEST_CASE("fold assignment follows the default rule and stays valid") {
  const HierarchicalDataset d30 = sim_data(30, 11);
  const FoldAssignment f30 = make_folds(d30, 0, 42);
  CHECK(f30.V == 10);

  const HierarchicalDataset d29 = sim_data(29, 12);
  const FoldAssignment f29 = make_folds(d29, 0, 42);
  CHECK(f29.V == 29);  // leave-one-cluster-out below 30 clusters
  std::vector<int> count29(29, 0);
  for (int f : f29.fold_of_cluster) count29[static_cast<std::size_t>(f)]++;
  for (int c : count29) CHECK(c == 1);

  // balanced sizes: counts differ by at most one
  std::vector<int> count(10, 0);
  for (int f : f30.fold_of_cluster) {
    REQUIRE(f >= 0);
    REQUIRE(f < 10);
    count[static_cast<std::size_t>(f)]++;
  }
  CHECK(*std::max_element(count.begin(), count.end()) -
            *std::min_element(count.begin(), count.end()) <=
        1);

  // deterministic in the seed
  const FoldAssignment again = make_folds(d30, 0, 42);
  CHECK(again.fold_of_cluster == f30.fold_of_cluster);
  const FoldAssignment other = make_folds(d30, 0, 43);
  CHECK(other.fold_of_cluster != f30.fold_of_cluster);

  CHECK_THROWS_AS(make_folds(d30, 1, 1), ConfigError);
  CHECK_THROWS_AS(make_folds(d30, 31, 1), ConfigError);
  CHECK_NOTHROW(make_folds(d30, 30, 1));
}

TEST_CASE("adjustment tokens resolve by level") {
  const HierarchicalDataset d = sim_data(12, 21);

  // At the cluster level a W name means its within-cluster mean, so the
  // explicit avg: prefix is a no-op there.
  const GlmFit plain = fit_single_learner(d, cluster_learner({"W1"}),
                                          SlResponse::Outcome, {}, kTightGlm);
  const GlmFit avg = fit_single_learner(d, cluster_learner({"avg:W1"}),
                                        SlResponse::Outcome, {}, kTightGlm);
  REQUIRE(plain.beta.size() == avg.beta.size());
  for (int k = 0; k < plain.beta.size(); ++k)
    CHECK(plain.beta[k] == doctest::Approx(avg.beta[k]).epsilon(1e-13));

  // At the individual level the two are genuinely different designs.
  const GlmFit ind = fit_single_learner(d, individual_learner({"W1"}),
                                        SlResponse::Outcome, {}, kTightGlm);
  const GlmFit ind_avg = fit_single_learner(d, individual_learner({"avg:W1"}),
                                            SlResponse::Outcome, {}, kTightGlm);
  CHECK(std::abs(ind.beta[2] - ind_avg.beta[2]) > 1e-6);

  // A cluster-level covariate used by an individual-level learner is constant
  // within each cluster, so members share one prediction.
  const LearnerSpec env_only = individual_learner({"W1c"});
  const GlmFit env_fit =
      fit_single_learner(d, env_only, SlResponse::Outcome, {}, kTightGlm);
  const SlPrediction p = predict_single_learner(env_fit, d, env_only,
                                                SlResponse::Outcome,
                                                std::nullopt);
  for (std::size_t j = 0; j < d.n_clusters(); ++j)
    for (double q : p.individual[j])
      CHECK(q == doctest::Approx(p.individual[j][0]).epsilon(1e-14));

  CHECK_THROWS_AS(fit_single_learner(d, cluster_learner({"nope"}),
                                     SlResponse::Outcome),
                  ConfigError);
  CHECK_THROWS_AS(fit_single_learner(d, cluster_learner({"avg:W1c"}),
                                     SlResponse::Outcome),
                  ConfigError);  // avg: only applies to individual columns
}

TEST_CASE("cluster-constant designs give identical fits at both levels") {
  // With per-cluster weights summing to one, the individual-level weighted
  // score for a cluster-constant design collapses to the cluster-level score,
  // so both fits solve the same equations.
  const HierarchicalDataset d = sim_data(25, 31);
  const std::vector<std::string> adj = {"W1c", "avg:W2"};
  const GlmFit at_cluster = fit_single_learner(d, cluster_learner(adj),
                                               SlResponse::Outcome, {},
                                               kTightGlm);
  const GlmFit at_individual = fit_single_learner(d, individual_learner(adj),
                                                  SlResponse::Outcome, {},
                                                  kTightGlm);
  REQUIRE(at_cluster.beta.size() == at_individual.beta.size());
  for (int k = 0; k < at_cluster.beta.size(); ++k)
    CHECK(at_cluster.beta[k] ==
          doctest::Approx(at_individual.beta[k]).epsilon(1e-8));
}

TEST_CASE("cross-validated risk equals an independently assembled loop") {
  const HierarchicalDataset d = sim_data(18, 41);
  const FoldAssignment folds = make_folds(d, 6, 7);

  const std::vector<LearnerSpec> specs = {
      cluster_learner({"W1c"}), individual_learner({"W1", "W2"})};
  const std::vector<SlLoss> losses = {SlLoss::ClusterNLL, SlLoss::ClusterMSE,
                                      SlLoss::IndividualNLL,
                                      SlLoss::IndividualMSE};

  for (const auto& spec : specs) {
    // hand-rolled out-of-fold predictions
    SlPrediction oof;
    oof.cluster.assign(d.n_clusters(), 0.0);
    oof.individual.resize(d.n_clusters());
    for (int v = 0; v < folds.V; ++v) {
      std::vector<bool> train(d.n_clusters());
      for (std::size_t j = 0; j < d.n_clusters(); ++j)
        train[j] = folds.fold_of_cluster[j] != v;
      const GlmFit f =
          fit_single_learner(d, spec, SlResponse::Outcome, train, kTightGlm);
      const SlPrediction p =
          predict_single_learner(f, d, spec, SlResponse::Outcome, std::nullopt);
      for (std::size_t j = 0; j < d.n_clusters(); ++j) {
        if (folds.fold_of_cluster[j] != v) continue;
        oof.cluster[j] = p.cluster[j];
        oof.individual[j] = p.individual[j];
      }
    }
    for (SlLoss loss : losses) {
      double total = 0.0;
      for (std::size_t j = 0; j < d.n_clusters(); ++j) {
        const Cluster& c = d.clusters[j];
        switch (loss) {
          case SlLoss::ClusterNLL:
            total += binomial_nll(cluster_outcome(c), oof.cluster[j]);
            break;
          case SlLoss::ClusterMSE: {
            const double r = cluster_outcome(c) - oof.cluster[j];
            total += r * r;
            break;
          }
          case SlLoss::IndividualNLL: {
            double s = 0.0;
            for (std::size_t i = 0; i < c.size(); ++i)
              s += c.members[i].weight *
                   binomial_nll(c.members[i].outcome, oof.individual[j][i]);
            total += s;
            break;
          }
          case SlLoss::IndividualMSE: {
            double s = 0.0;
            for (std::size_t i = 0; i < c.size(); ++i) {
              const double r = c.members[i].outcome - oof.individual[j][i];
              s += c.members[i].weight * r * r;
            }
            total += s;
            break;
          }
        }
      }
      const double by_hand = total / static_cast<double>(d.n_clusters());
      const double reported = cv_risk(spec, d, folds, loss);
      CHECK(reported == doctest::Approx(by_hand).epsilon(1e-12));
    }
  }
}

TEST_CASE("half-probability outcomes pin the negative log likelihood at log 2") {
  // Every outcome is exactly 0.5, so any intercept-only logistic fit predicts
  // 0.5 and the per-cluster NLL is -log(0.5) no matter how folds fall.
  HierarchicalDataset d;
  d.w_names = {"W1"};
  d.e_names = {};
  for (int j = 0; j < 10; ++j) {
    Cluster c;
    c.id = "c" + std::to_string(j);
    c.exposure = j % 2;
    IndividualRecord m;
    m.cluster_id = c.id;
    m.w = {static_cast<double>(j)};
    m.outcome = 0.5;
    c.members.push_back(m);
    d.clusters.push_back(c);
  }
  assign_weights(d, WeightScheme::PerCluster);
  d.validate();

  const FoldAssignment folds = make_folds(d, 0, 3);
  const double risk =
      cv_risk(cluster_learner({}, false), d, folds, SlLoss::ClusterNLL);
  CHECK(risk == doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("ensemble weights satisfy the simplex and risk invariants") {
  for (std::uint64_t seed : {101ULL, 102ULL, 103ULL}) {
    const HierarchicalDataset d = sim_data(40, seed);
    SlConfig cfg;
    cfg.library = {cluster_learner({}), cluster_learner({"W1c"}),
                   cluster_learner({"W2c"}), cluster_learner({"W1c", "W2c"})};
    cfg.loss = SlLoss::ClusterNLL;
    cfg.V = 5;

    cfg.mode = SlMode::Convex;
    const SuperLearnerFit convex = fit_superlearner(d, cfg, seed);
    double sum = 0.0;
    for (double w : convex.meta_weights) {
      CHECK(w >= 0.0);
      sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    const double min_risk =
        *std::min_element(convex.cv_risks.begin(), convex.cv_risks.end());
    CHECK(convex.ensemble_cv_risk <= min_risk + 1e-8);

    cfg.mode = SlMode::Discrete;
    const SuperLearnerFit discrete = fit_superlearner(d, cfg, seed);
    const auto best = static_cast<std::size_t>(
        std::min_element(discrete.cv_risks.begin(), discrete.cv_risks.end()) -
        discrete.cv_risks.begin());
    CHECK(discrete.ensemble_cv_risk == discrete.cv_risks[best]);
    CHECK(discrete.meta_weights[best] == 1.0);
    for (std::size_t k = 0; k < discrete.meta_weights.size(); ++k)
      if (k != best) CHECK(discrete.meta_weights[k] == 0.0);

    // same fold assignment and per-learner risks across modes
    CHECK(discrete.cv_risks == convex.cv_risks);
  }
}

TEST_CASE("individual-level libraries work under individual losses") {
  const HierarchicalDataset d = sim_data(24, 55);
  SlConfig cfg;
  cfg.library = {individual_learner({}), individual_learner({"W1"}),
                 individual_learner({"W1", "W2", "W1c"})};
  cfg.loss = SlLoss::IndividualNLL;
  cfg.V = 4;
  cfg.mode = SlMode::Convex;
  const SuperLearnerFit fit = fit_superlearner(d, cfg, 9);
  double sum = 0.0;
  for (double w : fit.meta_weights) {
    CHECK(w >= 0.0);
    sum += w;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  const double min_risk =
      *std::min_element(fit.cv_risks.begin(), fit.cv_risks.end());
  CHECK(fit.ensemble_cv_risk <= min_risk + 1e-8);

  // ensemble predictions live on the probability scale at both levels
  const SlPrediction p = sl_predict(fit, d, std::nullopt);
  for (std::size_t j = 0; j < d.n_clusters(); ++j) {
    CHECK(p.cluster[j] > 0.0);
    CHECK(p.cluster[j] < 1.0);
    REQUIRE(p.individual[j].size() == d.clusters[j].size());
  }
}

TEST_CASE("duplicate library entries do not move the ensemble prediction") {
  const HierarchicalDataset d = sim_data(30, 61);
  const LearnerSpec L = cluster_learner({"W1c"});
  const LearnerSpec M = cluster_learner({"W2c"});

  SlConfig two;
  two.library = {L, M};
  two.loss = SlLoss::ClusterNLL;
  two.V = 5;
  two.mode = SlMode::Convex;
  SlConfig three = two;
  three.library = {L, L, M};

  const SuperLearnerFit f2 = fit_superlearner(d, two, 77);
  const SuperLearnerFit f3 = fit_superlearner(d, three, 77);
  const SlPrediction p2 = sl_predict(f2, d, std::nullopt);
  const SlPrediction p3 = sl_predict(f3, d, std::nullopt);
  for (std::size_t j = 0; j < d.n_clusters(); ++j)
    CHECK(p2.cluster[j] == doctest::Approx(p3.cluster[j]).epsilon(1e-8));

  // duplicated copies carry the split weight of the original
  CHECK(f3.meta_weights[0] + f3.meta_weights[1] ==
        doctest::Approx(f2.meta_weights[0]).epsilon(1e-6));
}

TEST_CASE("results are a pure function of data, config and seed") {
  const HierarchicalDataset d = sim_data(26, 71);
  SlConfig cfg;
  cfg.library = {cluster_learner({}), cluster_learner({"W1c"}),
                 individual_learner({"W1"})};
  cfg.loss = SlLoss::ClusterNLL;
  cfg.V = 4;
  cfg.mode = SlMode::Convex;

  const SuperLearnerFit a = fit_superlearner(d, cfg, 5);
  const SuperLearnerFit b = fit_superlearner(d, cfg, 5);
  CHECK(a.cv_risks == b.cv_risks);
  CHECK(a.meta_weights == b.meta_weights);
  CHECK(a.folds.fold_of_cluster == b.folds.fold_of_cluster);
  CHECK(a.ensemble_cv_risk == b.ensemble_cv_risk);
}

TEST_CASE("fold fits that fail fall back to intercepts with a diagnostic") {
  const HierarchicalDataset d = with_constant_column(sim_data(15, 81));
  const LearnerSpec bad = cluster_learner({"Z"}, false);  // [1, Z] is singular

  SlConfig cfg;
  cfg.library = {cluster_learner({}, false), bad};
  cfg.loss = SlLoss::ClusterNLL;
  cfg.V = 3;
  cfg.mode = SlMode::Discrete;

  SuperLearnerFit fit;
  CHECK_NOTHROW(fit = fit_superlearner(d, cfg, 1));
  // the fallback makes both learners identical, so the tie goes to the first
  CHECK(fit.meta_weights[0] == 1.0);
  CHECK(fit.meta_weights[1] == 0.0);
  CHECK(fit.cv_risks[0] == doctest::Approx(fit.cv_risks[1]).epsilon(1e-14));
  CHECK(!fit.diagnostics.empty());

  // a library holding only the broken learner cannot deliver a usable refit
  SlConfig only_bad;
  only_bad.library = {bad};
  only_bad.loss = SlLoss::ClusterNLL;
  only_bad.V = 3;
  CHECK_THROWS_AS(fit_superlearner(d, only_bad, 1), EstimationError);
}

TEST_CASE("predictions are clipped away from zero and one") {
  // A cluster-level covariate that separates the outcome perfectly pushes the
  // linear predictor to the clip bound; predictions must stay in
  // [1e-6, 1 - 1e-6].
  HierarchicalDataset d;
  d.e_names = {"E1"};
  d.w_names = {"W1"};
  for (int j = 0; j < 12; ++j) {
    Cluster c;
    c.id = "c" + std::to_string(j);
    c.exposure = j % 2;
    c.env = {j < 6 ? -1.0 : 1.0};
    IndividualRecord m;
    m.cluster_id = c.id;
    m.w = {0.0};
    m.outcome = j < 6 ? 0.0 : 1.0;
    c.members.push_back(m);
    d.clusters.push_back(c);
  }
  assign_weights(d, WeightScheme::PerCluster);
  d.validate();

  const LearnerSpec sep = cluster_learner({"E1"}, false);
  const GlmFit f = fit_single_learner(d, sep, SlResponse::Outcome);
  const SlPrediction p =
      predict_single_learner(f, d, sep, SlResponse::Outcome, std::nullopt);
  double lo = 1.0, hi = 0.0;
  for (double q : p.cluster) {
    CHECK(q >= 1e-6);
    CHECK(q <= 1.0 - 1e-6);
    lo = std::min(lo, q);
    hi = std::max(hi, q);
  }
  // separation actually reached the clip
  CHECK(lo == doctest::Approx(1e-6).epsilon(1e-6));
  CHECK(hi == doctest::Approx(1.0 - 1e-6).epsilon(1e-9));
}

TEST_CASE("exposure overrides apply to outcome fits and not propensity fits") {
  const HierarchicalDataset d = sim_data(20, 91);

  const LearnerSpec out_spec = cluster_learner({"W1c"});
  const GlmFit out_fit =
      fit_single_learner(d, out_spec, SlResponse::Outcome, {}, kTightGlm);
  const SlPrediction p1 = predict_single_learner(out_fit, d, out_spec,
                                                 SlResponse::Outcome, 1);
  const SlPrediction p0 = predict_single_learner(out_fit, d, out_spec,
                                                 SlResponse::Outcome, 0);
  double max_gap = 0.0;
  for (std::size_t j = 0; j < d.n_clusters(); ++j)
    max_gap = std::max(max_gap, std::abs(p1.cluster[j] - p0.cluster[j]));
  CHECK(max_gap > 1e-8);

  // without the exposure in the design the override is inert
  const LearnerSpec no_a = cluster_learner({"W1c"}, false);
  const GlmFit no_a_fit =
      fit_single_learner(d, no_a, SlResponse::Outcome, {}, kTightGlm);
  const SlPrediction q1 =
      predict_single_learner(no_a_fit, d, no_a, SlResponse::Outcome, 1);
  const SlPrediction q0 =
      predict_single_learner(no_a_fit, d, no_a, SlResponse::Outcome, 0);
  for (std::size_t j = 0; j < d.n_clusters(); ++j)
    CHECK(q1.cluster[j] == q0.cluster[j]);

  // propensity fits never include the exposure and ignore the override
  const LearnerSpec g_spec = cluster_learner({"W1c"});
  const GlmFit g_fit =
      fit_single_learner(d, g_spec, SlResponse::Exposure, {}, kTightGlm);
  const SlPrediction g1 = predict_single_learner(g_fit, d, g_spec,
                                                 SlResponse::Exposure, 1);
  const SlPrediction g0 = predict_single_learner(g_fit, d, g_spec,
                                                 SlResponse::Exposure, 0);
  for (std::size_t j = 0; j < d.n_clusters(); ++j)
    CHECK(g1.cluster[j] == g0.cluster[j]);
}

TEST_CASE("an empty library is rejected") {
  const HierarchicalDataset d = sim_data(10, 95);
  SlConfig cfg;
  CHECK_THROWS_AS(fit_superlearner(d, cfg, 1), ConfigError);
}

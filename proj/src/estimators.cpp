#include "htmle/estimators.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "htmle/errors.hpp"
#include "htmle/glm.hpp"
#include "htmle/mathfn.hpp"
#include "htmle/rng.hpp"

namespace htmle {

namespace {

constexpr GlmOptions kNuisanceGlmOptions{200, 1e-12, 1e-14};

double sample_variance(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return ss / (n - 1.0);
}

std::vector<int> exposures(const HierarchicalDataset& d) {
  std::vector<int> a;
  a.reserve(d.n_clusters());
  for (const auto& c : d.clusters) a.push_back(c.exposure);
  return a;
}

std::vector<double> cluster_outcomes(const HierarchicalDataset& d) {
  std::vector<double> y;
  y.reserve(d.n_clusters());
  for (const auto& c : d.clusters) y.push_back(cluster_outcome(c));
  return y;
}

void require_both_arms(const HierarchicalDataset& d) {
  int n1 = 0;
  for (const auto& c : d.clusters) n1 += c.exposure;
  if (n1 == 0 || n1 == static_cast<int>(d.n_clusters()))
    throw EstimationError("all clusters share one exposure arm; "
                          "arm-specific means are undefined");
}

// Wald inference from per-cluster IC values.
void fill_wald(TmleResult& r) {
  const double j = static_cast<double>(r.ic_values.size());
  r.variance = sample_variance(r.ic_values) / j;
  const double se = std::sqrt(r.variance);
  r.ci_low = r.ate - 1.959963984540054 * se;
  r.ci_high = r.ate + 1.959963984540054 * se;
  r.p_value = se > 0.0 ? two_sided_p(r.ate / se) : (r.ate == 0.0 ? 1.0 : 0.0);
}

// Risk-ratio inference via the delta method on log(psi_1/psi_0).
void fill_risk_ratio(TmleResult& r) {
  if (!(r.psi_1 > 0.0) || !(r.psi_0 > 0.0)) {
    r.risk_ratio = std::numeric_limits<double>::quiet_NaN();
    r.rr_ci_low = r.rr_ci_high = r.rr_p_value = r.risk_ratio;
    r.diagnostics.notes.push_back(
        "risk ratio undefined: an arm-specific mean is not positive");
    return;
  }
  r.risk_ratio = r.psi_1 / r.psi_0;
  const std::size_t j = r.ic_values.size();
  std::vector<double> ic_log(j);
  for (std::size_t k = 0; k < j; ++k)
    ic_log[k] = r.ic_1[k] / r.psi_1 - r.ic_0[k] / r.psi_0;
  const double var_log = sample_variance(ic_log) / static_cast<double>(j);
  const double se = std::sqrt(var_log);
  const double lrr = std::log(r.risk_ratio);
  r.rr_ci_low = std::exp(lrr - 1.959963984540054 * se);
  r.rr_ci_high = std::exp(lrr + 1.959963984540054 * se);
  r.rr_p_value = se > 0.0 ? two_sided_p(lrr / se) : (lrr == 0.0 ? 1.0 : 0.0);
}

// ---- nuisance fitting ------------------------------------------------------

struct QFit {
  SlPrediction obs, a1, a0;
  std::vector<double> meta_weights;
  std::vector<double> cv_risks;
  std::vector<std::string> notes;
};

void require_levels(const std::vector<LearnerSpec>& library, LearnerLevel level,
                    const char* what) {
  for (const auto& spec : library)
    if (spec.level != level)
      throw ConfigError(std::string(what) +
                        " requires learners at the matching level");
}

QFit fit_q(const HierarchicalDataset& d, const QSpec& q, ModelKind model,
           std::uint64_t seed) {
  if (q.sl.has_value() == q.single.has_value())
    throw ConfigError("outcome regression must be exactly one of: "
                      "Super Learner config, single GLM spec");
  QFit out;
  if (q.single) {
    if (model == ModelKind::II && q.single->level != LearnerLevel::IndividualLevel)
      throw ConfigError("individual-level TMLE requires an individual-level "
                        "outcome regression");
    const GlmFit f =
        fit_single_learner(d, *q.single, SlResponse::Outcome, {},
                           kNuisanceGlmOptions);
    out.obs = predict_single_learner(f, d, *q.single, SlResponse::Outcome,
                                     std::nullopt);
    out.a1 = predict_single_learner(f, d, *q.single, SlResponse::Outcome, 1);
    out.a0 = predict_single_learner(f, d, *q.single, SlResponse::Outcome, 0);
    out.meta_weights = {1.0};
    out.notes.push_back("outcome regression: direct GLM '" +
                        q.single->describe() + "'");
    return out;
  }
  if (model == ModelKind::II) {
    require_levels(q.sl->library, LearnerLevel::IndividualLevel,
                   "individual-level TMLE outcome regression");
    if (q.sl->loss != SlLoss::IndividualNLL &&
        q.sl->loss != SlLoss::IndividualMSE)
      throw ConfigError("individual-level TMLE requires an individual-level "
                        "cross-validation loss");
  }
  const SuperLearnerFit f = fit_superlearner(d, *q.sl, seed, SlResponse::Outcome);
  out.obs = sl_predict(f, d, std::nullopt);
  out.a1 = sl_predict(f, d, 1);
  out.a0 = sl_predict(f, d, 0);
  out.meta_weights = f.meta_weights;
  out.cv_risks = f.cv_risks;
  out.notes = f.diagnostics;
  return out;
}

struct GFit {
  std::vector<double> g1;                     // per cluster, truncated
  std::vector<std::vector<double>> g1_ind;    // per individual, truncated
  int truncated = 0;
  std::vector<double> meta_weights;
  std::vector<double> cv_risks;
  std::vector<std::string> notes;
};

GFit fit_g(const HierarchicalDataset& d, const GSpec& g, ModelKind model,
           const TmleOptions& options, std::uint64_t seed) {
  const int forms = static_cast<int>(g.known.has_value()) +
                    static_cast<int>(g.known_per_cluster.has_value()) +
                    static_cast<int>(g.single.has_value()) +
                    static_cast<int>(g.sl.has_value());
  if (forms != 1)
    throw ConfigError("propensity spec must be exactly one of: known value, "
                      "known per-cluster values, single GLM spec, "
                      "Super Learner config");
  const std::size_t J = d.n_clusters();
  GFit out;

  SlPrediction pred;
  if (g.known) {
    if (!(*g.known > 0.0 && *g.known < 1.0))
      throw ConfigError("known propensity must lie strictly inside (0,1)");
    pred.cluster.assign(J, *g.known);
    out.notes.push_back("propensity: known value");
  } else if (g.known_per_cluster) {
    if (g.known_per_cluster->size() != J)
      throw ConfigError("known per-cluster propensities must have length J");
    for (double p : *g.known_per_cluster)
      if (!(p > 0.0 && p < 1.0))
        throw ConfigError("known propensities must lie strictly inside (0,1)");
    pred.cluster = *g.known_per_cluster;
    out.notes.push_back("propensity: known per-cluster values");
  } else if (g.single) {
    const LearnerLevel need = model == ModelKind::I
                                  ? LearnerLevel::ClusterLevel
                                  : LearnerLevel::IndividualLevel;
    if (g.single->level != need)
      throw ConfigError("propensity learner level does not match the model");
    const GlmFit f = fit_single_learner(d, *g.single, SlResponse::Exposure, {},
                                        kNuisanceGlmOptions);
    pred = predict_single_learner(f, d, *g.single, SlResponse::Exposure,
                                  std::nullopt);
    out.meta_weights = {1.0};
    LearnerSpec shown = *g.single;  // propensity designs never include A
    shown.include_exposure = false;
    out.notes.push_back("propensity: direct GLM '" + shown.describe() + "'");
  } else {
    if (model == ModelKind::I) {
      require_levels(g.sl->library, LearnerLevel::ClusterLevel,
                     "cluster-level TMLE propensity");
      if (g.sl->loss != SlLoss::ClusterNLL && g.sl->loss != SlLoss::ClusterMSE)
        throw ConfigError("cluster-level TMLE propensity requires a "
                          "cluster-level loss");
    } else {
      require_levels(g.sl->library, LearnerLevel::IndividualLevel,
                     "individual-level TMLE propensity");
      if (g.sl->loss != SlLoss::IndividualNLL &&
          g.sl->loss != SlLoss::IndividualMSE)
        throw ConfigError("individual-level TMLE propensity requires an "
                          "individual-level loss");
    }
    const SuperLearnerFit f =
        fit_superlearner(d, *g.sl, seed, SlResponse::Exposure);
    pred = sl_predict(f, d, std::nullopt);
    out.meta_weights = f.meta_weights;
    out.cv_risks = f.cv_risks;
    out.notes = f.diagnostics;
  }

  const double t = options.g_truncation;
  if (!(t >= 0.0 && t < 0.5))
    throw ConfigError("propensity truncation level must lie in [0, 0.5)");
  // Count truncations only over the values the model actually consumes:
  // cluster entries for the cluster-level model, individual entries otherwise.
  auto truncate = [&](double p, bool counts) {
    const double clipped = clip(p, t, 1.0 - t);
    if (counts && clipped != p) ++out.truncated;
    return clipped;
  };

  out.g1.resize(J);
  out.g1_ind.resize(J);
  const bool have_individual = !pred.individual.empty();
  for (std::size_t j = 0; j < J; ++j) {
    out.g1[j] = truncate(pred.cluster[j], model == ModelKind::I ||
                                              !have_individual);
    const std::size_t n = d.clusters[j].size();
    out.g1_ind[j].resize(n);
    for (std::size_t i = 0; i < n; ++i)
      out.g1_ind[j][i] = have_individual
                             ? truncate(pred.individual[j][i],
                                        model == ModelKind::II)
                             : out.g1[j];
  }
  return out;
}

// ---- fluctuation helpers ---------------------------------------------------

double weighted_loglik(const std::vector<double>& y,
                       const std::vector<double>& offset,
                       const std::vector<double>& h,
                       const std::vector<double>& w, double eps) {
  double ll = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double m = clip(expit(offset[i] + eps * h[i]), 1e-15, 1.0 - 1e-15);
    ll += w[i] * (y[i] * std::log(m) + (1.0 - y[i]) * std::log(1.0 - m));
  }
  return ll;
}

}  // namespace

std::vector<double> clever_covariate(const std::vector<int>& exposure,
                                     const std::vector<double>& g1, int a) {
  if (exposure.size() != g1.size())
    throw DataError("exposure and propensity vectors differ in length");
  if (a != 0 && a != 1) throw ConfigError("target arm must be 0 or 1");
  std::vector<double> h(exposure.size(), 0.0);
  for (std::size_t j = 0; j < exposure.size(); ++j) {
    const double ga = a == 1 ? g1[j] : 1.0 - g1[j];
    if (!(ga > 0.0))
      throw PositivityError("propensity of the target arm is zero at cluster " +
                            std::to_string(j + 1) +
                            "; truncate the propensity away from 0");
    h[j] = exposure[j] == a ? 1.0 / ga : 0.0;
  }
  return h;
}

FluctuationFit fluctuate(const std::vector<double>& y,
                         const std::vector<double>& qbar,
                         const std::vector<double>& clever,
                         const std::vector<double>& weights) {
  const std::size_t n = y.size();
  if (qbar.size() != n || clever.size() != n || weights.size() != n)
    throw DataError("fluctuation inputs differ in length");
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) any = any || clever[i] * weights[i] != 0.0;
  if (!any)
    throw TargetingError("clever covariate is identically zero; "
                         "no observations inform the fluctuation");

  std::vector<double> offset_v(n);
  for (std::size_t i = 0; i < n; ++i) offset_v[i] = logit(clip_prob(qbar[i]));

  FluctuationFit out;
  try {
    DesignMatrix X;
    X.names = {"H"};
    X.values.resize(static_cast<Eigen::Index>(n), 1);
    Eigen::VectorXd yv(n), wv(n), ov(n);
    for (std::size_t i = 0; i < n; ++i) {
      X.values(static_cast<Eigen::Index>(i), 0) = clever[i];
      yv[static_cast<Eigen::Index>(i)] = y[i];
      wv[static_cast<Eigen::Index>(i)] = weights[i];
      ov[static_cast<Eigen::Index>(i)] = offset_v[i];
    }
    const GlmFit f = fit_glm(X, yv, wv, &ov, GlmFamily::Logistic,
                             kNuisanceGlmOptions);
    if (f.max_abs_score <= 1e-8) {
      out.epsilon = f.beta[0];
      out.irls_converged = true;
      return out;
    }
  } catch (const EstimationError&) {
    // fall through to the search below
  }

  // Golden-section search of the weighted log likelihood over [-10, 10].
  out.irls_converged = false;
  out.used_golden = true;
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = -10.0, hi = 10.0;
  double c = hi - invphi * (hi - lo);
  double e = lo + invphi * (hi - lo);
  double fc = weighted_loglik(y, offset_v, clever, weights, c);
  double fe = weighted_loglik(y, offset_v, clever, weights, e);
  for (int it = 0; it < 200 && hi - lo > 1e-11; ++it) {
    if (fc > fe) {
      hi = e;
      e = c;
      fe = fc;
      c = hi - invphi * (hi - lo);
      fc = weighted_loglik(y, offset_v, clever, weights, c);
    } else {
      lo = c;
      c = e;
      fc = fe;
      e = lo + invphi * (hi - lo);
      fe = weighted_loglik(y, offset_v, clever, weights, e);
    }
  }
  out.epsilon = 0.5 * (lo + hi);
  if (!std::isfinite(out.epsilon) ||
      !std::isfinite(weighted_loglik(y, offset_v, clever, weights, out.epsilon)))
    throw TargetingError("fluctuation did not produce a finite solution");
  return out;
}

std::vector<double> eic_cluster(const HierarchicalDataset& d,
                                const NuisanceEstimates& nuis, double psi,
                                int a) {
  const std::size_t J = d.n_clusters();
  if (nuis.qbar_obs.size() != J || nuis.g_1.size() != J ||
      (a == 1 ? nuis.qbar_1.size() : nuis.qbar_0.size()) != J)
    throw DataError("nuisance vectors do not match the dataset");
  const std::vector<double> h = clever_covariate(exposures(d), nuis.g_1, a);
  const std::vector<double>& qa = a == 1 ? nuis.qbar_1 : nuis.qbar_0;
  std::vector<double> ic(J);
  for (std::size_t j = 0; j < J; ++j)
    ic[j] = h[j] * (cluster_outcome(d.clusters[j]) - nuis.qbar_obs[j]) +
            qa[j] - psi;
  return ic;
}

std::vector<double> eic_individual(const HierarchicalDataset& d,
                                   const NuisanceEstimates& nuis, double psi,
                                   int a) {
  const std::size_t J = d.n_clusters();
  if (nuis.i_qbar_obs.size() != J || nuis.i_g_1.size() != J ||
      (a == 1 ? nuis.i_qbar_1.size() : nuis.i_qbar_0.size()) != J)
    throw DataError("individual-level nuisance vectors do not match the dataset");
  const std::vector<std::vector<double>>& qa =
      a == 1 ? nuis.i_qbar_1 : nuis.i_qbar_0;
  std::vector<double> ic(J, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    const Cluster& c = d.clusters[j];
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double g1 = nuis.i_g_1[j][i];
      const double ga = a == 1 ? g1 : 1.0 - g1;
      if (!(ga > 0.0))
        throw PositivityError("propensity of the target arm is zero");
      const double h = c.exposure == a ? 1.0 / ga : 0.0;
      ic[j] += c.members[i].weight *
               (h * (c.members[i].outcome - nuis.i_qbar_obs[j][i]) +
                qa[j][i] - psi);
    }
  }
  return ic;
}

TmleResult tmle_cluster(const HierarchicalDataset& d, const QSpec& q,
                        const GSpec& g, const TmleOptions& options) {
  d.validate();
  require_both_arms(d);
  const std::size_t J = d.n_clusters();
  const std::vector<int> a = exposures(d);
  const std::vector<double> yc = cluster_outcomes(d);
  const std::vector<double> ones(J, 1.0);

  const QFit qf = fit_q(d, q, ModelKind::I,
                        derive_seed(options.seed, kStreamFoldsQ, 0));
  const GFit gf = fit_g(d, g, ModelKind::I, options,
                        derive_seed(options.seed, kStreamFoldsG, 0));

  TmleResult r;
  r.estimator = "tmle-cluster";
  r.model = ModelKind::I;
  r.diagnostics.g_truncated = gf.truncated;
  r.diagnostics.q_meta_weights = qf.meta_weights;
  r.diagnostics.g_meta_weights = gf.meta_weights;
  r.diagnostics.q_cv_risks = qf.cv_risks;
  r.diagnostics.g_cv_risks = gf.cv_risks;
  r.diagnostics.notes = qf.notes;
  r.diagnostics.notes.insert(r.diagnostics.notes.end(), gf.notes.begin(),
                             gf.notes.end());

  r.ic_1.resize(J);
  r.ic_0.resize(J);
  std::vector<double> qstar(J);
  for (int arm : {1, 0}) {
    const std::vector<double> h = clever_covariate(a, gf.g1, arm);
    const FluctuationFit fl = fluctuate(yc, qf.obs.cluster, h, ones);
    const std::vector<double>& qa = arm == 1 ? qf.a1.cluster : qf.a0.cluster;
    double psi = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      const double ga = arm == 1 ? gf.g1[j] : 1.0 - gf.g1[j];
      qstar[j] = expit(logit(clip_prob(qa[j])) + fl.epsilon / ga);
      psi += qstar[j];
    }
    psi /= static_cast<double>(J);
    std::vector<double>& ic = arm == 1 ? r.ic_1 : r.ic_0;
    for (std::size_t j = 0; j < J; ++j)
      ic[j] = h[j] * (yc[j] - qstar[j]) + qstar[j] - psi;
    if (arm == 1) {
      r.psi_1 = psi;
      r.epsilon_1 = fl.epsilon;
      r.diagnostics.eps1_irls_converged = fl.irls_converged;
      r.diagnostics.eps1_golden = fl.used_golden;
    } else {
      r.psi_0 = psi;
      r.epsilon_0 = fl.epsilon;
      r.diagnostics.eps0_irls_converged = fl.irls_converged;
      r.diagnostics.eps0_golden = fl.used_golden;
    }
  }

  r.ate = r.psi_1 - r.psi_0;
  r.ic_values.resize(J);
  for (std::size_t j = 0; j < J; ++j) r.ic_values[j] = r.ic_1[j] - r.ic_0[j];
  fill_wald(r);
  fill_risk_ratio(r);
  return r;
}

TmleResult tmle_individual(const HierarchicalDataset& d, const QSpec& q,
                           const GSpec& g, const TmleOptions& options) {
  d.validate();
  require_both_arms(d);
  const std::size_t J = d.n_clusters();

  const QFit qf = fit_q(d, q, ModelKind::II,
                        derive_seed(options.seed, kStreamFoldsQ, 0));
  const GFit gf = fit_g(d, g, ModelKind::II, options,
                        derive_seed(options.seed, kStreamFoldsG, 0));

  // Flattened individual-level rows in (cluster, member) order.
  const std::size_t n = d.n_individuals();
  std::vector<double> y(n), w(n), q_obs(n);
  {
    std::size_t r = 0;
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t i = 0; i < d.clusters[j].size(); ++i, ++r) {
        y[r] = d.clusters[j].members[i].outcome;
        w[r] = d.clusters[j].members[i].weight;
        q_obs[r] = qf.obs.individual[j][i];
      }
  }

  TmleResult r;
  r.estimator = "tmle-individual";
  r.model = ModelKind::II;
  r.diagnostics.g_truncated = gf.truncated;
  r.diagnostics.q_meta_weights = qf.meta_weights;
  r.diagnostics.g_meta_weights = gf.meta_weights;
  r.diagnostics.q_cv_risks = qf.cv_risks;
  r.diagnostics.g_cv_risks = gf.cv_risks;
  r.diagnostics.notes = qf.notes;
  r.diagnostics.notes.insert(r.diagnostics.notes.end(), gf.notes.begin(),
                             gf.notes.end());

  r.ic_1.assign(J, 0.0);
  r.ic_0.assign(J, 0.0);
  for (int arm : {1, 0}) {
    std::vector<double> h(n);
    {
      std::size_t rr = 0;
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t i = 0; i < d.clusters[j].size(); ++i, ++rr) {
          const double g1 = gf.g1_ind[j][i];
          const double ga = arm == 1 ? g1 : 1.0 - g1;
          if (!(ga > 0.0))
            throw PositivityError("propensity of the target arm is zero");
          h[rr] = d.clusters[j].exposure == arm ? 1.0 / ga : 0.0;
        }
    }
    const FluctuationFit fl = fluctuate(y, q_obs, h, w);

    const std::vector<std::vector<double>>& qa =
        arm == 1 ? qf.a1.individual : qf.a0.individual;
    double psi = 0.0;
    std::vector<std::vector<double>> qstar(J);
    for (std::size_t j = 0; j < J; ++j) {
      qstar[j].resize(d.clusters[j].size());
      for (std::size_t i = 0; i < d.clusters[j].size(); ++i) {
        const double g1 = gf.g1_ind[j][i];
        const double ga = arm == 1 ? g1 : 1.0 - g1;
        qstar[j][i] = expit(logit(clip_prob(qa[j][i])) + fl.epsilon / ga);
        psi += d.clusters[j].members[i].weight * qstar[j][i];
      }
    }
    psi /= static_cast<double>(J);

    std::vector<double>& ic = arm == 1 ? r.ic_1 : r.ic_0;
    for (std::size_t j = 0; j < J; ++j) {
      const Cluster& c = d.clusters[j];
      double s = 0.0;
      for (std::size_t i = 0; i < c.size(); ++i) {
        const double g1 = gf.g1_ind[j][i];
        const double ga = arm == 1 ? g1 : 1.0 - g1;
        const double hij = c.exposure == arm ? 1.0 / ga : 0.0;
        s += c.members[i].weight *
             (hij * (c.members[i].outcome - qstar[j][i]) + qstar[j][i] - psi);
      }
      ic[j] = s;
    }
    if (arm == 1) {
      r.psi_1 = psi;
      r.epsilon_1 = fl.epsilon;
      r.diagnostics.eps1_irls_converged = fl.irls_converged;
      r.diagnostics.eps1_golden = fl.used_golden;
    } else {
      r.psi_0 = psi;
      r.epsilon_0 = fl.epsilon;
      r.diagnostics.eps0_irls_converged = fl.irls_converged;
      r.diagnostics.eps0_golden = fl.used_golden;
    }
  }

  r.ate = r.psi_1 - r.psi_0;
  r.ic_values.resize(J);
  for (std::size_t j = 0; j < J; ++j) r.ic_values[j] = r.ic_1[j] - r.ic_0[j];
  fill_wald(r);
  fill_risk_ratio(r);
  return r;
}

TmleResult unadjusted(const HierarchicalDataset& d) {
  d.validate();
  require_both_arms(d);
  const std::size_t J = d.n_clusters();
  const std::vector<double> yc = cluster_outcomes(d);
  const std::vector<int> a = exposures(d);

  double n1 = 0.0, s1 = 0.0, s0 = 0.0;
  for (std::size_t j = 0; j < J; ++j) {
    if (a[j] == 1) {
      n1 += 1.0;
      s1 += yc[j];
    } else {
      s0 += yc[j];
    }
  }
  const double n0 = static_cast<double>(J) - n1;
  TmleResult r;
  r.estimator = "unadjusted";
  r.model = ModelKind::I;
  r.psi_1 = s1 / n1;
  r.psi_0 = s0 / n0;
  r.ate = r.psi_1 - r.psi_0;
  const double p1 = n1 / static_cast<double>(J);
  const double p0 = n0 / static_cast<double>(J);
  r.ic_1.assign(J, 0.0);
  r.ic_0.assign(J, 0.0);
  r.ic_values.assign(J, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    if (a[j] == 1)
      r.ic_1[j] = (yc[j] - r.psi_1) / p1;
    else
      r.ic_0[j] = (yc[j] - r.psi_0) / p0;
    r.ic_values[j] = r.ic_1[j] - r.ic_0[j];
  }
  fill_wald(r);
  fill_risk_ratio(r);
  return r;
}

TmleResult iptw(const HierarchicalDataset& d, const GSpec& g,
                const TmleOptions& options) {
  d.validate();
  require_both_arms(d);
  const std::size_t J = d.n_clusters();
  const std::vector<double> yc = cluster_outcomes(d);
  const std::vector<int> a = exposures(d);
  const GFit gf = fit_g(d, g, ModelKind::I, options,
                        derive_seed(options.seed, kStreamFoldsG, 0));

  TmleResult r;
  r.estimator = "iptw";
  r.model = ModelKind::I;
  r.diagnostics.g_truncated = gf.truncated;
  r.diagnostics.g_meta_weights = gf.meta_weights;
  r.diagnostics.g_cv_risks = gf.cv_risks;
  r.diagnostics.notes = gf.notes;

  r.ic_1.resize(J);
  r.ic_0.resize(J);
  for (int arm : {1, 0}) {
    const std::vector<double> h = clever_covariate(a, gf.g1, arm);
    double wsum = 0.0, wy = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      wsum += h[j];
      wy += h[j] * yc[j];
    }
    // Stabilized (Hajek) weighting: weights renormalized to sum to 1.
    const double psi = wy / wsum;
    const double wbar = wsum / static_cast<double>(J);
    std::vector<double>& ic = arm == 1 ? r.ic_1 : r.ic_0;
    for (std::size_t j = 0; j < J; ++j) ic[j] = h[j] * (yc[j] - psi) / wbar;
    (arm == 1 ? r.psi_1 : r.psi_0) = psi;
  }
  r.ate = r.psi_1 - r.psi_0;
  r.ic_values.resize(J);
  for (std::size_t j = 0; j < J; ++j) r.ic_values[j] = r.ic_1[j] - r.ic_0[j];
  fill_wald(r);
  fill_risk_ratio(r);
  return r;
}

TmleResult gcomp(const HierarchicalDataset& d, const QSpec& q,
                 const TmleOptions& options) {
  d.validate();
  require_both_arms(d);
  const std::size_t J = d.n_clusters();
  const QFit qf = fit_q(d, q, ModelKind::I,
                        derive_seed(options.seed, kStreamFoldsQ, 0));

  TmleResult r;
  r.estimator = "gcomp";
  r.model = ModelKind::I;
  r.diagnostics.q_meta_weights = qf.meta_weights;
  r.diagnostics.q_cv_risks = qf.cv_risks;
  r.diagnostics.notes = qf.notes;

  r.psi_1 = std::accumulate(qf.a1.cluster.begin(), qf.a1.cluster.end(), 0.0) /
            static_cast<double>(J);
  r.psi_0 = std::accumulate(qf.a0.cluster.begin(), qf.a0.cluster.end(), 0.0) /
            static_cast<double>(J);
  r.ate = r.psi_1 - r.psi_0;
  r.ic_1.resize(J);
  r.ic_0.resize(J);
  r.ic_values.resize(J);
  for (std::size_t j = 0; j < J; ++j) {
    r.ic_1[j] = qf.a1.cluster[j] - r.psi_1;
    r.ic_0[j] = qf.a0.cluster[j] - r.psi_0;
    r.ic_values[j] = r.ic_1[j] - r.ic_0[j];
  }
  fill_wald(r);
  fill_risk_ratio(r);
  return r;
}

namespace {

LearnerSpec candidate_q_spec(const std::vector<std::string>& adjustment) {
  LearnerSpec s;
  s.level = LearnerLevel::ClusterLevel;
  s.adjustment = adjustment;
  s.include_exposure = true;
  return s;
}

LearnerSpec candidate_g_spec(const std::vector<std::string>& adjustment) {
  LearnerSpec s;
  s.level = LearnerLevel::ClusterLevel;
  s.adjustment = adjustment;
  return s;
}

std::string candidate_label(const std::vector<std::string>& adjustment) {
  if (adjustment.empty()) return "(none)";
  std::string s = adjustment.front();
  for (std::size_t k = 1; k < adjustment.size(); ++k) s += "+" + adjustment[k];
  return s;
}

// Cross-validated variance of the estimated influence curve for one
// candidate: per fold, all components (Q, collaborative g, fluctuations and
// the arm means) come from the training clusters and the estimated IC is
// evaluated on the validation clusters; squares are pooled uncentered.
double cv_ic_variance(const HierarchicalDataset& d,
                      const std::vector<std::string>& adjustment,
                      const FoldAssignment& folds, const TmleOptions& options) {
  const std::size_t J = d.n_clusters();
  const std::vector<int> a = exposures(d);
  const std::vector<double> yc = cluster_outcomes(d);
  const LearnerSpec q_spec = candidate_q_spec(adjustment);
  const LearnerSpec g_spec = candidate_g_spec(adjustment);

  double sum_sq = 0.0;
  for (int v = 0; v < folds.V; ++v) {
    std::vector<bool> train(J, false);
    std::size_t n_train = 0;
    for (std::size_t j = 0; j < J; ++j) {
      train[j] = folds.fold_of_cluster[j] != v;
      n_train += train[j];
    }
    {
      int arm1 = 0, arm0 = 0;
      for (std::size_t j = 0; j < J; ++j)
        if (train[j]) (a[j] == 1 ? arm1 : arm0) += 1;
      if (arm1 == 0 || arm0 == 0)
        throw EstimationError("a training fold lost one exposure arm; "
                              "use fewer folds");
    }

    GlmFit qfit, gfit;
    LearnerSpec q_used = q_spec;
    try {
      qfit = fit_single_learner(d, q_spec, SlResponse::Outcome, train,
                                kNuisanceGlmOptions);
    } catch (const EstimationError&) {
      q_used = candidate_q_spec({});
      qfit = fit_single_learner(d, q_used, SlResponse::Outcome, train,
                                kNuisanceGlmOptions);
    }
    LearnerSpec g_used = g_spec;
    try {
      gfit = fit_single_learner(d, g_spec, SlResponse::Exposure, train,
                                kNuisanceGlmOptions);
    } catch (const EstimationError&) {
      g_used = candidate_g_spec({});
      gfit = fit_single_learner(d, g_used, SlResponse::Exposure, train,
                                kNuisanceGlmOptions);
    }

    const SlPrediction q_obs =
        predict_single_learner(qfit, d, q_used, SlResponse::Outcome, std::nullopt);
    const SlPrediction q_1 =
        predict_single_learner(qfit, d, q_used, SlResponse::Outcome, 1);
    const SlPrediction q_0 =
        predict_single_learner(qfit, d, q_used, SlResponse::Outcome, 0);
    const SlPrediction g_pred =
        predict_single_learner(gfit, d, g_used, SlResponse::Exposure, std::nullopt);

    std::vector<double> g1(J);
    for (std::size_t j = 0; j < J; ++j)
      g1[j] = clip(g_pred.cluster[j], options.g_truncation,
                   1.0 - options.g_truncation);

    // Train-only fluctuation and arm means.
    std::vector<double> y_tr, q_tr, w_tr;
    std::vector<std::size_t> tr_idx;
    for (std::size_t j = 0; j < J; ++j)
      if (train[j]) {
        y_tr.push_back(yc[j]);
        q_tr.push_back(q_obs.cluster[j]);
        w_tr.push_back(1.0);
        tr_idx.push_back(j);
      }

    double psi[2] = {0.0, 0.0};
    double eps[2] = {0.0, 0.0};
    for (int arm : {1, 0}) {
      std::vector<double> h_tr(tr_idx.size());
      for (std::size_t t = 0; t < tr_idx.size(); ++t) {
        const std::size_t j = tr_idx[t];
        const double ga = arm == 1 ? g1[j] : 1.0 - g1[j];
        h_tr[t] = a[j] == arm ? 1.0 / ga : 0.0;
      }
      const FluctuationFit fl = fluctuate(y_tr, q_tr, h_tr, w_tr);
      eps[arm] = fl.epsilon;
      const SlPrediction& qa = arm == 1 ? q_1 : q_0;
      double s = 0.0;
      for (const std::size_t j : tr_idx) {
        const double ga = arm == 1 ? g1[j] : 1.0 - g1[j];
        s += expit(logit(clip_prob(qa.cluster[j])) + fl.epsilon / ga);
      }
      psi[arm] = s / static_cast<double>(tr_idx.size());
    }

    // Estimated IC on the validation clusters.
    for (std::size_t j = 0; j < J; ++j) {
      if (train[j]) continue;
      double dd = 0.0;
      for (int arm : {1, 0}) {
        const SlPrediction& qa = arm == 1 ? q_1 : q_0;
        const double ga = arm == 1 ? g1[j] : 1.0 - g1[j];
        const double qstar =
            expit(logit(clip_prob(qa.cluster[j])) + eps[arm] / ga);
        const double h = a[j] == arm ? 1.0 / ga : 0.0;
        const double contrib = h * (yc[j] - qstar) + qstar - psi[arm];
        dd += arm == 1 ? contrib : -contrib;
      }
      sum_sq += dd * dd;
    }
  }
  const double Jd = static_cast<double>(J);
  return sum_sq / Jd / Jd;
}

}  // namespace

TmleResult adaptive_prespec(const HierarchicalDataset& d,
                            const std::vector<std::vector<std::string>>& candidates,
                            double known_g, const TmleOptions& options) {
  d.validate();
  require_both_arms(d);
  if (candidates.empty())
    throw ConfigError("adaptive pre-specification needs at least one candidate");
  if (!(known_g > 0.0 && known_g < 1.0))
    throw ConfigError("known randomization probability must lie in (0,1)");

  const FoldAssignment folds =
      make_folds(d, 0, derive_seed(options.seed, kStreamFoldsQ, 0));

  std::vector<CandidateRecord> records;
  records.reserve(candidates.size());
  std::size_t best = 0;
  for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
    CandidateRecord rec;
    rec.label = candidate_label(candidates[ci]);
    rec.cv_ic_variance = cv_ic_variance(d, candidates[ci], folds, options);
    records.push_back(rec);
    if (records[ci].cv_ic_variance < records[best].cv_ic_variance) best = ci;
  }

  TmleResult r = tmle_cluster(d, QSpec::glm(candidate_q_spec(candidates[best])),
                              GSpec::glm(candidate_g_spec(candidates[best])),
                              options);
  r.estimator = "adaptive-prespec";
  r.selection = std::move(records);
  r.selected_candidate = static_cast<int>(best);
  r.diagnostics.notes.push_back(
      "collaborative re-estimation of the known randomization probability " +
      std::to_string(known_g) + " on candidate '" +
      r.selection[best].label + "'");
  return r;
}

}  // namespace htmle

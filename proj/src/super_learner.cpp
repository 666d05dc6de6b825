#include "htmle/super_learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "htmle/errors.hpp"
#include "htmle/mathfn.hpp"
#include "htmle/rng.hpp"

namespace htmle {

namespace {

constexpr GlmOptions kNuisanceGlmOptions{200, 1e-12, 1e-14};

struct ResolvedColumn {
  enum class Kind { E, W, WAvg };
  Kind kind;
  int index;
  std::string name;
};

ResolvedColumn resolve_column(const HierarchicalDataset& d,
                              const std::string& token, LearnerLevel level) {
  std::string name = token;
  bool forced_avg = false;
  if (token.rfind("avg:", 0) == 0) {
    name = token.substr(4);
    forced_avg = true;
  }
  if (!forced_avg) {
    const int e = d.e_index(name);
    if (e >= 0) return {ResolvedColumn::Kind::E, e, token};
  }
  const int w = d.w_index(name);
  if (w < 0)
    throw ConfigError("learner adjustment names unknown column '" + token + "'");
  if (forced_avg || level == LearnerLevel::ClusterLevel)
    return {ResolvedColumn::Kind::WAvg, w, token};
  return {ResolvedColumn::Kind::W, w, token};
}

double cluster_w_mean(const Cluster& c, int widx) {
  double s = 0.0;
  for (const auto& m : c.members) s += m.w[static_cast<std::size_t>(widx)];
  return s / static_cast<double>(c.size());
}

std::vector<bool> full_mask(std::size_t j) { return std::vector<bool>(j, true); }

// Rows, response and weights for one learner over the selected clusters.
struct LearnerRows {
  DesignMatrix X;
  Eigen::VectorXd y;
  Eigen::VectorXd w;
};

LearnerRows build_rows(const HierarchicalDataset& d, const LearnerSpec& spec,
                       SlResponse response, const std::vector<bool>& mask,
                       std::optional<int> exposure_override) {
  const bool with_a =
      response == SlResponse::Outcome && spec.include_exposure;
  std::vector<ResolvedColumn> cols;
  cols.reserve(spec.adjustment.size());
  for (const auto& token : spec.adjustment)
    cols.push_back(resolve_column(d, token, spec.level));

  LearnerRows out;
  out.X.names.push_back("(intercept)");
  if (with_a) out.X.names.push_back("A");
  for (const auto& c : cols) out.X.names.push_back(c.name);
  const Eigen::Index p = static_cast<Eigen::Index>(out.X.names.size());

  Eigen::Index n = 0;
  for (std::size_t j = 0; j < d.clusters.size(); ++j) {
    if (!mask[j]) continue;
    n += spec.level == LearnerLevel::ClusterLevel
             ? 1
             : static_cast<Eigen::Index>(d.clusters[j].size());
  }
  out.X.values.resize(n, p);
  out.y.resize(n);
  out.w.resize(n);

  Eigen::Index r = 0;
  for (std::size_t j = 0; j < d.clusters.size(); ++j) {
    if (!mask[j]) continue;
    const Cluster& c = d.clusters[j];
    const double a =
        exposure_override ? static_cast<double>(*exposure_override)
                          : static_cast<double>(c.exposure);
    // covariate values shared by every row of the cluster
    std::vector<double> shared(cols.size(), 0.0);
    for (std::size_t k = 0; k < cols.size(); ++k) {
      if (cols[k].kind == ResolvedColumn::Kind::E)
        shared[k] = c.env[static_cast<std::size_t>(cols[k].index)];
      else if (cols[k].kind == ResolvedColumn::Kind::WAvg)
        shared[k] = cluster_w_mean(c, cols[k].index);
    }
    if (spec.level == LearnerLevel::ClusterLevel) {
      Eigen::Index col = 0;
      out.X.values(r, col++) = 1.0;
      if (with_a) out.X.values(r, col++) = a;
      for (std::size_t k = 0; k < cols.size(); ++k)
        out.X.values(r, col++) = shared[k];
      out.y[r] = response == SlResponse::Outcome
                     ? cluster_outcome(c)
                     : static_cast<double>(c.exposure);
      out.w[r] = 1.0;
      ++r;
    } else {
      for (const auto& m : c.members) {
        Eigen::Index col = 0;
        out.X.values(r, col++) = 1.0;
        if (with_a) out.X.values(r, col++) = a;
        for (std::size_t k = 0; k < cols.size(); ++k)
          out.X.values(r, col++) =
              cols[k].kind == ResolvedColumn::Kind::W
                  ? m.w[static_cast<std::size_t>(cols[k].index)]
                  : shared[k];
        out.y[r] = response == SlResponse::Outcome
                       ? m.outcome
                       : static_cast<double>(c.exposure);
        out.w[r] = m.weight;
        ++r;
      }
    }
  }
  return out;
}

std::vector<double> per_cluster_losses(const HierarchicalDataset& d,
                                       const SlPrediction& pred, SlLoss loss,
                                       SlResponse response) {
  const std::size_t J = d.n_clusters();
  std::vector<double> out(J, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    const Cluster& c = d.clusters[j];
    switch (loss) {
      case SlLoss::ClusterNLL: {
        const double yc = response == SlResponse::Outcome
                              ? cluster_outcome(c)
                              : static_cast<double>(c.exposure);
        out[j] = binomial_nll(yc, pred.cluster[j]);
        break;
      }
      case SlLoss::ClusterMSE: {
        const double yc = response == SlResponse::Outcome
                              ? cluster_outcome(c)
                              : static_cast<double>(c.exposure);
        const double r = yc - pred.cluster[j];
        out[j] = r * r;
        break;
      }
      case SlLoss::IndividualNLL: {
        double s = 0.0;
        for (std::size_t i = 0; i < c.members.size(); ++i) {
          const double y = response == SlResponse::Outcome
                               ? c.members[i].outcome
                               : static_cast<double>(c.exposure);
          s += c.members[i].weight * binomial_nll(y, pred.individual[j][i]);
        }
        out[j] = s;
        break;
      }
      case SlLoss::IndividualMSE: {
        double s = 0.0;
        for (std::size_t i = 0; i < c.members.size(); ++i) {
          const double y = response == SlResponse::Outcome
                               ? c.members[i].outcome
                               : static_cast<double>(c.exposure);
          const double r = y - pred.individual[j][i];
          s += c.members[i].weight * r * r;
        }
        out[j] = s;
        break;
      }
    }
  }
  return out;
}

double mean_cluster_loss(const HierarchicalDataset& d, const SlPrediction& pred,
                         SlLoss loss, SlResponse response) {
  const std::vector<double> l = per_cluster_losses(d, pred, loss, response);
  return std::accumulate(l.begin(), l.end(), 0.0) /
         static_cast<double>(l.size());
}

LearnerSpec intercept_fallback(const LearnerSpec& spec) {
  LearnerSpec fb;
  fb.level = spec.level;
  fb.include_exposure = false;
  fb.label = spec.label.empty() ? spec.describe() : spec.label;
  fb.label += " [intercept fallback]";
  return fb;
}

// Out-of-fold predictions for one learner; fold fits that fail fall back to
// intercept-only, appending a note when a diagnostics sink is given.
SlPrediction oof_predictions(const HierarchicalDataset& d,
                             const LearnerSpec& spec, SlResponse response,
                             const FoldAssignment& folds,
                             std::vector<std::string>* diagnostics) {
  const std::size_t J = d.n_clusters();
  SlPrediction out;
  out.cluster.assign(J, 0.0);
  out.individual.resize(J);
  for (int v = 0; v < folds.V; ++v) {
    std::vector<bool> train(J, false);
    for (std::size_t j = 0; j < J; ++j) train[j] = folds.fold_of_cluster[j] != v;
    LearnerSpec used = spec;
    GlmFit f;
    try {
      f = fit_single_learner(d, spec, response, train, kNuisanceGlmOptions);
    } catch (const EstimationError& e) {
      used = intercept_fallback(spec);
      f = fit_single_learner(d, used, response, train, kNuisanceGlmOptions);
      if (diagnostics)
        diagnostics->push_back("fold " + std::to_string(v + 1) + ": learner '" +
                               spec.describe() +
                               "' fell back to intercept-only (" + e.what() +
                               ")");
    }
    const SlPrediction p =
        predict_single_learner(f, d, used, response, std::nullopt);
    for (std::size_t j = 0; j < J; ++j) {
      if (folds.fold_of_cluster[j] != v) continue;
      out.cluster[j] = p.cluster[j];
      out.individual[j] = p.individual[j];
    }
  }
  return out;
}

// ---- convex meta-learner -------------------------------------------------

Eigen::VectorXd project_simplex(Eigen::VectorXd v) {
  const Eigen::Index k = v.size();
  std::vector<double> u(v.data(), v.data() + k);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, theta = 0.0;
  int rho = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    css += u[static_cast<std::size_t>(i)];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[static_cast<std::size_t>(i)] - t > 0.0) {
      rho = static_cast<int>(i + 1);
      theta = t;
    }
  }
  (void)rho;
  for (Eigen::Index i = 0; i < k; ++i) v[i] = std::max(v[i] - theta, 0.0);
  return v;
}

struct MetaProblem {
  Eigen::MatrixXd P;   // rows x learners, out-of-fold predictions
  Eigen::VectorXd y;   // row responses
  Eigen::VectorXd uw;  // row weights; objective = sum uw * loss(y, P w)
  bool nll = true;

  double objective(const Eigen::VectorXd& w) const {
    const Eigen::VectorXd q = P * w;
    double f = 0.0;
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      const double qi = clip(q[i], 1e-9, 1.0 - 1e-9);
      f += uw[i] * (nll ? binomial_nll(y[i], qi)
                        : (y[i] - qi) * (y[i] - qi));
    }
    return f;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& w) const {
    const Eigen::VectorXd q = P * w;
    Eigen::VectorXd dl(q.size());
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      const double qi = clip(q[i], 1e-9, 1.0 - 1e-9);
      dl[i] = uw[i] * (nll ? (-y[i] / qi + (1.0 - y[i]) / (1.0 - qi))
                           : -2.0 * (y[i] - qi));
    }
    return P.transpose() * dl;
  }

  Eigen::MatrixXd hessian(const Eigen::VectorXd& w) const {
    const Eigen::VectorXd q = P * w;
    Eigen::VectorXd d2(q.size());
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      const double qi = clip(q[i], 1e-9, 1.0 - 1e-9);
      d2[i] = uw[i] * (nll ? (y[i] / (qi * qi) +
                              (1.0 - y[i]) / ((1.0 - qi) * (1.0 - qi)))
                           : 2.0);
    }
    return P.transpose() * d2.asDiagonal() * P;
  }
};

// Projected gradient descent from the best single-learner vertex (so the
// ensemble risk can never exceed the discrete minimum), then an active-set
// Newton polish that drives the KKT residual to ~1e-12; the polish is what
// makes duplicate-learner ensembles agree to prediction-level precision.
Eigen::VectorXd solve_convex_weights(const MetaProblem& mp, int init_vertex) {
  const Eigen::Index K = mp.P.cols();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(K);
  w[init_vertex] = 1.0;
  if (K == 1) return w;

  double f = mp.objective(w);
  double t = 1.0;
  for (int iter = 0; iter < 2000; ++iter) {
    const Eigen::VectorXd g = mp.gradient(w);
    t = std::min(t * 2.0, 1e8);
    bool improved = false;
    Eigen::VectorXd cand;
    double fc = f;
    while (t >= 1e-18) {
      cand = project_simplex(w - t * g);
      fc = mp.objective(cand);
      if (fc <= f - 1e-4 * g.dot(w - cand)) {
        improved = true;
        break;
      }
      t *= 0.5;
    }
    if (!improved) break;
    const double drop = f - fc;
    w = cand;
    f = fc;
    if (drop <= 1e-10) break;  // stated objective tolerance
  }

  // Active-set Newton polish.
  for (int round = 0; round < 60; ++round) {
    std::vector<int> act;
    for (Eigen::Index k = 0; k < K; ++k) {
      if (w[k] > 1e-12)
        act.push_back(static_cast<int>(k));
      else
        w[k] = 0.0;
    }
    if (act.empty()) break;
    const int na = static_cast<int>(act.size());
    const Eigen::VectorXd g = mp.gradient(w);
    const Eigen::MatrixXd H = mp.hessian(w);

    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(na + 1, na + 1);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(na + 1);
    for (int a = 0; a < na; ++a) {
      for (int b = 0; b < na; ++b) kkt(a, b) = H(act[a], act[b]);
      kkt(a, a) += 1e-13;  // regularizes exact duplicates; direction only
      kkt(a, na) = kkt(na, a) = 1.0;
      rhs[a] = -g[act[a]];
    }
    Eigen::VectorXd sol = kkt.ldlt().solve(rhs);
    if (!sol.allFinite()) break;
    const double lambda = -sol[na];
    const double dnorm = sol.head(na).cwiseAbs().maxCoeff();
    const double scale = std::max(1.0, g.cwiseAbs().maxCoeff());

    if (dnorm <= 1e-13 * scale) {
      // KKT check: inactive gradients must not beat the active multiplier.
      int enter = -1;
      double worst = -1e-12 * scale;
      for (Eigen::Index k = 0; k < K; ++k) {
        if (w[k] > 0.0) continue;
        if (g[k] - lambda < worst) {
          worst = g[k] - lambda;
          enter = static_cast<int>(k);
        }
      }
      if (enter < 0) break;
      w[enter] = 1e-11;  // admit into the active set; next round moves it
      const double shrink = 1.0 - 1e-11;
      for (Eigen::Index k = 0; k < K; ++k)
        if (static_cast<int>(k) != enter) w[k] *= shrink;
      continue;
    }

    // Step limited to the nonnegativity boundary, halved until non-increase.
    double tmax = 1.0;
    for (int a = 0; a < na; ++a)
      if (sol[a] < 0.0) tmax = std::min(tmax, -w[act[a]] / sol[a]);
    double step = tmax;
    double fnew = f;
    Eigen::VectorXd wnew = w;
    bool ok = false;
    for (int h = 0; h < 50 && step > 1e-18; ++h) {
      wnew = w;
      for (int a = 0; a < na; ++a)
        wnew[act[a]] = std::max(w[act[a]] + step * sol[a], 0.0);
      fnew = mp.objective(wnew);
      if (fnew <= f + 1e-15) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok) break;
    w = wnew;
    f = fnew;
  }

  // Exact renormalization guards accumulated rounding.
  const double s = w.sum();
  if (s > 0.0) w /= s;
  return w;
}

SlPrediction combine_predictions(const std::vector<SlPrediction>& preds,
                                 const std::vector<double>& weights) {
  SlPrediction out;
  const std::size_t J = preds.front().cluster.size();
  out.cluster.assign(J, 0.0);
  out.individual.resize(J);
  for (std::size_t j = 0; j < J; ++j)
    out.individual[j].assign(preds.front().individual[j].size(), 0.0);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    if (weights[k] == 0.0) continue;
    for (std::size_t j = 0; j < J; ++j) {
      out.cluster[j] += weights[k] * preds[k].cluster[j];
      for (std::size_t i = 0; i < out.individual[j].size(); ++i)
        out.individual[j][i] += weights[k] * preds[k].individual[j][i];
    }
  }
  return out;
}

}  // namespace

std::string LearnerSpec::describe() const {
  if (!label.empty()) return label;
  std::string s =
      level == LearnerLevel::ClusterLevel ? "cluster:" : "individual:";
  s += include_exposure ? " A" : " 1";
  for (const auto& a : adjustment) s += " + " + a;
  return s;
}

FoldAssignment make_folds(const HierarchicalDataset& d, int V,
                          std::uint64_t seed) {
  const int J = static_cast<int>(d.n_clusters());
  if (J < 2) throw DataError("fold assignment needs at least two clusters");
  if (V == 0) V = J >= 30 ? 10 : J;
  if (V < 2 || V > J)
    throw ConfigError("fold count V=" + std::to_string(V) +
                      " must lie in [2, J=" + std::to_string(J) + "]");
  // Fisher-Yates with explicit rejection sampling keeps the permutation
  // identical across platforms for a given seed.
  std::vector<int> perm(static_cast<std::size_t>(J));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (int i = J - 1; i > 0; --i) {
    const auto r = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[r]);
  }
  FoldAssignment folds;
  folds.V = V;
  folds.fold_of_cluster.assign(static_cast<std::size_t>(J), 0);
  for (int i = 0; i < J; ++i)
    folds.fold_of_cluster[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] =
        i % V;
  return folds;
}

GlmFit fit_single_learner(const HierarchicalDataset& d, const LearnerSpec& spec,
                          SlResponse response,
                          const std::vector<bool>& cluster_mask,
                          const GlmOptions& options) {
  const std::vector<bool>& mask =
      cluster_mask.empty() ? full_mask(d.n_clusters()) : cluster_mask;
  if (mask.size() != d.n_clusters())
    throw ConfigError("cluster mask length does not match the dataset");
  const LearnerRows rows = build_rows(d, spec, response, mask, std::nullopt);
  return fit_glm(rows.X, rows.y, rows.w, nullptr, GlmFamily::Logistic, options);
}

SlPrediction predict_single_learner(const GlmFit& fit,
                                    const HierarchicalDataset& d,
                                    const LearnerSpec& spec, SlResponse response,
                                    std::optional<int> exposure_override) {
  if (response == SlResponse::Exposure) exposure_override.reset();
  const LearnerRows rows =
      build_rows(d, spec, response, full_mask(d.n_clusters()), exposure_override);
  const Eigen::VectorXd raw = predict_glm(fit, rows.X);

  SlPrediction out;
  const std::size_t J = d.n_clusters();
  out.cluster.assign(J, 0.0);
  out.individual.resize(J);
  Eigen::Index r = 0;
  for (std::size_t j = 0; j < J; ++j) {
    const Cluster& c = d.clusters[j];
    if (spec.level == LearnerLevel::ClusterLevel) {
      const double q = clip_prob(raw[r++]);
      out.cluster[j] = q;
      out.individual[j].assign(c.size(), q);
    } else {
      out.individual[j].resize(c.size());
      double wsum = 0.0, qsum = 0.0;
      for (std::size_t i = 0; i < c.size(); ++i) {
        const double q = clip_prob(raw[r++]);
        out.individual[j][i] = q;
        wsum += c.members[i].weight;
        qsum += c.members[i].weight * q;
      }
      // alpha-weighted reduction to the cluster level (weights renormalized
      // within the cluster so the reduction stays on the probability scale)
      out.cluster[j] = qsum / wsum;
    }
  }
  return out;
}

double cv_risk(const LearnerSpec& learner, const HierarchicalDataset& d,
               const FoldAssignment& folds, SlLoss loss, SlResponse response) {
  if (folds.fold_of_cluster.size() != d.n_clusters())
    throw ConfigError("fold assignment does not match the dataset");
  const SlPrediction oof = oof_predictions(d, learner, response, folds, nullptr);
  return mean_cluster_loss(d, oof, loss, response);
}

SuperLearnerFit fit_superlearner(const HierarchicalDataset& d,
                                 const SlConfig& config, std::uint64_t seed,
                                 SlResponse response) {
  if (config.library.empty())
    throw ConfigError("Super Learner library is empty");
  const std::size_t K = config.library.size();

  SuperLearnerFit fit;
  fit.library = config.library;
  fit.response = response;
  fit.loss = config.loss;
  fit.mode = config.mode;
  fit.folds = make_folds(d, config.V, seed);

  std::vector<SlPrediction> oof(K);
  fit.cv_risks.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    oof[k] = oof_predictions(d, config.library[k], response, fit.folds,
                             &fit.diagnostics);
    fit.cv_risks[k] =
        mean_cluster_loss(d, oof[k], config.loss, response);
  }

  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (fit.cv_risks[k] < fit.cv_risks[best]) best = k;

  if (config.mode == SlMode::Discrete || K == 1) {
    fit.meta_weights.assign(K, 0.0);
    fit.meta_weights[best] = 1.0;
    fit.ensemble_cv_risk = fit.cv_risks[best];
  } else {
    MetaProblem mp;
    mp.nll = config.loss == SlLoss::ClusterNLL ||
             config.loss == SlLoss::IndividualNLL;
    const bool cluster_level = config.loss == SlLoss::ClusterNLL ||
                               config.loss == SlLoss::ClusterMSE;
    const std::size_t J = d.n_clusters();
    const double Jd = static_cast<double>(J);
    Eigen::Index n = cluster_level
                         ? static_cast<Eigen::Index>(J)
                         : static_cast<Eigen::Index>(d.n_individuals());
    mp.P.resize(n, static_cast<Eigen::Index>(K));
    mp.y.resize(n);
    mp.uw.resize(n);
    Eigen::Index r = 0;
    for (std::size_t j = 0; j < J; ++j) {
      const Cluster& c = d.clusters[j];
      if (cluster_level) {
        for (std::size_t k = 0; k < K; ++k)
          mp.P(r, static_cast<Eigen::Index>(k)) = oof[k].cluster[j];
        mp.y[r] = response == SlResponse::Outcome
                      ? cluster_outcome(c)
                      : static_cast<double>(c.exposure);
        mp.uw[r] = 1.0 / Jd;
        ++r;
      } else {
        for (std::size_t i = 0; i < c.size(); ++i) {
          for (std::size_t k = 0; k < K; ++k)
            mp.P(r, static_cast<Eigen::Index>(k)) = oof[k].individual[j][i];
          mp.y[r] = response == SlResponse::Outcome
                        ? c.members[i].outcome
                        : static_cast<double>(c.exposure);
          mp.uw[r] = c.members[i].weight / Jd;
          ++r;
        }
      }
    }
    const Eigen::VectorXd w = solve_convex_weights(mp, static_cast<int>(best));
    fit.meta_weights.assign(w.data(), w.data() + w.size());
    fit.ensemble_cv_risk = mean_cluster_loss(
        d, combine_predictions(oof, fit.meta_weights), config.loss, response);
  }

  // Full-data refits. A failure is fatal only for learners that carry weight.
  fit.refit_learners.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    try {
      fit.refit_learners[k] = fit_single_learner(d, config.library[k], response,
                                                 {}, kNuisanceGlmOptions);
    } catch (const EstimationError&) {
      if (fit.meta_weights[k] > 0.0) throw;
      fit.refit_learners[k] = fit_single_learner(
          d, intercept_fallback(config.library[k]), response, {},
          kNuisanceGlmOptions);
      fit.library[k] = intercept_fallback(config.library[k]);
      fit.diagnostics.push_back("full-data refit of zero-weight learner '" +
                                config.library[k].describe() +
                                "' fell back to intercept-only");
    }
  }
  return fit;
}

SlPrediction sl_predict(const SuperLearnerFit& fit, const HierarchicalDataset& d,
                        std::optional<int> exposure_override) {
  std::vector<SlPrediction> preds(fit.library.size());
  for (std::size_t k = 0; k < fit.library.size(); ++k) {
    if (fit.meta_weights[k] == 0.0) {
      // shape-compatible zero contribution
      preds[k].cluster.assign(d.n_clusters(), 0.0);
      preds[k].individual.resize(d.n_clusters());
      for (std::size_t j = 0; j < d.n_clusters(); ++j)
        preds[k].individual[j].assign(d.clusters[j].size(), 0.0);
      continue;
    }
    preds[k] = predict_single_learner(fit.refit_learners[k], d, fit.library[k],
                                      fit.response, exposure_override);
  }
  return combine_predictions(preds, fit.meta_weights);
}

}  // namespace htmle

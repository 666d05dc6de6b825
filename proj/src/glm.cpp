#include "htmle/glm.hpp"

#include <cmath>

#include "htmle/errors.hpp"
#include "htmle/mathfn.hpp"

namespace htmle {

namespace {

Eigen::VectorXd mean_response(const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& beta,
                              const Eigen::VectorXd* offset) {
  Eigen::VectorXd eta = X * beta;
  if (offset) eta += *offset;
  Eigen::VectorXd mu(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) mu[i] = expit(eta[i]);
  return mu;
}

// -2 * weighted log-likelihood; mu is guarded away from {0,1} inside the
// logs only, so clipping never perturbs scores.
double logistic_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu,
                         const Eigen::VectorXd& w) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double m = clip(mu[i], 1e-15, 1.0 - 1e-15);
    ll += w[i] * (y[i] * std::log(m) + (1.0 - y[i]) * std::log(1.0 - m));
  }
  return -2.0 * ll;
}

void check_rank(const Eigen::MatrixXd& weighted_design,
                const std::vector<std::string>& names) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(weighted_design);
  if (qr.rank() < weighted_design.cols()) {
    std::string msg = "design matrix is rank-deficient ( columns:";
    for (const auto& n : names) msg += " " + n;
    msg += " )";
    throw RankDeficiencyError(msg);
  }
}

}  // namespace

void DesignMatrix::validate() const {
  if (static_cast<std::size_t>(values.cols()) != names.size())
    throw DataError("design matrix has " + std::to_string(values.cols()) +
                    " columns but " + std::to_string(names.size()) + " names");
  for (std::size_t a = 0; a < names.size(); ++a) {
    if (names[a].empty()) throw DataError("design matrix has an unnamed column");
    for (std::size_t b = a + 1; b < names.size(); ++b)
      if (names[a] == names[b])
        throw DataError("design matrix has duplicate column '" + names[a] + "'");
  }
  if (!values.allFinite())
    throw DataError("design matrix contains non-finite values");
}

double logistic_loglik(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                       const Eigen::VectorXd& weights) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double m = clip(expit(eta[i]), 1e-15, 1.0 - 1e-15);
    ll += weights[i] * (y[i] * std::log(m) + (1.0 - y[i]) * std::log(1.0 - m));
  }
  return ll;
}

GlmFit fit_glm(const DesignMatrix& X, const Eigen::VectorXd& y,
               const Eigen::VectorXd& weights, const Eigen::VectorXd* offset,
               GlmFamily family, const GlmOptions& options) {
  X.validate();
  const Eigen::Index n = X.values.rows();
  const Eigen::Index p = X.values.cols();
  if (p == 0) throw DataError("design matrix has no columns");
  if (y.size() != n) throw DataError("response length does not match design rows");
  if (weights.size() != n) throw DataError("weight length does not match design rows");
  if (offset && offset->size() != n)
    throw DataError("offset length does not match design rows");
  double wsum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(weights[i] >= 0.0)) throw DataError("weights must be nonnegative");
    wsum += weights[i];
  }
  if (!(wsum > 0.0)) throw DataError("weights are all zero");
  if (family == GlmFamily::Logistic)
    for (Eigen::Index i = 0; i < n; ++i)
      if (!(y[i] >= 0.0 && y[i] <= 1.0))
        throw DataError("logistic response outside [0,1]");

  GlmFit fit;
  fit.family = family;
  fit.names = X.names;
  fit.offset_used = offset != nullptr;

  if (family == GlmFamily::Linear) {
    Eigen::VectorXd sw = weights.array().sqrt();
    Eigen::MatrixXd Xw = sw.asDiagonal() * X.values;
    check_rank(Xw, X.names);
    Eigen::VectorXd resp = y;
    if (offset) resp -= *offset;
    Eigen::VectorXd yw = sw.asDiagonal() * resp;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    fit.beta = qr.solve(yw);
    fit.fitted = X.values * fit.beta;
    if (offset) fit.fitted += *offset;
    Eigen::VectorXd resid = y - fit.fitted;
    fit.final_deviance = (weights.array() * resid.array().square()).sum();
    Eigen::VectorXd score = X.values.transpose() *
                            (weights.array() * resid.array()).matrix();
    fit.max_abs_score = score.cwiseAbs().maxCoeff();
    fit.converged = true;
    fit.iterations = 1;
    return fit;
  }

  // Logistic IRLS: Newton steps with step halving on the deviance; the
  // information matrix is evaluated at the fresh-start rank check with
  // mu(1-mu) from beta = 0.
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd mu = mean_response(X.values, beta, offset);
  {
    Eigen::VectorXd iw =
        (weights.array() * mu.array() * (1.0 - mu.array())).sqrt();
    check_rank(iw.asDiagonal() * X.values, X.names);
  }
  double dev = logistic_deviance(y, mu, weights);
  bool stalled = false;

  int it = 0;
  for (; it < options.max_iter; ++it) {
    Eigen::VectorXd score =
        X.values.transpose() * (weights.array() * (y - mu).array()).matrix();
    if (score.cwiseAbs().maxCoeff() <= options.score_tol) break;

    Eigen::VectorXd iw = weights.array() * mu.array() * (1.0 - mu.array());
    Eigen::MatrixXd info = X.values.transpose() * iw.asDiagonal() * X.values;
    Eigen::VectorXd delta = info.ldlt().solve(score);
    if (!delta.allFinite()) {
      stalled = true;
      break;
    }

    double step = 1.0;
    Eigen::VectorXd beta_new;
    Eigen::VectorXd mu_new;
    double dev_new = dev;
    bool improved = false;
    for (int h = 0; h < 30; ++h) {
      beta_new = beta + step * delta;
      mu_new = mean_response(X.values, beta_new, offset);
      dev_new = logistic_deviance(y, mu_new, weights);
      if (std::isfinite(dev_new) && dev_new <= dev + 1e-12) {
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) {
      stalled = true;
      break;
    }
    const double change = std::fabs(dev - dev_new);
    beta = beta_new;
    mu = mu_new;
    dev = dev_new;
    if (change <= options.dev_tol * (std::fabs(dev) + 0.1)) {
      ++it;
      break;
    }
  }

  Eigen::VectorXd score =
      X.values.transpose() * (weights.array() * (y - mu).array()).matrix();
  fit.beta = beta;
  fit.fitted = mu;
  fit.final_deviance = dev;
  fit.iterations = it;
  fit.max_abs_score = score.cwiseAbs().maxCoeff();
  fit.converged = !stalled && fit.max_abs_score <= options.score_tol;
  // A deviance-stall or step-failure exit with a small score still counts.
  if (fit.max_abs_score <= options.score_tol) fit.converged = true;
  return fit;
}

Eigen::VectorXd predict_glm(const GlmFit& fit, const DesignMatrix& X,
                            const Eigen::VectorXd* offset) {
  X.validate();
  if (X.names != fit.names)
    throw DataError("prediction design columns do not match the fitted model");
  if (offset && offset->size() != X.values.rows())
    throw DataError("offset length does not match design rows");
  if (fit.offset_used && !offset)
    throw DataError("model was fit with an offset; prediction requires one");
  if (!fit.offset_used && offset)
    throw DataError("model was fit without an offset");
  Eigen::VectorXd eta = X.values * fit.beta;
  if (offset) eta += *offset;
  if (fit.family == GlmFamily::Linear) return eta;
  Eigen::VectorXd out(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) out[i] = expit(eta[i]);
  return out;
}

}  // namespace htmle

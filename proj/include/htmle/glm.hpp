#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace htmle {

enum class GlmFamily { Logistic, Linear };

// Dense design matrix with named columns. An intercept, if wanted, is an
// explicit column of ones.
struct DesignMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // rows x names.size()

  // Finite entries, unique non-empty names, consistent shape.
  void validate() const;
};

struct GlmOptions {
  int max_iter = 100;
  double score_tol = 1e-8;  // convergence: max |score component| <= score_tol
  double dev_tol = 1e-12;   // stop when relative deviance change <= dev_tol
};

struct GlmFit {
  GlmFamily family = GlmFamily::Logistic;
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  bool offset_used = false;
  bool converged = false;   // true iff max |score| <= score_tol at exit
  int iterations = 0;
  double final_deviance = 0.0;  // -2 * log-likelihood (Logistic) / weighted RSS
  double max_abs_score = 0.0;
  Eigen::VectorXd fitted;  // response-scale predictions on the training rows
};

// Weighted maximum-likelihood fit. Logistic responses may be fractional in
// [0,1] (quasi-binomial); weights are nonnegative, not all zero; the optional
// offset enters the linear predictor unpenalized with coefficient 1.
// Logistic uses iteratively reweighted least squares (Newton with step
// halving); Linear is a direct weighted least-squares solve. A design that is
// rank-deficient after weighting raises RankDeficiencyError; IRLS that runs
// out of iterations returns converged = false rather than throwing.
GlmFit fit_glm(const DesignMatrix& X, const Eigen::VectorXd& y,
               const Eigen::VectorXd& weights,
               const Eigen::VectorXd* offset, GlmFamily family,
               const GlmOptions& options = {});

// Response-scale predictions on new rows; column names must match the fit.
// Logistic clips the linear predictor to +/-30 before the inverse logit.
Eigen::VectorXd predict_glm(const GlmFit& fit, const DesignMatrix& X,
                            const Eigen::VectorXd* offset = nullptr);

// Weighted log-likelihood of a logistic model evaluated at linear predictor
// eta = offset + X beta (already assembled by the caller).
double logistic_loglik(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                       const Eigen::VectorXd& weights);

}  // namespace htmle

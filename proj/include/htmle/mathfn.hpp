#pragma once

#include <algorithm>
#include <cmath>

namespace htmle {

// Linear predictors are clipped to +/- this bound before inverse-logit,
// keeping probabilities inside [~9.4e-14, 1 - 9.4e-14] and logits finite.
inline constexpr double kLinearPredictorClip = 30.0;

// Probability-scale predictions are clipped to this floor (and 1 - floor)
// before entering any logit or log-loss.
inline constexpr double kProbClip = 1e-6;

inline double clip(double x, double lo, double hi) {
  return std::min(std::max(x, lo), hi);
}

inline double expit(double eta) {
  eta = clip(eta, -kLinearPredictorClip, kLinearPredictorClip);
  return 1.0 / (1.0 + std::exp(-eta));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double clip_prob(double p, double floor = kProbClip) {
  return clip(p, floor, 1.0 - floor);
}

// Standard normal CDF.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided p-value for a z statistic.
inline double two_sided_p(double z) {
  return 2.0 * (1.0 - norm_cdf(std::fabs(z)));
}

// Negative log likelihood of a single Bernoulli-type observation; y may be
// fractional in [0,1], q is clipped away from {0,1} by the caller.
inline double binomial_nll(double y, double q) {
  return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

}  // namespace htmle

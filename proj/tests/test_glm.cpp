#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "htmle/errors.hpp"
#include "htmle/glm.hpp"
#include "htmle/mathfn.hpp"
#include "htmle/rng.hpp"

using namespace htmle;

namespace {

DesignMatrix intercept_only(int n) {
  DesignMatrix X;
  X.names = {"(intercept)"};
  X.values = Eigen::MatrixXd::Ones(n, 1);
  return X;
}

Eigen::VectorXd ones(int n) { return Eigen::VectorXd::Ones(n); }

// Independent 1-D golden-section maximizer of the weighted logistic
// log-likelihood for an intercept-only model with offset.
double golden_intercept(const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                        const Eigen::VectorXd& offset) {
  auto ll = [&](double b) {
    double s = 0.0;
    for (int i = 0; i < y.size(); ++i) {
      const double m = clip(expit(offset[i] + b), 1e-15, 1.0 - 1e-15);
      s += w[i] * (y[i] * std::log(m) + (1.0 - y[i]) * std::log(1.0 - m));
    }
    return s;
  };
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = -20.0, hi = 20.0;
  double c = hi - invphi * (hi - lo), d = lo + invphi * (hi - lo);
  double fc = ll(c), fd = ll(d);
  while (hi - lo > 1e-10) {
    if (fc > fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - invphi * (hi - lo);
      fc = ll(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + invphi * (hi - lo);
      fd = ll(d);
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("default options match the documented contract") {
  const GlmOptions opts;
  CHECK(opts.max_iter == 100);
  CHECK(opts.score_tol == 1e-8);
  CHECK(opts.dev_tol == 1e-12);
}

TEST_CASE("intercept-only logistic recovers logit of the mean") {
  // Frozen closed form: mean 0.25 -> beta0 = log(1/3).
  Eigen::VectorXd y(4);
  y << 1, 0, 0, 0;
  const GlmFit fit = fit_glm(intercept_only(4), y, ones(4), nullptr,
                             GlmFamily::Logistic);
  CHECK(fit.converged);
  CHECK(fit.beta[0] == doctest::Approx(-1.0986122886681098).epsilon(1e-10));
  for (int i = 0; i < 4; ++i)
    CHECK(fit.fitted[i] == doctest::Approx(0.25).epsilon(1e-10));
  CHECK(fit.max_abs_score <= 1e-8);
}

TEST_CASE("fractional responses fit the quasi-binomial intercept") {
  Eigen::VectorXd y(3);
  y << 0.3, 0.3, 0.3;
  const GlmFit fit = fit_glm(intercept_only(3), y, ones(3), nullptr,
                             GlmFamily::Logistic);
  // logit(0.3) frozen
  CHECK(fit.beta[0] == doctest::Approx(-0.8472978603872034).epsilon(1e-10));
}

TEST_CASE("binary-predictor slope equals the 2x2 log odds ratio") {
  // Rows weighted as counts: x=0 -> 3/10 events, x=1 -> 6/10 events.
  DesignMatrix X;
  X.names = {"(intercept)", "x"};
  X.values.resize(4, 2);
  X.values << 1, 0, 1, 0, 1, 1, 1, 1;
  Eigen::VectorXd y(4), w(4);
  y << 1, 0, 1, 0;
  w << 3, 7, 6, 4;
  const GlmFit fit = fit_glm(X, y, w, nullptr, GlmFamily::Logistic);
  CHECK(fit.converged);
  // Frozen: log(3/7) and log((6/4)/(3/7)) = log(3.5)
  CHECK(fit.beta[0] == doctest::Approx(-0.8472978603872034).epsilon(1e-9));
  CHECK(fit.beta[1] == doctest::Approx(1.2527629684953681).epsilon(1e-9));
}

TEST_CASE("rescaling all weights leaves coefficients unchanged") {
  Rng rng(99);
  DesignMatrix X;
  X.names = {"(intercept)", "x"};
  X.values.resize(40, 2);
  Eigen::VectorXd y(40), w(40);
  for (int i = 0; i < 40; ++i) {
    X.values(i, 0) = 1.0;
    X.values(i, 1) = rng.normal();
    y[i] = rng.uniform() < expit(0.3 + 0.8 * X.values(i, 1)) ? 1.0 : 0.0;
    w[i] = 0.2 + rng.uniform();
  }
  const GlmFit a = fit_glm(X, y, w, nullptr, GlmFamily::Logistic);
  const GlmFit b = fit_glm(X, y, (5.7 * w).eval(), nullptr, GlmFamily::Logistic);
  CHECK(std::abs(a.beta[0] - b.beta[0]) < 1e-10);
  CHECK(std::abs(a.beta[1] - b.beta[1]) < 1e-10);

  const GlmFit lin_a = fit_glm(X, y, w, nullptr, GlmFamily::Linear);
  const GlmFit lin_b =
      fit_glm(X, y, (5.7 * w).eval(), nullptr, GlmFamily::Linear);
  CHECK(std::abs(lin_a.beta[0] - lin_b.beta[0]) < 1e-10);
  CHECK(std::abs(lin_a.beta[1] - lin_b.beta[1]) < 1e-10);
}

TEST_CASE("linear family solves weighted least squares exactly") {
  // Hand-solved normal equations: X = [1 x], x = (0,1,2), y = (1,2,4),
  // X'X = [[3,3],[3,5]], X'y = [7,10] -> beta0 = 5/6, beta1 = 3/2.
  DesignMatrix X;
  X.names = {"(intercept)", "x"};
  X.values.resize(3, 2);
  X.values << 1, 0, 1, 1, 1, 2;
  Eigen::VectorXd y(3);
  y << 1, 2, 4;
  const GlmFit fit = fit_glm(X, y, ones(3), nullptr, GlmFamily::Linear);
  CHECK(fit.beta[0] == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(fit.beta[1] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(fit.converged);
}

TEST_CASE("linear fit with offset equal to the response gives zero betas") {
  Rng rng(7);
  DesignMatrix X;
  X.names = {"(intercept)", "x"};
  X.values.resize(20, 2);
  Eigen::VectorXd o(20);
  for (int i = 0; i < 20; ++i) {
    X.values(i, 0) = 1.0;
    X.values(i, 1) = rng.normal();
    o[i] = rng.normal();
  }
  const GlmFit fit = fit_glm(X, o, ones(20), &o, GlmFamily::Linear);
  CHECK(std::abs(fit.beta[0]) < 1e-12);
  CHECK(std::abs(fit.beta[1]) < 1e-12);
  CHECK(fit.offset_used);
}

TEST_CASE("constant logistic offset shifts the intercept") {
  Eigen::VectorXd y(5);
  y << 1, 1, 0, 0, 0;
  const GlmFit base = fit_glm(intercept_only(5), y, ones(5), nullptr,
                              GlmFamily::Logistic);
  const Eigen::VectorXd off = Eigen::VectorXd::Constant(5, 0.7);
  const GlmFit shifted = fit_glm(intercept_only(5), y, ones(5), &off,
                                 GlmFamily::Logistic);
  CHECK(shifted.beta[0] == doctest::Approx(base.beta[0] - 0.7).epsilon(1e-8));
}

TEST_CASE("IRLS matches an independent golden-section maximizer") {
  Rng rng(1234);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 15 + static_cast<int>(rng.uniform_int(20));
    Eigen::VectorXd y(n), w(n), o(n);
    for (int i = 0; i < n; ++i) {
      y[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      w[i] = 0.5 + rng.uniform();
      o[i] = rng.normal();
    }
    // keep both outcome values present so the MLE is interior
    y[0] = 0.0;
    y[1] = 1.0;
    const GlmFit fit = fit_glm(intercept_only(n), y, w, &o,
                               GlmFamily::Logistic);
    const double oracle = golden_intercept(y, w, o);
    CHECK(std::abs(fit.beta[0] - oracle) < 1e-4);
  }
}

TEST_CASE("predictions reproduce fitted values and enforce schemas") {
  Rng rng(5);
  DesignMatrix X;
  X.names = {"(intercept)", "x"};
  X.values.resize(30, 2);
  Eigen::VectorXd y(30);
  for (int i = 0; i < 30; ++i) {
    X.values(i, 0) = 1.0;
    X.values(i, 1) = rng.normal();
    y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  }
  const GlmFit fit = fit_glm(X, y, ones(30), nullptr, GlmFamily::Logistic);
  const Eigen::VectorXd pred = predict_glm(fit, X);
  for (int i = 0; i < 30; ++i)
    CHECK(std::abs(pred[i] - fit.fitted[i]) < 1e-12);

  DesignMatrix wrong = X;
  wrong.names = {"(intercept)", "z"};
  CHECK_THROWS_AS(predict_glm(fit, wrong), DataError);

  // Offset-consistency: a fit that used an offset requires one to predict.
  const Eigen::VectorXd off = Eigen::VectorXd::Constant(30, 0.3);
  const GlmFit fit_off = fit_glm(X, y, ones(30), &off, GlmFamily::Logistic);
  CHECK_THROWS_AS(predict_glm(fit_off, X), DataError);
  CHECK_NOTHROW(predict_glm(fit_off, X, &off));

  // Zero coefficients predict 0.5 under the logistic family.
  GlmFit zero = fit;
  zero.beta.setZero();
  const Eigen::VectorXd half = predict_glm(zero, X);
  for (int i = 0; i < 30; ++i) CHECK(half[i] == doctest::Approx(0.5));
}

TEST_CASE("rank deficiency raises instead of silently dropping columns") {
  DesignMatrix X;
  X.names = {"(intercept)", "x", "x_copy"};
  X.values.resize(10, 3);
  Rng rng(17);
  Eigen::VectorXd y(10);
  for (int i = 0; i < 10; ++i) {
    X.values(i, 0) = 1.0;
    X.values(i, 1) = rng.normal();
    X.values(i, 2) = X.values(i, 1);
    y[i] = i % 2;
  }
  CHECK_THROWS_AS(fit_glm(X, y, ones(10), nullptr, GlmFamily::Logistic),
                  RankDeficiencyError);
  CHECK_THROWS_AS(fit_glm(X, y, ones(10), nullptr, GlmFamily::Linear),
                  RankDeficiencyError);
}

TEST_CASE("perfect separation stays finite and clipped") {
  DesignMatrix X;
  X.names = {"(intercept)", "x"};
  X.values.resize(8, 2);
  Eigen::VectorXd y(8);
  for (int i = 0; i < 8; ++i) {
    X.values(i, 0) = 1.0;
    X.values(i, 1) = i < 4 ? -1.0 : 1.0;
    y[i] = i < 4 ? 0.0 : 1.0;
  }
  GlmFit fit;
  CHECK_NOTHROW(fit = fit_glm(X, y, ones(8), nullptr, GlmFamily::Logistic));
  CHECK(std::isfinite(fit.beta[0]));
  CHECK(std::isfinite(fit.beta[1]));
  for (int i = 0; i < 8; ++i) {
    CHECK(fit.fitted[i] > 0.0);
    CHECK(fit.fitted[i] < 1.0);
  }
}

TEST_CASE("input validation rejects malformed problems") {
  DesignMatrix X = intercept_only(3);
  Eigen::VectorXd y(3);
  y << 0, 1, 0;
  Eigen::VectorXd w = ones(3);

  Eigen::VectorXd bad_y(2);
  bad_y << 0, 1;
  CHECK_THROWS_AS(fit_glm(X, bad_y, w, nullptr, GlmFamily::Logistic),
                  DataError);

  Eigen::VectorXd zero_w = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(fit_glm(X, y, zero_w, nullptr, GlmFamily::Logistic),
                  DataError);

  Eigen::VectorXd neg_w = ones(3);
  neg_w[1] = -0.5;
  CHECK_THROWS_AS(fit_glm(X, y, neg_w, nullptr, GlmFamily::Logistic),
                  DataError);

  Eigen::VectorXd out_y(3);
  out_y << 0, 1.5, 0;
  CHECK_THROWS_AS(fit_glm(X, out_y, w, nullptr, GlmFamily::Logistic),
                  DataError);

  DesignMatrix nan_X = X;
  nan_X.values(1, 0) = std::nan("");
  CHECK_THROWS_AS(fit_glm(nan_X, y, w, nullptr, GlmFamily::Logistic),
                  DataError);

  DesignMatrix dup = X;
  dup.names = {"a"};
  DesignMatrix dup2;
  dup2.names = {"a", "a"};
  dup2.values = Eigen::MatrixXd::Ones(3, 2);
  CHECK_THROWS_AS(dup2.validate(), DataError);
}

TEST_CASE("logistic log likelihood helper matches a direct evaluation") {
  Eigen::VectorXd eta(3), y(3), w(3);
  eta << 0.0, 1.0, -2.0;
  y << 1, 0, 1;
  w << 1, 2, 0.5;
  double direct = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double m = expit(eta[i]);
    direct += w[i] * (y[i] * std::log(m) + (1 - y[i]) * std::log(1 - m));
  }
  CHECK(logistic_loglik(eta, y, w) == doctest::Approx(direct).epsilon(1e-12));
}

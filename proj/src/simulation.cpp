#include "htmle/simulation.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include "htmle/errors.hpp"
#include "htmle/mathfn.hpp"

namespace htmle {

void Sim1Config::validate() const {
  if (n_clusters < 2)
    throw ConfigError("simulation needs at least two clusters");
  if (!(size_mean > 0.0))
    throw ConfigError("mean cluster size must be positive");
  if (!(size_sd >= 0.0))
    throw ConfigError("cluster size spread must be nonnegative");
  if (!(w_corr >= -1.0 && w_corr <= 1.0))
    throw ConfigError("covariate correlation must lie in [-1, 1]");
  if (!(w_icc >= 0.0 && w_icc <= 1.0))
    throw ConfigError("within-cluster covariate correlation must lie in [0, 1]");
  if (!(error_rho >= 0.0 && error_rho < 1.0))
    throw ConfigError("error dependence must lie in [0, 1)");
}

std::vector<double> copula_uniforms(std::size_t n, double rho, Rng& rng) {
  if (!(rho >= 0.0 && rho < 1.0))
    throw ConfigError("copula correlation must lie in [0, 1)");
  const double z0 = rng.normal();
  const double a = std::sqrt(rho), b = std::sqrt(1.0 - rho);
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = norm_cdf(a * z0 + b * rng.normal());
  return u;
}

namespace {

struct ClusterDraw {
  Cluster cluster;
  double yc1 = 0.0, yc0 = 0.0;
  double g = 0.5;
};

ClusterDraw draw_cluster(const Sim1Config& cfg, Rng& rng, int index) {
  ClusterDraw out;
  const long size = std::lround(rng.normal(cfg.size_mean, cfg.size_sd));
  const std::size_t n = static_cast<std::size_t>(size < 1 ? 1 : size);

  std::vector<double> w1(n), w2(n);
  const double mix = std::sqrt(1.0 - cfg.w_corr * cfg.w_corr);
  // One covariate pair shared by the whole cluster plus an idiosyncratic pair
  // per member; both carry corr(W1, W2) = w_corr, so the blend preserves unit
  // marginal variances and the within-individual correlation for any w_icc.
  const double s1 = rng.normal();
  const double s2 = cfg.w_corr * s1 + mix * rng.normal();
  const double load_shared = std::sqrt(cfg.w_icc);
  const double load_own = std::sqrt(1.0 - cfg.w_icc);
  double w1c = 0.0, w2c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = rng.normal();
    const double z2 = cfg.w_corr * z1 + mix * rng.normal();
    w1[i] = load_shared * s1 + load_own * z1;
    w2[i] = load_shared * s2 + load_own * z2;
    w1c += w1[i];
    w2c += w2[i];
  }
  w1c /= static_cast<double>(n);
  w2c /= static_cast<double>(n);

  out.g = expit(0.75 * w1c);
  const int a = rng.bernoulli(out.g) ? 1 : 0;

  const std::vector<double> u =
      copula_uniforms(n, cfg.error_dependence ? cfg.error_rho : 0.0, rng);

  out.cluster.id = "c" + std::to_string(index + 1);
  out.cluster.env = {w1c, w2c};
  out.cluster.exposure = a;
  out.cluster.members.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double shared = 0.25 + 0.15 * w1c +
                          (cfg.covariate_interference ? 0.25 * w1[i] + w2c
                                                      : 1.15 * w1[i] + w2[i]);
    const double p1 = expit(shared + 0.10);
    const double p0 = expit(shared);
    double y1 = u[i] < p1 ? 1.0 : 0.0;
    const double y0 = u[i] < p0 ? 1.0 : 0.0;
    if (cfg.null_effect) y1 = y0;
    out.yc1 += y1;
    out.yc0 += y0;
    out.cluster.members[i].cluster_id = out.cluster.id;
    out.cluster.members[i].w = {w1[i], w2[i]};
    out.cluster.members[i].outcome = cfg.null_effect ? y0 : (a == 1 ? y1 : y0);
  }
  out.yc1 /= static_cast<double>(n);
  out.yc0 /= static_cast<double>(n);
  return out;
}

}  // namespace

SimulatedWorld simulate_world(const Sim1Config& cfg, Rng& rng) {
  cfg.validate();
  SimulatedWorld world;
  world.dataset.e_names = {"W1c", "W2c"};
  world.dataset.w_names = {"W1", "W2"};
  world.dataset.weight_scheme = WeightScheme::PerCluster;
  world.dataset.clusters.reserve(static_cast<std::size_t>(cfg.n_clusters));
  for (int j = 0; j < cfg.n_clusters; ++j) {
    ClusterDraw draw = draw_cluster(cfg, rng, j);
    world.dataset.clusters.push_back(std::move(draw.cluster));
    world.counterfactual_yc_1.push_back(draw.yc1);
    world.counterfactual_yc_0.push_back(draw.yc0);
    world.true_g.push_back(draw.g);
  }
  assign_weights(world.dataset, WeightScheme::PerCluster);
  world.dataset.validate();
  return world;
}

SimulatedWorld simulate_world(const Sim1Config& cfg) {
  Rng rng(derive_seed(cfg.seed, kStreamReplication, 0));
  return simulate_world(cfg, rng);
}

TruthEstimate true_ate(const Sim1Config& cfg, std::size_t population_clusters) {
  cfg.validate();
  if (population_clusters < 2)
    throw ConfigError("truth population needs at least two clusters");
  Rng rng(derive_seed(cfg.seed, kStreamTruth, 0));
  TruthEstimate t;
  t.population = population_clusters;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t j = 0; j < population_clusters; ++j) {
    const ClusterDraw draw = draw_cluster(cfg, rng, static_cast<int>(j));
    const double diff = draw.yc1 - draw.yc0;
    t.psi_1 += draw.yc1;
    t.psi_0 += draw.yc0;
    sum += diff;
    sum_sq += diff * diff;
  }
  const double n = static_cast<double>(population_clusters);
  t.psi_1 /= n;
  t.psi_0 /= n;
  t.ate = sum / n;
  const double var = (sum_sq - sum * sum / n) / (n - 1.0);
  t.mcse = std::sqrt(var / n);
  return t;
}

namespace {

LearnerSpec cluster_glm(std::vector<std::string> adjustment,
                        bool include_exposure = true) {
  LearnerSpec s;
  s.level = LearnerLevel::ClusterLevel;
  s.adjustment = std::move(adjustment);
  s.include_exposure = include_exposure;
  return s;
}

LearnerSpec individual_glm(std::vector<std::string> adjustment,
                           bool include_exposure = true) {
  LearnerSpec s;
  s.level = LearnerLevel::IndividualLevel;
  s.adjustment = std::move(adjustment);
  s.include_exposure = include_exposure;
  return s;
}

}  // namespace

EstimatorBinding make_standard_binding(const std::string& token) {
  EstimatorBinding b;
  b.name = token;
  if (token == "unadjusted") {
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t) { return unadjusted(d); };
  } else if (token == "iptw") {
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t seed) {
      return iptw(d, GSpec::glm(cluster_glm({"W1c", "W2c"})),
                  TmleOptions{0.01, seed});
    };
  } else if (token == "gcomp") {
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t seed) {
      return gcomp(d, QSpec::glm(cluster_glm({"W1c", "W2c"})),
                   TmleOptions{0.01, seed});
    };
  } else if (token == "tmle-cluster") {
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t seed) {
      return tmle_cluster(d, QSpec::glm(cluster_glm({"W1c", "W2c"})),
                          GSpec::glm(cluster_glm({"W1c", "W2c"}, false)),
                          TmleOptions{0.01, seed});
    };
  } else if (token == "tmle-cluster:ib") {
    // Pooled individual-level outcome regression on the cluster covariates
    // plus each member's own covariates, averaged within cluster before
    // cluster-level targeting.
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t seed) {
      TmleResult r = tmle_cluster(
          d, QSpec::glm(individual_glm({"W1c", "W2c", "W1", "W2"})),
          GSpec::glm(cluster_glm({"W1c", "W2c"}, false)),
          TmleOptions{0.01, seed});
      r.estimator = "tmle-cluster:ib";
      return r;
    };
  } else if (token == "tmle-individual") {
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t seed) {
      return tmle_individual(d, QSpec::glm(individual_glm({"W1", "W2"})),
                             GSpec::glm(individual_glm({"W1", "W2"}, false)),
                             TmleOptions{0.01, seed});
    };
  } else if (token == "adaptive-prespec") {
    b.fn = [](const HierarchicalDataset& d, const SimulatedWorld&,
              std::uint64_t seed) {
      const std::vector<std::vector<std::string>> candidates = {
          {}, {"W1c"}, {"W2c"}, {"W1c", "W2c"}};
      return adaptive_prespec(d, candidates, 0.5, TmleOptions{0.01, seed});
    };
  } else {
    throw ConfigError("unknown estimator token '" + token + "'");
  }
  return b;
}

namespace {

struct RepOutcome {
  bool ok = false;
  double est = 0.0;
  bool covered = false;
  bool rejected = false;
  double ci_low = 0.0, ci_high = 0.0, p = 1.0;
};

}  // namespace

ReplicationReport replicate(const Sim1Config& cfg, int n_reps,
                            const std::vector<EstimatorBinding>& bindings,
                            const TruthEstimate& truth, int threads,
                            bool keep_traces) {
  cfg.validate();
  if (n_reps < 1) throw ConfigError("replication count must be positive");
  if (bindings.empty()) throw ConfigError("no estimators to replicate");
  if (threads < 1) threads = 1;

  const std::size_t nb = bindings.size();
  std::vector<std::vector<RepOutcome>> slots(
      nb, std::vector<RepOutcome>(static_cast<std::size_t>(n_reps)));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= n_reps) return;
      const std::uint64_t rep_seed =
          derive_seed(cfg.seed, kStreamReplication,
                      static_cast<std::uint64_t>(r));
      Rng rng(rep_seed);
      const SimulatedWorld world = simulate_world(cfg, rng);
      for (std::size_t bi = 0; bi < nb; ++bi) {
        RepOutcome& slot = slots[bi][static_cast<std::size_t>(r)];
        try {
          const TmleResult res = bindings[bi].fn(world.dataset, world, rep_seed);
          slot.ok = true;
          slot.est = res.ate;
          slot.covered = res.ci_low <= truth.ate && truth.ate <= res.ci_high;
          slot.rejected = res.p_value < 0.05;
          slot.ci_low = res.ci_low;
          slot.ci_high = res.ci_high;
          slot.p = res.p_value;
        } catch (const std::exception&) {
          slot.ok = false;
        }
      }
    }
  };

  const int n_workers = std::min(threads, n_reps);
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  ReplicationReport report;
  report.config = cfg;
  report.truth = truth;
  report.n_reps = n_reps;
  report.estimators.reserve(nb);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    EstimatorSummary s;
    s.name = bindings[bi].name;
    double sum = 0.0;
    for (const RepOutcome& o : slots[bi]) {
      if (!o.ok) {
        ++s.n_failed;
        continue;
      }
      ++s.n_ok;
      sum += o.est;
    }
    if (s.n_ok > 0) {
      const double n = static_cast<double>(s.n_ok);
      const double mean = sum / n;
      double ss = 0.0;
      int covered = 0, rejected = 0;
      for (const RepOutcome& o : slots[bi]) {
        if (!o.ok) continue;
        ss += (o.est - mean) * (o.est - mean);
        covered += o.covered;
        rejected += o.rejected;
      }
      s.bias_pct = (mean - truth.ate) * 100.0;
      s.sigma_pct = std::sqrt(ss / n) * 100.0;
      s.rmse_pct = std::sqrt(s.bias_pct * s.bias_pct + s.sigma_pct * s.sigma_pct);
      s.coverage_pct = 100.0 * covered / n;
      s.reject_pct = 100.0 * rejected / n;
    }
    report.estimators.push_back(std::move(s));
  }
  if (keep_traces) {
    report.traces.reserve(static_cast<std::size_t>(n_reps) * nb);
    for (int r = 0; r < n_reps; ++r)
      for (std::size_t bi = 0; bi < nb; ++bi) {
        const RepOutcome& o = slots[bi][static_cast<std::size_t>(r)];
        ReplicationTrace t;
        t.rep = r;
        t.estimator = bindings[bi].name;
        t.ok = o.ok;
        t.estimate = o.est;
        t.ci_low = o.ci_low;
        t.ci_high = o.ci_high;
        t.p_value = o.p;
        report.traces.push_back(std::move(t));
      }
  }
  return report;
}

std::string report_to_csv(const ReplicationReport& report) {
  auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  std::string csv = "estimator,n_ok,n_failed,bias_pct,sigma_pct,rmse_pct,"
                    "coverage_pct,";
  csv += report.config.null_effect ? "type1_pct" : "power_pct";
  csv += "\n";
  for (const EstimatorSummary& s : report.estimators) {
    csv += s.name + "," + std::to_string(s.n_ok) + "," +
           std::to_string(s.n_failed) + "," + fmt(s.bias_pct) + "," +
           fmt(s.sigma_pct) + "," + fmt(s.rmse_pct) + "," +
           fmt(s.coverage_pct) + "," + fmt(s.reject_pct) + "\n";
  }
  return csv;
}

}  // namespace htmle

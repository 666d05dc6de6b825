#include "htmle/serialize.hpp"

#include <cstdio>
#include <ctime>

#include "htmle/errors.hpp"

namespace htmle {

namespace {

const char* model_name(ModelKind m) {
  return m == ModelKind::I ? "cluster" : "individual";
}

void require_keys(const nlohmann::json& j,
                  std::initializer_list<const char*> allowed,
                  const char* where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok)
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

}  // namespace

nlohmann::json result_to_json(const TmleResult& r) {
  nlohmann::json j;
  j["estimator"] = r.estimator;
  j["model"] = model_name(r.model);
  j["psi_1"] = r.psi_1;
  j["psi_0"] = r.psi_0;
  j["ate"] = r.ate;
  j["variance"] = r.variance;
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  j["p_value"] = r.p_value;
  j["risk_ratio"] = r.risk_ratio;
  j["rr_ci_low"] = r.rr_ci_low;
  j["rr_ci_high"] = r.rr_ci_high;
  j["rr_p_value"] = r.rr_p_value;
  j["epsilon_1"] = r.epsilon_1;
  j["epsilon_0"] = r.epsilon_0;
  j["ic_values"] = r.ic_values;
  nlohmann::json d;
  d["g_truncated"] = r.diagnostics.g_truncated;
  d["eps1_irls_converged"] = r.diagnostics.eps1_irls_converged;
  d["eps0_irls_converged"] = r.diagnostics.eps0_irls_converged;
  d["eps1_golden"] = r.diagnostics.eps1_golden;
  d["eps0_golden"] = r.diagnostics.eps0_golden;
  d["q_meta_weights"] = r.diagnostics.q_meta_weights;
  d["g_meta_weights"] = r.diagnostics.g_meta_weights;
  d["q_cv_risks"] = r.diagnostics.q_cv_risks;
  d["g_cv_risks"] = r.diagnostics.g_cv_risks;
  d["notes"] = r.diagnostics.notes;
  j["diagnostics"] = std::move(d);
  if (!r.selection.empty()) {
    nlohmann::json sel = nlohmann::json::array();
    for (const CandidateRecord& c : r.selection)
      sel.push_back({{"label", c.label}, {"cv_ic_variance", c.cv_ic_variance}});
    j["selection"] = std::move(sel);
    j["selected_candidate"] = r.selected_candidate;
  }
  return j;
}

std::string format_ate_line(const TmleResult& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.1f%% (95%% CI: %.1f%%, %.1f%%)",
                r.ate * 100.0, r.ci_low * 100.0, r.ci_high * 100.0);
  return std::string(buf);
}

nlohmann::json config_to_json(const Sim1Config& cfg) {
  return nlohmann::json{{"n_clusters", cfg.n_clusters},
                        {"size_mean", cfg.size_mean},
                        {"size_sd", cfg.size_sd},
                        {"w_corr", cfg.w_corr},
                        {"w_icc", cfg.w_icc},
                        {"covariate_interference", cfg.covariate_interference},
                        {"error_dependence", cfg.error_dependence},
                        {"error_rho", cfg.error_rho},
                        {"null_effect", cfg.null_effect},
                        {"seed", cfg.seed}};
}

Sim1Config sim_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("simulation config must be an object");
  require_keys(j,
               {"n_clusters", "size_mean", "size_sd", "w_corr", "w_icc",
                "covariate_interference", "error_dependence", "error_rho",
                "null_effect", "seed"},
               "simulation config");
  Sim1Config cfg;
  auto load = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("bad value for simulation config field '") +
                        key + "'");
    }
  };
  load("n_clusters", cfg.n_clusters);
  load("size_mean", cfg.size_mean);
  load("size_sd", cfg.size_sd);
  load("w_corr", cfg.w_corr);
  load("w_icc", cfg.w_icc);
  load("covariate_interference", cfg.covariate_interference);
  load("error_dependence", cfg.error_dependence);
  load("error_rho", cfg.error_rho);
  load("null_effect", cfg.null_effect);
  load("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

nlohmann::json truth_to_json(const TruthEstimate& t) {
  return nlohmann::json{{"ate", t.ate},
                        {"psi_1", t.psi_1},
                        {"psi_0", t.psi_0},
                        {"mcse", t.mcse},
                        {"population", t.population}};
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::string iso_timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return std::string(buf);
}

}  // namespace htmle

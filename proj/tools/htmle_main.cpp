// htmle: targeted maximum likelihood estimation for hierarchical (clustered)
// data, plus a Monte-Carlo simulation harness. See README.md.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "htmle/csv.hpp"
#include "htmle/errors.hpp"
#include "htmle/estimators.hpp"
#include "htmle/serialize.hpp"
#include "htmle/simulation.hpp"
#include "htmle/version.hpp"

namespace {

using htmle::ConfigError;
using htmle::DataError;
using nlohmann::json;

std::string read_config_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const std::string& path) {
  try {
    return json::parse(read_config_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path + "': " + e.what());
  }
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw DataError("failed writing '" + path + "'");
}

void require_keys(const json& j, std::initializer_list<const char*> allowed,
                  const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok)
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

// ---- estimator-spec JSON ----------------------------------------------------

htmle::LearnerSpec parse_learner(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  require_keys(j, {"level", "adjustment", "include_exposure", "label"}, where);
  htmle::LearnerSpec s;
  const std::string level = j.value("level", std::string());
  if (level == "cluster")
    s.level = htmle::LearnerLevel::ClusterLevel;
  else if (level == "individual")
    s.level = htmle::LearnerLevel::IndividualLevel;
  else
    throw ConfigError(where + ": level must be 'cluster' or 'individual'");
  if (j.contains("adjustment")) {
    if (!j["adjustment"].is_array())
      throw ConfigError(where + ": adjustment must be an array of column names");
    for (const auto& a : j["adjustment"]) {
      if (!a.is_string())
        throw ConfigError(where + ": adjustment entries must be strings");
      s.adjustment.push_back(a.get<std::string>());
    }
  }
  s.include_exposure = j.value("include_exposure", true);
  s.label = j.value("label", std::string());
  return s;
}

htmle::SlConfig parse_sl_config(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  require_keys(j, {"library", "loss", "folds", "mode"}, where);
  htmle::SlConfig cfg;
  if (!j.contains("library") || !j["library"].is_array() || j["library"].empty())
    throw ConfigError(where + ": library must be a nonempty array of learners");
  std::size_t k = 0;
  for (const auto& entry : j["library"])
    cfg.library.push_back(
        parse_learner(entry, where + ".library[" + std::to_string(k++) + "]"));
  const std::string loss = j.value("loss", std::string("cluster-nll"));
  if (loss == "cluster-nll")
    cfg.loss = htmle::SlLoss::ClusterNLL;
  else if (loss == "individual-nll")
    cfg.loss = htmle::SlLoss::IndividualNLL;
  else if (loss == "cluster-mse")
    cfg.loss = htmle::SlLoss::ClusterMSE;
  else if (loss == "individual-mse")
    cfg.loss = htmle::SlLoss::IndividualMSE;
  else
    throw ConfigError(where + ": unknown loss '" + loss + "'");
  cfg.V = j.value("folds", 0);
  const std::string mode = j.value("mode", std::string("convex"));
  if (mode == "convex")
    cfg.mode = htmle::SlMode::Convex;
  else if (mode == "discrete")
    cfg.mode = htmle::SlMode::Discrete;
  else
    throw ConfigError(where + ": mode must be 'convex' or 'discrete'");
  return cfg;
}

htmle::QSpec parse_q(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  require_keys(j, {"glm", "superlearner"}, where);
  const bool has_glm = j.contains("glm");
  const bool has_sl = j.contains("superlearner");
  if (has_glm == has_sl)
    throw ConfigError(where + " must hold exactly one of 'glm', 'superlearner'");
  if (has_glm) return htmle::QSpec::glm(parse_learner(j["glm"], where + ".glm"));
  return htmle::QSpec::superlearner(
      parse_sl_config(j["superlearner"], where + ".superlearner"));
}

htmle::GSpec parse_g(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  require_keys(j, {"known", "known_per_cluster", "glm", "superlearner"}, where);
  const int forms = j.contains("known") + j.contains("known_per_cluster") +
                    j.contains("glm") + j.contains("superlearner");
  if (forms != 1)
    throw ConfigError(where + " must hold exactly one of 'known', "
                              "'known_per_cluster', 'glm', 'superlearner'");
  if (j.contains("known"))
    return htmle::GSpec::known_value(j["known"].get<double>());
  if (j.contains("known_per_cluster")) {
    if (!j["known_per_cluster"].is_array())
      throw ConfigError(where + ".known_per_cluster must be an array");
    return htmle::GSpec::known_vector(
        j["known_per_cluster"].get<std::vector<double>>());
  }
  if (j.contains("glm"))
    return htmle::GSpec::glm(parse_learner(j["glm"], where + ".glm"));
  return htmle::GSpec::superlearner(
      parse_sl_config(j["superlearner"], where + ".superlearner"));
}

// ---- subcommands ------------------------------------------------------------

struct SimulateArgs {
  std::string config_path;
  std::string out_prefix;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int run_simulate(const SimulateArgs& args) {
  htmle::Sim1Config cfg;
  if (!args.config_path.empty())
    cfg = htmle::sim_config_from_json(parse_json_file(args.config_path));
  if (args.seed_set) cfg.seed = args.seed;
  cfg.validate();

  const htmle::SimulatedWorld world = htmle::simulate_world(cfg);

  const std::string data_path = args.out_prefix + "_data.csv";
  const std::string cf_path = args.out_prefix + "_counterfactuals.csv";
  const std::string schema_path = args.out_prefix + "_schema.cfg";
  const std::string manifest_path = args.out_prefix + "_manifest.json";

  write_text(data_path, htmle::dataset_to_csv(world.dataset));

  std::string cf = "cluster_id,yc1,yc0,true_g\n";
  for (std::size_t j = 0; j < world.dataset.n_clusters(); ++j) {
    cf += world.dataset.clusters[j].id + "," +
          htmle::format_double(world.counterfactual_yc_1[j]) + "," +
          htmle::format_double(world.counterfactual_yc_0[j]) + "," +
          htmle::format_double(world.true_g[j]) + "\n";
  }
  write_text(cf_path, cf);

  std::string schema;
  for (const std::string& name : world.dataset.e_names)
    schema += name + "=E\n";
  for (const std::string& name : world.dataset.w_names)
    schema += name + "=W\n";
  write_text(schema_path, schema);

  const json cfg_json = htmle::config_to_json(cfg);
  json manifest;
  manifest["tool"] = "htmle";
  manifest["version"] = htmle::kVersion;
  manifest["command"] = "simulate";
  manifest["created_utc"] = htmle::iso_timestamp_utc();
  manifest["seed"] = cfg.seed;
  manifest["config"] = cfg_json;
  manifest["config_digest"] = htmle::hex64(htmle::fnv1a64(cfg_json.dump()));
  manifest["outputs"] = {data_path, cf_path, schema_path};
  write_text(manifest_path, manifest.dump(2) + "\n");

  std::printf("simulated %zu clusters, %zu individuals -> %s\n",
              world.dataset.n_clusters(), world.dataset.n_individuals(),
              data_path.c_str());
  return 0;
}

struct EstimateArgs {
  std::string data_path, schema_path, spec_path, out_path;
  std::uint64_t seed = 1;
};

int run_estimate(const EstimateArgs& args) {
  const htmle::ColumnSchema schema = htmle::load_schema(args.schema_path);
  const htmle::HierarchicalDataset data = htmle::load_csv(args.data_path, schema);

  const json spec = parse_json_file(args.spec_path);
  if (!spec.is_object())
    throw ConfigError("estimator spec must be a JSON object");
  require_keys(spec,
               {"estimator", "outcome_regression", "propensity", "candidates",
                "known_g", "g_truncation"},
               "estimator spec");
  if (!spec.contains("estimator") || !spec["estimator"].is_string())
    throw ConfigError("estimator spec needs a string 'estimator'");
  const std::string which = spec["estimator"].get<std::string>();

  htmle::TmleOptions options;
  options.g_truncation = spec.value("g_truncation", 0.01);
  options.seed = args.seed;

  auto forbid = [&](const char* key) {
    if (spec.contains(key))
      throw ConfigError("estimator '" + which + "' does not use '" + key + "'");
  };
  auto need = [&](const char* key) -> const json& {
    if (!spec.contains(key))
      throw ConfigError("estimator '" + which + "' needs '" + key + "'");
    return spec[key];
  };

  htmle::TmleResult result;
  if (which == "unadjusted") {
    forbid("outcome_regression");
    forbid("propensity");
    forbid("candidates");
    forbid("known_g");
    result = htmle::unadjusted(data);
  } else if (which == "iptw") {
    forbid("outcome_regression");
    forbid("candidates");
    forbid("known_g");
    result = htmle::iptw(data, parse_g(need("propensity"), "propensity"),
                         options);
  } else if (which == "gcomp") {
    forbid("propensity");
    forbid("candidates");
    forbid("known_g");
    result = htmle::gcomp(
        data, parse_q(need("outcome_regression"), "outcome_regression"),
        options);
  } else if (which == "tmle-cluster" || which == "tmle-individual") {
    forbid("candidates");
    forbid("known_g");
    const htmle::QSpec q =
        parse_q(need("outcome_regression"), "outcome_regression");
    const htmle::GSpec g = parse_g(need("propensity"), "propensity");
    result = which == "tmle-cluster" ? htmle::tmle_cluster(data, q, g, options)
                                     : htmle::tmle_individual(data, q, g, options);
  } else if (which == "adaptive-prespec") {
    forbid("outcome_regression");
    forbid("propensity");
    const json& cand = need("candidates");
    if (!cand.is_array() || cand.empty())
      throw ConfigError("'candidates' must be a nonempty array of arrays");
    std::vector<std::vector<std::string>> candidates;
    for (const auto& entry : cand) {
      if (!entry.is_array())
        throw ConfigError("each candidate must be an array of column names");
      candidates.push_back(entry.get<std::vector<std::string>>());
    }
    const double known_g = spec.value("known_g", 0.5);
    result = htmle::adaptive_prespec(data, candidates, known_g, options);
  } else {
    throw ConfigError("unknown estimator '" + which + "'");
  }

  const json out = htmle::result_to_json(result);
  if (!args.out_path.empty()) write_text(args.out_path, out.dump(2) + "\n");

  std::printf("%s: ATE %s; p = %.4f\n", result.estimator.c_str(),
              htmle::format_ate_line(result).c_str(), result.p_value);
  if (args.out_path.empty()) std::printf("%s\n", out.dump(2).c_str());
  return 0;
}

struct ReplicateArgs {
  std::string config_path;
  std::string out_prefix;
  int reps = 2000;
  std::string estimators =
      "unadjusted,iptw,gcomp,tmle-cluster,tmle-cluster:ib,tmle-individual";
  int truth_pop = 10000;
  int threads = 0;  // 0 resolves to the hardware thread count
  bool traces = false;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int run_replicate(const ReplicateArgs& args) {
  htmle::Sim1Config cfg;
  if (!args.config_path.empty())
    cfg = htmle::sim_config_from_json(parse_json_file(args.config_path));
  if (args.seed_set) cfg.seed = args.seed;
  cfg.validate();
  if (args.truth_pop < 2)
    throw ConfigError("truth population must be at least 2");

  std::vector<std::string> tokens;
  {
    std::stringstream ss(args.estimators);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) tokens.push_back(tok);
  }
  if (tokens.empty()) throw ConfigError("no estimator tokens given");
  std::vector<htmle::EstimatorBinding> bindings;
  for (const std::string& tok : tokens)
    bindings.push_back(htmle::make_standard_binding(tok));

  int threads = args.threads;
  if (threads <= 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    threads = hw > 0 ? static_cast<int>(hw) : 1;
  }

  const htmle::TruthEstimate truth =
      htmle::true_ate(cfg, static_cast<std::size_t>(args.truth_pop));
  const htmle::ReplicationReport report = htmle::replicate(
      cfg, args.reps, bindings, truth, threads, args.traces);
  const std::string csv = htmle::report_to_csv(report);

  const std::string report_path = args.out_prefix + "_report.csv";
  const std::string manifest_path = args.out_prefix + "_manifest.json";
  write_text(report_path, csv);

  const json cfg_json = htmle::config_to_json(cfg);
  json digest_input;
  digest_input["config"] = cfg_json;
  digest_input["n_reps"] = args.reps;
  digest_input["estimators"] = tokens;
  digest_input["truth_pop"] = args.truth_pop;

  json manifest;
  manifest["tool"] = "htmle";
  manifest["version"] = htmle::kVersion;
  manifest["command"] = "replicate";
  manifest["created_utc"] = htmle::iso_timestamp_utc();
  manifest["seed"] = cfg.seed;
  manifest["config"] = cfg_json;
  manifest["n_reps"] = args.reps;
  manifest["estimators"] = tokens;
  manifest["truth"] = htmle::truth_to_json(truth);
  manifest["threads"] = threads;
  manifest["config_digest"] = htmle::hex64(htmle::fnv1a64(digest_input.dump()));
  manifest["outputs"] = {report_path};

  if (args.traces) {
    json traces = json::array();
    for (const htmle::ReplicationTrace& t : report.traces)
      traces.push_back({{"rep", t.rep},
                        {"estimator", t.estimator},
                        {"ok", t.ok},
                        {"estimate", t.estimate},
                        {"ci_low", t.ci_low},
                        {"ci_high", t.ci_high},
                        {"p_value", t.p_value}});
    const std::string traces_path = args.out_prefix + "_traces.json";
    write_text(traces_path, traces.dump(2) + "\n");
    manifest["outputs"].push_back(traces_path);
  }
  write_text(manifest_path, manifest.dump(2) + "\n");

  std::printf("truth: ate = %.4f%% (mcse %.4f%%) from %d clusters\n",
              truth.ate * 100.0, truth.mcse * 100.0, args.truth_pop);
  std::fputs(csv.c_str(), stdout);

  bool any_failed = false;
  for (const htmle::EstimatorSummary& s : report.estimators)
    any_failed = any_failed || s.n_failed > 0;
  if (any_failed) {
    std::fprintf(stderr, "replication failures:\n");
    for (const htmle::EstimatorSummary& s : report.estimators)
      if (s.n_failed > 0)
        std::fprintf(stderr, "  %s: %d of %d replications failed\n",
                     s.name.c_str(), s.n_failed, report.n_reps);
    return 4;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"targeted maximum likelihood estimation for clustered data"};
  app.set_version_flag("--version", std::string(htmle::kVersion));
  app.require_subcommand(1);

  SimulateArgs sim_args;
  CLI::App* sim = app.add_subcommand(
      "simulate", "draw one synthetic trial and write it to CSV");
  sim->add_option("--config", sim_args.config_path,
                  "simulation config JSON (defaults apply when omitted)");
  sim->add_option("--out", sim_args.out_prefix, "output path prefix")
      ->required();
  CLI::Option* sim_seed = sim->add_option("--seed", sim_args.seed,
                                          "override the config seed");

  EstimateArgs est_args;
  CLI::App* est = app.add_subcommand(
      "estimate", "run one estimator on a dataset");
  est->add_option("--data", est_args.data_path, "long-format CSV")->required();
  est->add_option("--schema", est_args.schema_path,
                  "column role file (name=E or name=W per line)")
      ->required();
  est->add_option("--spec", est_args.spec_path, "estimator spec JSON")
      ->required();
  est->add_option("--out", est_args.out_path, "result JSON path");
  est->add_option("--seed", est_args.seed,
                  "seed for cross-validation fold assignment");

  ReplicateArgs rep_args;
  CLI::App* rep = app.add_subcommand(
      "replicate", "Monte-Carlo study of the standard estimators");
  rep->add_option("--config", rep_args.config_path,
                  "simulation config JSON (defaults apply when omitted)");
  rep->add_option("--out", rep_args.out_prefix, "output path prefix")
      ->required();
  rep->add_option("--reps", rep_args.reps, "number of replications");
  rep->add_option("--estimators", rep_args.estimators,
                  "comma-separated estimator tokens");
  rep->add_option("--truth-pop", rep_args.truth_pop,
                  "clusters in the truth population");
  rep->add_option("--threads", rep_args.threads,
                  "worker threads (default: all hardware threads)");
  rep->add_flag("--traces", rep_args.traces,
                "also write per-replication results as JSON");
  CLI::Option* rep_seed = rep->add_option("--seed", rep_args.seed,
                                          "override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  sim_args.seed_set = sim_seed->count() > 0;
  rep_args.seed_set = rep_seed->count() > 0;

  try {
    if (sim->parsed()) return run_simulate(sim_args);
    if (est->parsed()) return run_estimate(est_args);
    return run_replicate(rep_args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const htmle::EstimationError& e) {
    std::fprintf(stderr, "estimation error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

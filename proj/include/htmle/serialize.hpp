#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "json.hpp"

#include "htmle/estimators.hpp"
#include "htmle/simulation.hpp"

namespace htmle {

// Full machine-readable rendering of an estimate (point estimates, inference,
// influence-curve values, diagnostics, selection records).
nlohmann::json result_to_json(const TmleResult& r);

// One-line human summary of the ATE, in percentage points with one decimal,
// e.g. "0.7% (95% CI: -0.1%, 1.4%)".
std::string format_ate_line(const TmleResult& r);

nlohmann::json config_to_json(const Sim1Config& cfg);
Sim1Config sim_config_from_json(const nlohmann::json& j);  // strict keys

nlohmann::json truth_to_json(const TruthEstimate& t);

// FNV-1a 64-bit over bytes, and its fixed-width hex rendering; used to stamp
// manifests with a digest of the effective configuration.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Current UTC time, e.g. "2026-02-03T04:05:06Z".
std::string iso_timestamp_utc();

}  // namespace htmle

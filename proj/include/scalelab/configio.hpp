#pragma once

#include <nlohmann/json.hpp>

#include "scalelab/harness.hpp"
#include "scalelab/lawfit.hpp"

namespace scalelab {

// Plain (alphabetically ordered) JSON is used everywhere so dumps are
// canonical and artifact bytes are reproducible.
using Json = nlohmann::json;

Json model_to_json(const ModelConfig& c);
ModelConfig model_from_json(const Json& j);
Json optim_to_json(const OptimConfig& c);
OptimConfig optim_from_json(const Json& j);
Json schedule_to_json(const Schedule& s);
Schedule schedule_from_json(const Json& j);
Json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
Json fit_config_to_json(const FitConfig& c);
FitConfig fit_config_from_json(const Json& j);

Json run_record_to_json(const RunRecord& r);
RunRecord run_record_from_json(const Json& j);

Json power_law_to_json(const PowerLaw& l);
PowerLaw power_law_from_json(const Json& j);
Json fit_report_to_json(const FitReport& r);
Json crossover_report_to_json(const CrossoverReport& r);
Json extrapolation_report_to_json(const ExtrapolationReport& r);

// Applies "dotted.key=value" overrides; values parse as JSON literals with
// a bare-string fallback. Unknown keys (paths not present in the document)
// are errors.
void apply_overrides(Json& j, const std::vector<std::string>& overrides);

// Rejects keys outside the RunConfig schema (no silent typos).
void check_run_config_keys(const Json& j);

// Cartesian sweep expansion: {"base": <run config>, "axes": {"dotted.key":
// [v...]}, "seeds": [s...]} -> one RunConfig per combination.
std::vector<RunConfig> expand_sweep(const Json& spec);

Json load_json_file(const std::string& path);
void write_json_file(const std::string& path, const Json& j);

}  // namespace scalelab

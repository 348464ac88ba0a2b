#include "smoke_run.hpp"

namespace flns::testing {

std::string source_path(const std::string& relative) { return std::string(FLNS_SOURCE_DIR) + "/" + relative; }

RunConfig smoke_config(const std::string& root) {
  RunConfig c = load_run_config(source_path("config/smoke.json"));
  c.artifact_dir = root + "/artifacts";
  c.report_dir = root + "/reports";
  c.fixed_prompts_path = source_path("config/fixed_prompts.json");
  return c;
}

void run_full_pipeline(const RunConfig& config) {
  train_model_stage(config);
  train_probes_stage(config);
  train_prompts_stage(config);
  eval_stage(config);
}

}  // namespace flns::testing

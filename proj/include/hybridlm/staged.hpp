#pragma once

#include <functional>

#include "hybridlm/importance.hpp"

namespace hybridlm {

// Injection points for persistence/resume; the pipeline itself stays file-free.
struct StageHooks {
  // Return true to skip stage `idx` (target h) and supply its saved artifacts.
  std::function<bool(int idx, int target_h, Model& student, ImportanceReport& report, RunLog& log)>
      try_resume;
  std::function<void(int idx, const Model& student, const ImportanceReport& report,
                     const RunLog& log)>
      on_stage_done;
};

struct PipelineResult {
  Model final_model;
  std::vector<RunLog> logs;
  std::vector<ImportanceReport> reports;
};

// The full conversion loop: per stage, estimate importance on the current
// model (LOO / MMR / reuse previous), replace the next least-important MHA
// mixers with MIL-initialized Mamba mixers, then distill against the original
// teacher. Every stage's hybrid is handed to on_stage_done for checkpointing.
PipelineResult staged_pipeline(const Model& teacher, const StageSchedule& schedule,
                               const TaskSpec& distill_data, const TaskSpec& eval_task,
                               int eval_count, const DistillRunConfig& distill_cfg,
                               const DistillRunConfig& mmr_cfg, const StageHooks& hooks = {});

}  // namespace hybridlm

#pragma once

#include <string>
#include <vector>

#include "hybridlm/bench.hpp"
#include "hybridlm/staged.hpp"

namespace hybridlm {

// One JSON file fully specifies a run; identical file + seed reproduce
// identical logs. HYBRIDLM_OUT_DIR overrides out_dir.
struct PipelineConfig {
  uint64_t seed = 1;
  std::string out_dir = "runs/out";
  ModelConfig model;
  MambaConfig mamba;
  TaskSpec train_task;
  TaskSpec eval_task;
  SftConfig teacher;
  DistillRunConfig distill;
  DistillRunConfig mmr;  // used by MMR scoring (steps default 100)
  StageSchedule schedule;
  int importance_eval_count = 64;
  BenchScenario bench;

  static PipelineConfig from_json_string(const std::string& text);
  static PipelineConfig load(const std::string& path);
  std::string to_json_string() const;
  void validate() const;
  std::string resolved_out_dir() const;
};

// Artifact names are pure functions of config + stage.
std::string teacher_ckpt_path(const PipelineConfig&);
std::string stage_ckpt_path(const PipelineConfig&, int h);
std::string stage_runlog_path(const PipelineConfig&, int stage_idx);
std::string stage_report_path(const PipelineConfig&, int stage_idx);

// CLI entry points. All throw ConfigError for usage problems (exit 2) and
// IoError/NumericError/ShapeError for runtime failures (exit 3).
void run_train_teacher(const PipelineConfig& cfg, bool force);
void run_importance(const PipelineConfig& cfg, const std::string& ckpt_path,
                    const std::string& method, int steps, const std::string& out_path, bool force);
void run_hybridize(const PipelineConfig& cfg, const std::string& ckpt_path, int replace_k,
                   const std::vector<int>& layers, const std::string& report_path,
                   const std::string& init, const std::string& out_path, bool force);
void run_distill(const PipelineConfig& cfg, const std::string& teacher_path,
                 const std::string& student_path, bool force);
void run_pipeline(const PipelineConfig& cfg, bool force);
void run_bench(const PipelineConfig& cfg, const std::string& ckpt_path, bool force);
void run_eval(const PipelineConfig& cfg, const std::vector<std::string>& ckpt_paths, bool force);

std::map<std::string, double> parse_eval_csv(const std::string& path);

}  // namespace hybridlm

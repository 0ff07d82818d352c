#include "hybridlm/staged.hpp"

#include <map>

#include "hybridlm/hybridize.hpp"

namespace hybridlm {

PipelineResult staged_pipeline(const Model& teacher, const StageSchedule& schedule,
                               const TaskSpec& distill_data, const TaskSpec& eval_task,
                               int eval_count, const DistillRunConfig& distill_cfg,
                               const DistillRunConfig& mmr_cfg, const StageHooks& hooks) {
  schedule.validate(teacher.cfg.n_layers);
  distill_cfg.validate();
  if (teacher.layout.has_identity())
    throw ConfigError("staged_pipeline: teacher layout contains identity entries");

  PipelineResult result;
  Model current = teacher.clone();
  std::vector<SeqSample> eval_samples = generate(eval_task, Split::kHeldOut, eval_count);

  ImportanceReport prev_report;
  bool have_prev = false;
  for (size_t stage = 0; stage < schedule.targets.size(); ++stage) {
    const int target_h = schedule.targets[stage];
    const int current_h = current.layout.mamba_count();
    if (target_h < current_h)
      throw ConfigError("staged_pipeline: stage target " + std::to_string(target_h) +
                        " below current replaced count " + std::to_string(current_h));

    if (hooks.try_resume) {
      Model resumed;
      ImportanceReport rep;
      RunLog log;
      if (hooks.try_resume(static_cast<int>(stage), target_h, resumed, rep, log)) {
        current = std::move(resumed);
        if (current.layout.mamba_count() != target_h)
          throw ConfigError("staged_pipeline: resumed stage " + std::to_string(stage) + " has h=" +
                            std::to_string(current.layout.mamba_count()) + ", expected " +
                            std::to_string(target_h));
        prev_report = rep;
        have_prev = true;
        result.reports.push_back(std::move(rep));
        result.logs.push_back(std::move(log));
        continue;
      }
    }

    const std::string& method = schedule.methods[stage];
    ImportanceReport report;
    if (method == "loo") {
      std::vector<int> scored;
      for (int l = 0; l < current.cfg.n_layers; ++l)
        if (current.layout.mixers[static_cast<size_t>(l)] == MixerKind::kMha) scored.push_back(l);
      report = loo_importance(current, eval_samples, scored, LooMode::kFullBlock,
                              eval_task.describe());
    } else if (method == "mmr") {
      DistillRunConfig mc = mmr_cfg;
      mc.seed = mix_seed(mmr_cfg.seed, 0x13175EEDULL + stage);
      report = mmr_importance(current, distill_data, mc);
    } else {  // reuse
      if (!have_prev)
        throw ConfigError("staged_pipeline: stage " + std::to_string(stage) +
                          " reuses a report but none exists");
      report = prev_report;
    }

    std::set<int> replaced;
    for (int l = 0; l < current.cfg.n_layers; ++l)
      if (current.layout.mixers[static_cast<size_t>(l)] != MixerKind::kMha) replaced.insert(l);
    const std::vector<int> picks =
        select_least_important(report, target_h - current_h, replaced);

    std::map<int, double> scores;
    for (size_t i = 0; i < report.layers.size(); ++i)
      scores[report.layers[i]] = report.scores[i];
    current = replace_layers(current, std::set<int>(picks.begin(), picks.end()), InitKind::kMil,
                             static_cast<int>(stage), method, scores);

    DistillRunConfig dc = distill_cfg;
    dc.seed = mix_seed(distill_cfg.seed, 0xD15711ULL + stage);
    RunLog log = distill_stage(teacher, current, distill_data, dc);

    if (hooks.on_stage_done) hooks.on_stage_done(static_cast<int>(stage), current, report, log);
    prev_report = report;
    have_prev = true;
    result.reports.push_back(std::move(report));
    result.logs.push_back(std::move(log));
  }
  result.final_model = std::move(current);
  return result;
}

}  // namespace hybridlm

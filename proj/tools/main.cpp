// hybridlm: train a small GQA transformer, estimate layer importance, swap
// attention mixers for MIL-initialized Mamba mixers, distill against the
// teacher, and benchmark the hybrid's decode efficiency.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hybridlm/pipeline.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

hybridlm::PipelineConfig load_config(const std::string& path) {
  return hybridlm::PipelineConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transformer-to-hybrid-SSM conversion by distillation"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  app.add_option("--config", config_path, "pipeline config JSON")->required();
  app.add_flag("--force", force, "overwrite existing artifacts");

  auto* cmd_teacher = app.add_subcommand("train-teacher", "train the transformer teacher");

  auto* cmd_importance = app.add_subcommand("importance", "score per-layer importance");
  std::string imp_ckpt, imp_method = "loo", imp_out;
  int imp_steps = -1;
  cmd_importance->add_option("--checkpoint", imp_ckpt, "model checkpoint")->required();
  cmd_importance->add_option("--method", imp_method, "loo | mmr");
  cmd_importance->add_option("--steps", imp_steps, "MMR distillation steps (default from config)");
  cmd_importance->add_option("--out", imp_out, "output report path");

  auto* cmd_hybridize = app.add_subcommand("hybridize", "replace MHA mixers with Mamba mixers");
  std::string hyb_ckpt, hyb_report, hyb_init = "mil", hyb_out;
  int hyb_replace = 0;
  std::vector<int> hyb_layers;
  cmd_hybridize->add_option("--checkpoint", hyb_ckpt, "source checkpoint")->required();
  cmd_hybridize->add_option("--replace", hyb_replace, "replace k least-important layers");
  cmd_hybridize->add_option("--layers", hyb_layers, "explicit layer ids")->delimiter(',');
  cmd_hybridize->add_option("--report", hyb_report, "importance report (with --replace)");
  cmd_hybridize->add_option("--init", hyb_init, "mil | random");
  cmd_hybridize->add_option("--out", hyb_out, "output checkpoint path");

  auto* cmd_distill = app.add_subcommand("distill", "distill a student against a teacher");
  std::string dis_teacher, dis_student;
  cmd_distill->add_option("--teacher", dis_teacher, "teacher checkpoint")->required();
  cmd_distill->add_option("--student", dis_student, "student checkpoint")->required();

  auto* cmd_pipeline = app.add_subcommand("pipeline", "run the full staged conversion");

  auto* cmd_bench = app.add_subcommand("bench", "measure decode throughput and memory");
  std::string bench_ckpt;
  cmd_bench->add_option("--checkpoint", bench_ckpt, "model checkpoint")->required();

  auto* cmd_eval = app.add_subcommand("eval", "held-out accuracy of one or more checkpoints");
  std::vector<std::string> eval_ckpts;
  cmd_eval->add_option("--checkpoint", eval_ckpts, "checkpoint(s)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    const hybridlm::PipelineConfig cfg = load_config(config_path);
    if (cmd_teacher->parsed()) {
      hybridlm::run_train_teacher(cfg, force);
    } else if (cmd_importance->parsed()) {
      hybridlm::run_importance(cfg, imp_ckpt, imp_method, imp_steps, imp_out, force);
    } else if (cmd_hybridize->parsed()) {
      if (hyb_replace <= 0 && hyb_layers.empty())
        throw hybridlm::ConfigError("hybridize: give --replace k or --layers ids");
      hybridlm::run_hybridize(cfg, hyb_ckpt, hyb_replace, hyb_layers, hyb_report, hyb_init,
                              hyb_out, force);
    } else if (cmd_distill->parsed()) {
      hybridlm::run_distill(cfg, dis_teacher, dis_student, force);
    } else if (cmd_pipeline->parsed()) {
      hybridlm::run_pipeline(cfg, force);
    } else if (cmd_bench->parsed()) {
      hybridlm::run_bench(cfg, bench_ckpt, force);
    } else if (cmd_eval->parsed()) {
      hybridlm::run_eval(cfg, eval_ckpts, force);
    }
  } catch (const hybridlm::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

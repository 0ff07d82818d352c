#include "hybridlm/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "hybridlm/checkpoint.hpp"
#include "hybridlm/hybridize.hpp"
#include "json.hpp"

namespace hybridlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

TaskSpec task_from_json(const json& j, const TaskSpec& defaults) {
  TaskSpec t = defaults;
  if (j.contains("kind")) t.kind = task_kind_from_name(j.at("kind").get<std::string>());
  t.vocab_size = j.value("vocab_size", t.vocab_size);
  t.seq_len = j.value("seq_len", t.seq_len);
  t.count = j.value("count", t.count);
  t.seed = j.value("seed", t.seed);
  return t;
}

json task_to_json(const TaskSpec& t) {
  return json{{"kind", task_kind_name(t.kind)},
              {"vocab_size", t.vocab_size},
              {"seq_len", t.seq_len},
              {"count", t.count},
              {"seed", t.seed}};
}

DistillRunConfig distill_from_json(const json& j, DistillRunConfig d) {
  d.temperature = j.value("temperature", d.temperature);
  if (j.contains("direction")) {
    const std::string dir = j.at("direction").get<std::string>();
    if (dir == "reverse")
      d.direction = KlDirection::kReverse;
    else if (dir == "forward")
      d.direction = KlDirection::kForward;
    else
      throw ConfigError("config: direction must be 'reverse' or 'forward', got '" + dir + "'");
  }
  d.lr = j.value("lr", d.lr);
  d.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  d.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  d.batch = j.value("batch", d.batch);
  d.seq_len = j.value("seq_len", d.seq_len);
  d.steps = j.value("steps", d.steps);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.eval_batches = j.value("eval_batches", d.eval_batches);
  if (j.contains("scope")) {
    const std::string s = j.at("scope").get<std::string>();
    if (s == "replaced_and_norms")
      d.scope = TrainScope::kReplacedAndNorms;
    else if (s == "all")
      d.scope = TrainScope::kAll;
    else
      throw ConfigError("config: scope must be 'replaced_and_norms' or 'all', got '" + s + "'");
  }
  return d;
}

json distill_to_json(const DistillRunConfig& d) {
  return json{{"temperature", d.temperature},
              {"direction", d.direction == KlDirection::kReverse ? "reverse" : "forward"},
              {"lr", d.lr},
              {"warmup_frac", d.warmup_frac},
              {"warmup_steps", d.warmup_steps},
              {"batch", d.batch},
              {"seq_len", d.seq_len},
              {"steps", d.steps},
              {"weight_decay", d.weight_decay},
              {"eval_batches", d.eval_batches},
              {"scope", d.scope == TrainScope::kAll ? "all" : "replaced_and_norms"}};
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

void refuse_overwrite(const std::string& path, bool force) {
  if (!force && fs::exists(path))
    throw ConfigError("output " + path + " already exists (use --force to overwrite)");
}

Model load_ckpt_checked(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

std::string fmt_acc(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PipelineConfig PipelineConfig::from_json_string(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: invalid JSON");
  PipelineConfig c;
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.model.n_layers = m.value("n_layers", c.model.n_layers);
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.n_heads = m.value("n_heads", c.model.n_heads);
    c.model.n_kv_heads = m.value("n_kv_heads", c.model.n_kv_heads);
    c.model.d_head = m.value("d_head", c.model.d_head);
    c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    c.model.d_mlp = m.value("d_mlp", c.model.d_mlp);
    c.model.max_seq = m.value("max_seq", c.model.max_seq);
    c.model.rope_base = m.value("rope_base", c.model.rope_base);
    c.model.norm_eps = m.value("norm_eps", c.model.norm_eps);
  }
  c.mamba.n_ssm_heads = c.model.n_heads;
  c.mamba.d_head = c.model.d_head;
  c.mamba.d_state = c.model.d_head;
  c.mamba.dt_rank = std::max(1, c.model.d_model / 16);
  if (j.contains("mamba")) {
    const json& m = j.at("mamba");
    c.mamba.d_state = m.value("d_state", c.mamba.d_state);
    c.mamba.n_ssm_heads = m.value("n_ssm_heads", c.mamba.n_ssm_heads);
    c.mamba.d_head = m.value("d_head", c.mamba.d_head);
    c.mamba.conv_width = m.value("conv_width", c.mamba.conv_width);
    c.mamba.dt_rank = m.value("dt_rank", c.mamba.dt_rank);
    c.mamba.conv_activation = m.value("conv_activation", c.mamba.conv_activation);
  }
  c.train_task.vocab_size = c.model.vocab_size;
  if (j.contains("train_task")) c.train_task = task_from_json(j.at("train_task"), c.train_task);
  c.eval_task = c.train_task;
  if (j.contains("eval_task")) c.eval_task = task_from_json(j.at("eval_task"), c.eval_task);
  if (j.contains("teacher")) {
    const json& t = j.at("teacher");
    c.teacher.steps = t.value("steps", c.teacher.steps);
    c.teacher.batch = t.value("batch", c.teacher.batch);
    c.teacher.lr = t.value("lr", c.teacher.lr);
    c.teacher.warmup_frac = t.value("warmup_frac", c.teacher.warmup_frac);
    c.teacher.weight_decay = t.value("weight_decay", c.teacher.weight_decay);
  }
  c.distill.seq_len = 0;  // default: use the task's own length at desk scale
  if (j.contains("distill")) c.distill = distill_from_json(j.at("distill"), c.distill);
  c.mmr = c.distill;
  c.mmr.steps = 100;
  c.mmr.batch = std::max(1, c.distill.batch / 2);
  if (j.contains("mmr")) c.mmr = distill_from_json(j.at("mmr"), c.mmr);
  if (j.contains("schedule")) {
    c.schedule.targets = j.at("schedule").value("targets", std::vector<int>{});
    c.schedule.methods = j.at("schedule").value("methods", std::vector<std::string>{});
    if (c.schedule.methods.empty() && !c.schedule.targets.empty()) {
      c.schedule.methods.assign(c.schedule.targets.size(), "mmr");
      c.schedule.methods[0] = "loo";
    }
  }
  c.importance_eval_count = j.value("importance_eval_count", c.importance_eval_count);
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    c.bench.prompt_tokens = b.value("prompt_tokens", c.bench.prompt_tokens);
    c.bench.generate_tokens = b.value("generate_tokens", c.bench.generate_tokens);
    c.bench.repeats = b.value("repeats", c.bench.repeats);
    c.bench.warmup = b.value("warmup", c.bench.warmup);
  }
  return c;
}

std::string PipelineConfig::to_json_string() const {
  json j{{"seed", seed},
         {"out_dir", out_dir},
         {"model",
          {{"n_layers", model.n_layers},
           {"d_model", model.d_model},
           {"n_heads", model.n_heads},
           {"n_kv_heads", model.n_kv_heads},
           {"d_head", model.d_head},
           {"vocab_size", model.vocab_size},
           {"d_mlp", model.d_mlp},
           {"max_seq", model.max_seq}}},
         {"mamba",
          {{"d_state", mamba.d_state},
           {"n_ssm_heads", mamba.n_ssm_heads},
           {"d_head", mamba.d_head},
           {"conv_width", mamba.conv_width},
           {"dt_rank", mamba.dt_rank},
           {"conv_activation", mamba.conv_activation}}},
         {"train_task", task_to_json(train_task)},
         {"eval_task", task_to_json(eval_task)},
         {"teacher",
          {{"steps", teacher.steps},
           {"batch", teacher.batch},
           {"lr", teacher.lr},
           {"warmup_frac", teacher.warmup_frac},
           {"weight_decay", teacher.weight_decay}}},
         {"distill", distill_to_json(distill)},
         {"mmr", distill_to_json(mmr)},
         {"schedule", {{"targets", schedule.targets}, {"methods", schedule.methods}}},
         {"importance_eval_count", importance_eval_count},
         {"bench",
          {{"prompt_tokens", bench.prompt_tokens},
           {"generate_tokens", bench.generate_tokens},
           {"repeats", bench.repeats},
           {"warmup", bench.warmup}}}};
  return j.dump(2);
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

void PipelineConfig::validate() const {
  model.validate();
  mamba.validate();
  train_task.validate();
  eval_task.validate();
  distill.validate();
  if (train_task.vocab_size != model.vocab_size || eval_task.vocab_size != model.vocab_size)
    throw ConfigError("config: task vocab_size must match model vocab_size");
  if (!schedule.targets.empty()) schedule.validate(model.n_layers);
  if (importance_eval_count < 1) throw ConfigError("config: importance_eval_count must be >= 1");
}

std::string PipelineConfig::resolved_out_dir() const {
  const char* env = std::getenv("HYBRIDLM_OUT_DIR");
  return env && *env ? std::string(env) : out_dir;
}

std::string teacher_ckpt_path(const PipelineConfig& c) {
  return c.resolved_out_dir() + "/teacher.ckpt";
}
std::string stage_ckpt_path(const PipelineConfig& c, int h) {
  return c.resolved_out_dir() + "/H1-" + std::to_string(h) + "-" +
         std::to_string(c.model.n_layers) + ".ckpt";
}
std::string stage_runlog_path(const PipelineConfig& c, int stage_idx) {
  return c.resolved_out_dir() + "/stage" + std::to_string(stage_idx + 1) + ".runlog.jsonl";
}
std::string stage_report_path(const PipelineConfig& c, int stage_idx) {
  return c.resolved_out_dir() + "/stage" + std::to_string(stage_idx + 1) + ".importance.json";
}

void run_train_teacher(const PipelineConfig& cfg, bool force) {
  cfg.validate();
  ensure_dir(cfg.resolved_out_dir());
  const std::string ckpt = teacher_ckpt_path(cfg);
  refuse_overwrite(ckpt, force);
  Model teacher = Model::init_random(cfg.model, cfg.mamba, cfg.seed);
  SftConfig tc = cfg.teacher;
  tc.seed = cfg.seed;
  RunLog log = train_on_task(teacher, cfg.train_task, tc);
  save_checkpoint(teacher, ckpt);
  log.save_jsonl(cfg.resolved_out_dir() + "/teacher.runlog.jsonl");
  const double acc =
      evaluate_accuracy(teacher, generate(cfg.eval_task, Split::kHeldOut, cfg.importance_eval_count));
  std::cout << "teacher: " << cfg.teacher.steps << " steps, final loss " << log.final_train_loss
            << ", held-out accuracy " << acc << "\n"
            << "wrote " << ckpt << "\n";
}

void run_importance(const PipelineConfig& cfg, const std::string& ckpt_path,
                    const std::string& method, int steps, const std::string& out_path,
                    bool force) {
  cfg.validate();
  ensure_dir(cfg.resolved_out_dir());
  Model model = load_ckpt_checked(ckpt_path);
  const std::string out = out_path.empty()
                              ? cfg.resolved_out_dir() + "/importance-" + method + ".json"
                              : out_path;
  refuse_overwrite(out, force);
  ImportanceReport report;
  if (method == "loo") {
    std::vector<int> layers;
    for (int l = 0; l < model.cfg.n_layers; ++l)
      if (model.layout.mixers[static_cast<size_t>(l)] == MixerKind::kMha) layers.push_back(l);
    if (layers.empty()) throw ConfigError("importance: model has no MHA layers to score");
    report = loo_importance(model,
                            generate(cfg.eval_task, Split::kHeldOut, cfg.importance_eval_count),
                            layers, LooMode::kFullBlock, cfg.eval_task.describe());
  } else if (method == "mmr") {
    DistillRunConfig mc = cfg.mmr;
    if (steps >= 0) mc.steps = steps;
    mc.seed = mix_seed(cfg.seed, 0x3A3A);
    report = mmr_importance(model, cfg.train_task, mc);
  } else {
    throw ConfigError("importance: method must be 'loo' or 'mmr', got '" + method + "'");
  }
  report.save(out);
  std::cout << "wrote " << out << "\n";
}

void run_hybridize(const PipelineConfig& cfg, const std::string& ckpt_path, int replace_k,
                   const std::vector<int>& layers, const std::string& report_path,
                   const std::string& init, const std::string& out_path, bool force) {
  cfg.validate();
  ensure_dir(cfg.resolved_out_dir());
  Model model = load_ckpt_checked(ckpt_path);

  std::set<int> ids(layers.begin(), layers.end());
  std::map<int, double> scores;
  std::string method = "manual";
  if (replace_k > 0) {
    if (report_path.empty())
      throw ConfigError("hybridize: --replace needs an importance report (--report)");
    ImportanceReport report = ImportanceReport::load(report_path);
    std::set<int> already;
    for (int l = 0; l < model.cfg.n_layers; ++l)
      if (model.layout.mixers[static_cast<size_t>(l)] != MixerKind::kMha) already.insert(l);
    for (int l : select_least_important(report, replace_k, already)) ids.insert(l);
    for (size_t i = 0; i < report.layers.size(); ++i) scores[report.layers[i]] = report.scores[i];
    method = report.method;
  }
  for (int l : ids)
    if (l < 0 || l >= model.cfg.n_layers)
      throw ConfigError("hybridize: layer " + std::to_string(l) + " out of range [0," +
                        std::to_string(model.cfg.n_layers) + ")");

  InitKind kind;
  if (init == "mil")
    kind = InitKind::kMil;
  else if (init == "random")
    kind = InitKind::kRandom;
  else
    throw ConfigError("hybridize: init must be 'mil' or 'random', got '" + init + "'");

  Model hybrid = replace_layers(model, ids, kind, -1, method, scores);
  const std::string out =
      out_path.empty() ? stage_ckpt_path(cfg, hybrid.layout.mamba_count()) : out_path;
  refuse_overwrite(out, force);
  save_checkpoint(hybrid, out);
  std::cout << "wrote " << out << " (" << hybrid.layout.name() << ")\n";
}

void run_distill(const PipelineConfig& cfg, const std::string& teacher_path,
                 const std::string& student_path, bool force) {
  cfg.validate();
  ensure_dir(cfg.resolved_out_dir());
  Model teacher = load_ckpt_checked(teacher_path);
  Model student = load_ckpt_checked(student_path);
  const std::string stem = fs::path(student_path).stem().string();
  const std::string out_ckpt = cfg.resolved_out_dir() + "/" + stem + ".distilled.ckpt";
  const std::string out_log = cfg.resolved_out_dir() + "/" + stem + ".distill.runlog.jsonl";
  refuse_overwrite(out_ckpt, force);
  refuse_overwrite(out_log, force);
  DistillRunConfig dc = cfg.distill;
  dc.seed = mix_seed(cfg.seed, 0xD157);
  RunLog log = distill_stage(teacher, student, cfg.train_task, dc);
  save_checkpoint(student, out_ckpt);
  log.save_jsonl(out_log);
  std::cout << "distilled " << student.layout.name() << ": eval KD " << log.eval_initial << " -> "
            << log.eval_final << "\nwrote " << out_ckpt << "\n";
}

void run_pipeline(const PipelineConfig& cfg, bool force) {
  cfg.validate();
  if (cfg.schedule.targets.empty()) throw ConfigError("pipeline: config has no schedule");
  ensure_dir(cfg.resolved_out_dir());

  const std::string teacher_path = teacher_ckpt_path(cfg);
  if (force || !fs::exists(teacher_path)) {
    if (force && fs::exists(teacher_path)) fs::remove(teacher_path);
    run_train_teacher(cfg, true);
  } else {
    std::cout << "teacher checkpoint present, skipping training\n";
  }
  Model teacher = load_checkpoint(teacher_path);

  StageHooks hooks;
  hooks.try_resume = [&](int idx, int target_h, Model& student, ImportanceReport& report,
                         RunLog& log) {
    if (force) return false;
    const std::string ckpt = stage_ckpt_path(cfg, target_h);
    const std::string rep = stage_report_path(cfg, idx);
    if (!fs::exists(ckpt) || !fs::exists(rep)) return false;
    student = load_checkpoint(ckpt);
    report = ImportanceReport::load(rep);
    log.label = student.layout.file_stem();
    log.h = target_h;
    std::cout << "stage " << idx + 1 << ": resuming from " << ckpt << "\n";
    return true;
  };
  hooks.on_stage_done = [&](int idx, const Model& student, const ImportanceReport& report,
                            const RunLog& log) {
    save_checkpoint(student, stage_ckpt_path(cfg, student.layout.mamba_count()));
    report.save(stage_report_path(cfg, idx));
    log.save_jsonl(stage_runlog_path(cfg, idx));
    std::cout << "stage " << idx + 1 << ": " << student.layout.name() << " eval KD "
              << log.eval_initial << " -> " << log.eval_final << "\n";
  };

  DistillRunConfig dc = cfg.distill;
  dc.seed = mix_seed(cfg.seed, 0x129E);
  DistillRunConfig mc = cfg.mmr;
  mc.seed = mix_seed(cfg.seed, 0x3A3A);
  PipelineResult result = staged_pipeline(teacher, cfg.schedule, cfg.train_task, cfg.eval_task,
                                          cfg.importance_eval_count, dc, mc, hooks);

  std::ofstream csv(cfg.resolved_out_dir() + "/stages.csv");
  csv << RunLog::summary_csv_header() << '\n';
  for (const RunLog& log : result.logs) csv << log.summary_csv_row() << '\n';
  std::cout << "pipeline complete: " << result.final_model.layout.name() << "\n";
}

void run_bench(const PipelineConfig& cfg, const std::string& ckpt_path, bool force) {
  cfg.validate();
  ensure_dir(cfg.resolved_out_dir());
  Model model = load_ckpt_checked(ckpt_path);
  const std::string stem = fs::path(ckpt_path).stem().string();
  const std::string csv_path = cfg.resolved_out_dir() + "/bench-" + stem + ".csv";
  const std::string svg_path = cfg.resolved_out_dir() + "/bench-" + stem + ".svg";
  const std::string curve_path = cfg.resolved_out_dir() + "/bench-" + stem + ".curve.csv";
  refuse_overwrite(csv_path, force);
  BenchResult res = run_decode_bench(model, cfg.bench);

  std::map<std::string, double> acc;
  const std::string eval_csv = cfg.resolved_out_dir() + "/eval.csv";
  if (fs::exists(eval_csv)) acc = parse_eval_csv(eval_csv);
  emit_report(std::vector<BenchResult>{res}, acc, csv_path, svg_path);

  std::ofstream curve(curve_path);
  curve << "position,latency_s,state_bytes\n";
  for (size_t i = 0; i < res.latency_curve.size(); ++i)
    curve << (res.prompt + static_cast<int>(i) + 1) << ',' << res.latency_curve[i] << ','
          << res.bytes_curve[i] << '\n';
  std::cout << res.layout << ": " << res.tokens_per_sec_median << " tok/s (IQR "
            << res.tokens_per_sec_iqr << "), peak state " << res.peak_bytes << " bytes, exponent "
            << res.fit.exponent << "\nwrote " << csv_path << "\n";
}

void run_eval(const PipelineConfig& cfg, const std::vector<std::string>& ckpt_paths, bool force) {
  cfg.validate();
  if (ckpt_paths.empty()) throw ConfigError("eval: no checkpoints given");
  ensure_dir(cfg.resolved_out_dir());
  const std::string out = cfg.resolved_out_dir() + "/eval.csv";
  refuse_overwrite(out, force);
  const auto samples = generate(cfg.eval_task, Split::kHeldOut, cfg.importance_eval_count);
  std::ofstream csv(out);
  csv << "layout,h,L,task,accuracy\n";
  for (const std::string& path : ckpt_paths) {
    Model m = load_ckpt_checked(path);
    const double acc = evaluate_accuracy(m, samples);
    csv << m.layout.name() << ',' << m.layout.mamba_count() << ',' << m.cfg.n_layers << ','
        << task_kind_name(cfg.eval_task.kind) << ',' << fmt_acc(acc) << '\n';
    std::cout << m.layout.name() << " accuracy " << acc << "\n";
  }
  std::cout << "wrote " << out << "\n";
}

std::map<std::string, double> parse_eval_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("parse_eval_csv: cannot open " + path);
  std::map<std::string, double> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string layout, h, l, task, acc;
    std::getline(ls, layout, ',');
    std::getline(ls, h, ',');
    std::getline(ls, l, ',');
    std::getline(ls, task, ',');
    std::getline(ls, acc, ',');
    out[layout] = std::stod(acc);
  }
  return out;
}

}  // namespace hybridlm

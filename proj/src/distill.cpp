#include "hybridlm/distill.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace hybridlm {

void DistillRunConfig::validate() const {
  if (!(temperature > 0.0f)) throw ConfigError("distill config: temperature must be > 0");
  if (!(lr > 0.0f)) throw ConfigError("distill config: lr must be > 0");
  if (warmup_frac < 0.0f || warmup_frac >= 1.0f)
    throw ConfigError("distill config: warmup fraction must be in [0,1)");
  if (batch < 1 || steps < 0) throw ConfigError("distill config: batch >= 1, steps >= 0");
  if (eval_batches < 1) throw ConfigError("distill config: eval_batches must be >= 1");
}

void StageSchedule::validate(int n_layers) const {
  if (targets.empty()) throw ConfigError("schedule: no stages");
  if (methods.size() != targets.size())
    throw ConfigError("schedule: " + std::to_string(methods.size()) + " methods for " +
                      std::to_string(targets.size()) + " stages");
  int prev = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] <= prev)
      throw ConfigError("schedule: replaced counts must be strictly increasing");
    prev = targets[i];
    const std::string& m = methods[i];
    if (m != "loo" && m != "mmr" && m != "reuse")
      throw ConfigError("schedule: unknown importance method '" + m + "'");
    if (i == 0 && m == "reuse")
      throw ConfigError("schedule: first stage cannot reuse a previous report");
  }
  if (targets.back() > n_layers)
    throw ConfigError("schedule: final target " + std::to_string(targets.back()) + " exceeds " +
                      std::to_string(n_layers) + " layers");
}

Tensor kl_loss(const Tensor& z_student, const Tensor& z_teacher, float tau,
               KlDirection direction) {
  return kl_div(z_student, z_teacher, tau, direction);
}

AdamW::AdamW(std::vector<Tensor*> params, float beta1, float beta2, float eps, float weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps),
      weight_decay_(weight_decay) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i]->numel(), 0.0f);
    v_[i].assign(params_[i]->numel(), 0.0f);
  }
}

void AdamW::step(float lr) {
  ++t_;
  const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor* p = params_[i];
    const std::vector<float>& g = p->grad();
    if (g.empty()) continue;  // parameter did not participate this step
    float* w = p->data();
    const bool decay = p->ndim() > 1;  // skip norms/biases
    for (size_t j = 0; j < g.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0f - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0f - beta2_) * g[j] * g[j];
      const float mhat = m_[i][j] / bc1;
      const float vhat = v_[i][j] / bc2;
      float upd = mhat / (std::sqrt(vhat) + eps_);
      if (decay) upd += weight_decay_ * w[j];
      w[j] -= lr * upd;
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

double lr_at_step(int step, int total_steps, double base_lr, double warmup_frac,
                  int warmup_steps) {
  const int w = warmup_steps >= 0
                    ? warmup_steps
                    : static_cast<int>(std::lround(warmup_frac * total_steps));
  if (w > 0 && step < w) return base_lr * (step + 1) / static_cast<double>(w);
  if (total_steps <= w) return base_lr;
  const double frac = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
  return base_lr * (1.0 - frac);
}

std::vector<Tensor*> trainable_parameters(Model& student, TrainScope scope) {
  std::vector<Tensor*> out;
  if (scope == TrainScope::kAll) {
    out = student.parameters();
    return out;
  }
  for (int l = 0; l < student.cfg.n_layers; ++l) {
    LayerParams& lp = student.layers[static_cast<size_t>(l)];
    out.push_back(&lp.norm_mixer);
    out.push_back(&lp.norm_mlp);
    if (student.layout.mixers[static_cast<size_t>(l)] == MixerKind::kMamba) {
      MambaParams& mp = lp.mamba;
      for (Tensor* t : {&mp.in_x, &mp.in_b, &mp.in_c, &mp.in_b_bias, &mp.in_c_bias, &mp.in_gate,
                        &mp.gate_bias, &mp.dt_down, &mp.dt_up, &mp.dt_bias, &mp.a_log, &mp.conv_w,
                        &mp.conv_b, &mp.out_proj})
        out.push_back(t);
    }
  }
  out.push_back(&student.final_norm);
  return out;
}

namespace {

TaskSpec run_task(const TaskSpec& base, int seq_override, uint64_t run_seed) {
  TaskSpec t = base;
  if (seq_override > 0) t.seq_len = seq_override;
  t.seed = mix_seed(base.seed, run_seed);
  t.validate();
  return t;
}

std::vector<std::vector<SeqSample>> fixed_eval_batches(const TaskSpec& task, int n_batches,
                                                       int batch) {
  BatchStream stream(task, Split::kHeldOut, batch);
  std::vector<std::vector<SeqSample>> out;
  out.reserve(static_cast<size_t>(n_batches));
  for (int i = 0; i < n_batches; ++i) out.push_back(stream.next());
  return out;
}

double batch_kd_loss(const Model& teacher, const Model& student,
                     const std::vector<SeqSample>& batch, float tau, KlDirection dir,
                     Tensor* loss_out) {
  Tensor total;
  for (const SeqSample& s : batch) {
    Tensor zs = student.forward(s.tokens);
    Tensor zt = teacher.forward(s.tokens);
    Tensor l = kl_loss(zs, zt, tau, dir);
    total = total.defined() ? add(total, l) : l;
  }
  Tensor loss = mul_scalar(total, 1.0f / static_cast<float>(batch.size()));
  if (loss_out) *loss_out = loss;
  return loss.item();
}

}  // namespace

double eval_kd_loss(const Model& teacher, const Model& student,
                    const std::vector<std::vector<SeqSample>>& batches, float tau,
                    KlDirection direction) {
  double total = 0.0;
  for (const auto& b : batches) total += batch_kd_loss(teacher, student, b, tau, direction, nullptr);
  return total / static_cast<double>(batches.size());
}

RunLog distill_stage(const Model& teacher, Model& student, const TaskSpec& data,
                     const DistillRunConfig& cfg) {
  cfg.validate();
  if (teacher.cfg.vocab_size != student.cfg.vocab_size)
    throw ShapeError("distill_stage: teacher vocab " + std::to_string(teacher.cfg.vocab_size) +
                     " vs student vocab " + std::to_string(student.cfg.vocab_size));
  // frozen teacher view; the caller's model is never touched
  Model frozen = teacher.clone();
  frozen.set_requires_grad(false);

  student.set_requires_grad(false);
  std::vector<Tensor*> trainables = trainable_parameters(student, cfg.scope);
  for (Tensor* t : trainables) t->set_requires_grad(true);
  AdamW opt(trainables, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

  const TaskSpec task = run_task(data, cfg.seq_len, cfg.seed);
  BatchStream stream(task, Split::kTrain, cfg.batch);
  const auto eval_batches = fixed_eval_batches(task, cfg.eval_batches, cfg.batch);

  RunLog log;
  log.label = student.layout.file_stem();
  log.h = student.layout.mamba_count();
  log.steps = cfg.steps;
  log.eval_initial = eval_kd_loss(frozen, student, eval_batches, cfg.temperature, cfg.direction);

  const uint64_t tokens_per_step =
      static_cast<uint64_t>(cfg.batch) * static_cast<uint64_t>(task.seq_len);
  for (int s = 0; s < cfg.steps; ++s) {
    const uint64_t batch_id = stream.batch_index();
    std::vector<SeqSample> batch = stream.next();
    Tensor loss;
    const double loss_val =
        batch_kd_loss(frozen, student, batch, cfg.temperature, cfg.direction, &loss);
    if (!std::isfinite(loss_val))
      throw NumericError("distill_stage: non-finite loss at step " + std::to_string(s) +
                         " (batch id " + std::to_string(batch_id) + ")");
    opt.zero_grad();
    backward(loss);
    const double lr = lr_at_step(s, cfg.steps, cfg.lr, cfg.warmup_frac, cfg.warmup_steps);
    opt.step(static_cast<float>(lr));
    log.tokens += tokens_per_step;
    student.tokens_trained += tokens_per_step;
    log.records.push_back({s, loss_val, lr, log.tokens});
    log.final_train_loss = loss_val;
  }
  log.eval_final = cfg.steps > 0
                       ? eval_kd_loss(frozen, student, eval_batches, cfg.temperature, cfg.direction)
                       : log.eval_initial;
  student.set_requires_grad(false);
  return log;
}

RunLog train_on_task(Model& model, const TaskSpec& task, const SftConfig& cfg) {
  task.validate();
  model.set_requires_grad(true);
  std::vector<Tensor*> params = model.parameters();
  AdamW opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  TaskSpec run = task;
  run.seed = mix_seed(task.seed, cfg.seed);
  BatchStream stream(run, Split::kTrain, cfg.batch);

  RunLog log;
  log.label = "teacher";
  log.h = model.layout.mamba_count();
  log.steps = cfg.steps;
  const uint64_t tokens_per_step =
      static_cast<uint64_t>(cfg.batch) * static_cast<uint64_t>(run.seq_len);
  for (int s = 0; s < cfg.steps; ++s) {
    const uint64_t batch_id = stream.batch_index();
    std::vector<SeqSample> batch = stream.next();
    Tensor total;
    for (const SeqSample& sample : batch) {
      const size_t n = sample.tokens.size();
      std::span<const int32_t> inputs(sample.tokens.data(), n - 1);
      std::span<const int32_t> targets(sample.tokens.data() + 1, n - 1);
      std::vector<uint8_t> tmask(sample.answer_mask.begin() + 1, sample.answer_mask.end());
      Tensor logits = model.forward(inputs);
      Tensor l = cross_entropy(logits, targets, tmask);
      total = total.defined() ? add(total, l) : l;
    }
    Tensor loss = mul_scalar(total, 1.0f / static_cast<float>(batch.size()));
    const double loss_val = loss.item();
    if (!std::isfinite(loss_val))
      throw NumericError("train_on_task: non-finite loss at step " + std::to_string(s) +
                         " (batch id " + std::to_string(batch_id) + ")");
    opt.zero_grad();
    backward(loss);
    const double lr = lr_at_step(s, cfg.steps, cfg.lr, cfg.warmup_frac);
    opt.step(static_cast<float>(lr));
    log.tokens += tokens_per_step;
    model.tokens_trained += tokens_per_step;
    log.records.push_back({s, loss_val, lr, log.tokens});
    log.final_train_loss = loss_val;
  }
  model.set_requires_grad(false);
  return log;
}

void RunLog::save_jsonl(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("runlog: cannot open " + path);
  for (const StepRecord& r : records) {
    nlohmann::json j{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"tokens", r.tokens}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("runlog: write failed for " + path);
}

std::string RunLog::summary_csv_header() {
  return "label,h,steps,tokens,final_train_loss,eval_initial,eval_final";
}

std::string RunLog::summary_csv_row() const {
  nlohmann::json j;  // reuse the JSON float formatter for stable output
  auto num = [&](double v) {
    j = v;
    return j.dump();
  };
  return label + "," + std::to_string(h) + "," + std::to_string(steps) + "," +
         std::to_string(tokens) + "," + num(final_train_loss) + "," + num(eval_initial) + "," +
         num(eval_final);
}

}  // namespace hybridlm

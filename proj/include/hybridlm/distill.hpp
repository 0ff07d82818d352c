#pragma once

#include <string>
#include <vector>

#include "hybridlm/datasynth.hpp"
#include "hybridlm/transformer.hpp"

namespace hybridlm {

// Which student parameters train during distillation. The default keeps the
// teacher-inherited weights frozen and adapts the new mixers plus norms.
enum class TrainScope { kReplacedAndNorms, kAll };

struct DistillRunConfig {
  float temperature = 1.0f;
  KlDirection direction = KlDirection::kReverse;
  float lr = 5e-5f;
  float warmup_frac = 0.05f;
  int warmup_steps = -1;  // >= 0 overrides warmup_frac
  int batch = 16;
  int seq_len = 256;  // 0 keeps the task's own length
  int steps = 500;
  uint64_t seed = 0;
  TrainScope scope = TrainScope::kReplacedAndNorms;
  float weight_decay = 0.1f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float adam_eps = 1e-8f;
  int eval_batches = 4;  // fixed held-out batches scoring eval_initial/final

  void validate() const;
};

// Incremental replacement plan: strictly increasing target h per stage, with
// the importance method used before that stage ("loo", "mmr", or "reuse" to
// keep the previous stage's report). Paper-scale reference schedule:
// 25 -> 27 -> 30 -> 34 -> 37 -> 40 of 50.
struct StageSchedule {
  std::vector<int> targets;
  std::vector<std::string> methods;
  void validate(int n_layers) const;
};

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  uint64_t tokens = 0;  // cumulative through this step
};

struct RunLog {
  std::string label;
  int h = 0;
  int steps = 0;
  uint64_t tokens = 0;  // steps * batch * seq_len, exactly
  double final_train_loss = 0.0;
  double eval_initial = 0.0;  // KD loss on fixed held-out batches before step 0
  double eval_final = 0.0;    // same batches after the last step
  std::vector<StepRecord> records;

  void save_jsonl(const std::string& path) const;
  std::string summary_csv_row() const;
  static std::string summary_csv_header();
};

// Reverse (default) or forward KL between softened logits; the teacher side
// is detached so gradients reach the student only.
Tensor kl_loss(const Tensor& z_student, const Tensor& z_teacher, float tau = 1.0f,
               KlDirection direction = KlDirection::kReverse);

// Decoupled-weight-decay Adam. Weight decay skips 1-D tensors (norm weights
// and biases).
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, float beta1, float beta2, float eps, float weight_decay);
  void step(float lr);
  void zero_grad();

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<float>> m_, v_;
  float beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
};

double lr_at_step(int step, int total_steps, double base_lr, double warmup_frac,
                  int warmup_steps = -1);

std::vector<Tensor*> trainable_parameters(Model& student, TrainScope scope);

// Average KD loss of the student against the teacher over fixed batches.
double eval_kd_loss(const Model& teacher, const Model& student,
                    const std::vector<std::vector<SeqSample>>& batches, float tau,
                    KlDirection direction);

// One end-to-end KD run: the student is optimized in place for cfg.steps and
// the per-step log is returned. The teacher is left bit-unchanged. Throws
// NumericError naming (step, batch id) if the loss goes non-finite.
RunLog distill_stage(const Model& teacher, Model& student, const TaskSpec& data,
                     const DistillRunConfig& cfg);

// Supervised training on a synthetic task (the teacher-production path).
struct SftConfig {
  int steps = 2000;
  int batch = 8;
  float lr = 1e-3f;
  float warmup_frac = 0.05f;
  float weight_decay = 0.01f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float adam_eps = 1e-8f;
  uint64_t seed = 0;
};

RunLog train_on_task(Model& model, const TaskSpec& task, const SftConfig& cfg);

}  // namespace hybridlm

#pragma once

#include <set>
#include <string>
#include <vector>

#include "hybridlm/distill.hpp"

namespace hybridlm {

// Per-layer scores and ranking from LOO or MMR.
//   LOO: score = baseline metric - ablated metric (higher = more important).
//   MMR: score = KD loss after a short distillation of a single-layer MIL
//        replacement (lower = less important), so both rank ascending by score.
struct ImportanceReport {
  std::string method;  // "loo" | "mmr"
  uint64_t seed = 0;
  std::string eval_desc;
  int steps = 0;                       // MMR horizon (0 = initial-loss mode)
  bool initial_only = false;           // steps == 0
  double baseline = 0.0;               // LOO only
  std::vector<int> layers;             // scored layer ids
  std::vector<double> scores;          // final scores
  std::vector<double> initial_scores;  // MMR step-0 scores (empty for LOO)
  std::vector<int> ranking;            // ascending importance

  // ascending by score, ties broken by lower layer id
  static std::vector<int> rank_ascending(const std::vector<int>& layers,
                                         const std::vector<double>& scores);
  std::vector<int> ranking_by_initial() const;
  // true when the 0-step and final-step rankings disagree (Fig-2-style crossover)
  bool horizon_crossover() const;

  std::string to_json_string() const;
  static ImportanceReport from_json_string(const std::string& text);
  void save(const std::string& path) const;
  static ImportanceReport load(const std::string& path);
};

// Fraction of answer-masked positions predicted correctly (teacher forcing).
double evaluate_accuracy(const Model& model, const std::vector<SeqSample>& samples,
                         const HybridLayout* layout_override = nullptr,
                         const AblationSpec* ablation = nullptr);

enum class LooMode { kFullBlock, kMixerOnly };

// Identity-ablation importance: for each layer, skip it (no fine-tuning),
// re-measure held-out accuracy, report the drop. The model is not modified.
ImportanceReport loo_importance(const Model& model, const std::vector<SeqSample>& eval_samples,
                                const std::vector<int>& layers, LooMode mode = LooMode::kFullBlock,
                                const std::string& eval_desc = "");

// MIL-replacement importance: for each candidate MHA layer, replace just that
// mixer (MIL init), distill `mmr.steps` steps against the unmodified model,
// and score by the final KD loss on fixed held-out batches. Candidate runs use
// per-layer forked seeds, so scores do not depend on evaluation order.
ImportanceReport mmr_importance(const Model& model, const TaskSpec& data,
                                const DistillRunConfig& mmr, const std::vector<int>& layers = {});

// k least-important not-yet-replaced layers, ascending importance.
std::vector<int> select_least_important(const ImportanceReport& report, int k,
                                        const std::set<int>& already_replaced);

}  // namespace hybridlm

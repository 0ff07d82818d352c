#include "hybridlm/importance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hybridlm/hybridize.hpp"
#include "json.hpp"

namespace hybridlm {

std::vector<int> ImportanceReport::rank_ascending(const std::vector<int>& layers,
                                                  const std::vector<double>& scores) {
  if (layers.size() != scores.size())
    throw ShapeError("importance: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(layers.size()) + " layers");
  std::vector<size_t> idx(layers.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return layers[a] < layers[b];  // deterministic tie-break
  });
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = layers[idx[i]];
  return out;
}

std::vector<int> ImportanceReport::ranking_by_initial() const {
  if (initial_scores.empty()) return ranking;
  return rank_ascending(layers, initial_scores);
}

bool ImportanceReport::horizon_crossover() const {
  if (initial_scores.empty() || initial_only) return false;
  return ranking_by_initial() != ranking;
}

std::string ImportanceReport::to_json_string() const {
  nlohmann::json j{{"method", method},
                   {"seed", seed},
                   {"eval", eval_desc},
                   {"steps", steps},
                   {"initial_only", initial_only},
                   {"layers", layers},
                   {"scores", scores},
                   {"ranking", ranking}};
  if (method == "loo") j["baseline"] = baseline;
  if (!initial_scores.empty()) {
    j["initial_scores"] = initial_scores;
    j["ranking_by_initial"] = ranking_by_initial();
    j["horizon_crossover"] = horizon_crossover();
  }
  return j.dump(2);
}

ImportanceReport ImportanceReport::from_json_string(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw IoError("importance report: invalid JSON");
  ImportanceReport r;
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.eval_desc = j.value("eval", "");
  r.steps = j.value("steps", 0);
  r.initial_only = j.value("initial_only", false);
  r.baseline = j.value("baseline", 0.0);
  r.layers = j.at("layers").get<std::vector<int>>();
  r.scores = j.at("scores").get<std::vector<double>>();
  if (j.contains("initial_scores"))
    r.initial_scores = j.at("initial_scores").get<std::vector<double>>();
  r.ranking = j.at("ranking").get<std::vector<int>>();
  return r;
}

void ImportanceReport::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("importance report: cannot open " + path);
  out << to_json_string() << '\n';
  if (!out) throw IoError("importance report: write failed for " + path);
}

ImportanceReport ImportanceReport::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("importance report: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

double evaluate_accuracy(const Model& model, const std::vector<SeqSample>& samples,
                         const HybridLayout* layout_override, const AblationSpec* ablation) {
  if (samples.empty()) throw ShapeError("evaluate_accuracy: empty eval set");
  int64_t correct = 0, total = 0;
  for (const SeqSample& s : samples) {
    const size_t n = s.tokens.size();
    std::span<const int32_t> inputs(s.tokens.data(), n - 1);
    Tensor logits = model.forward(inputs, nullptr, layout_override, ablation);
    const int vocab = logits.dim(1);
    for (size_t j = 0; j + 1 < n; ++j) {
      if (!s.answer_mask[j + 1]) continue;
      const float* row = logits.data() + j * static_cast<size_t>(vocab);
      int arg = 0;
      for (int v = 1; v < vocab; ++v)
        if (row[v] > row[arg]) arg = v;
      correct += (arg == s.tokens[j + 1]) ? 1 : 0;
      ++total;
    }
  }
  if (total == 0) throw ShapeError("evaluate_accuracy: no scored positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

ImportanceReport loo_importance(const Model& model, const std::vector<SeqSample>& eval_samples,
                                const std::vector<int>& layers, LooMode mode,
                                const std::string& eval_desc) {
  ImportanceReport r;
  r.method = "loo";
  r.seed = model.seed;
  r.eval_desc = eval_desc;
  r.baseline = evaluate_accuracy(model, eval_samples);
  for (int l : layers) {
    if (l < 0 || l >= model.cfg.n_layers)
      throw ShapeError("loo_importance: layer " + std::to_string(l) + " out of range");
    double ablated;
    if (mode == LooMode::kFullBlock) {
      HybridLayout lay = model.layout;
      lay.mixers[static_cast<size_t>(l)] = MixerKind::kIdentity;
      ablated = evaluate_accuracy(model, eval_samples, &lay);
    } else {
      AblationSpec ab{l, AblationSpec::kMixerOnly};
      ablated = evaluate_accuracy(model, eval_samples, nullptr, &ab);
    }
    r.layers.push_back(l);
    r.scores.push_back(r.baseline - ablated);
  }
  r.ranking = ImportanceReport::rank_ascending(r.layers, r.scores);
  return r;
}

ImportanceReport mmr_importance(const Model& model, const TaskSpec& data,
                                const DistillRunConfig& mmr, const std::vector<int>& layers) {
  std::vector<int> candidates = layers;
  if (candidates.empty()) {
    for (int l = 0; l < model.cfg.n_layers; ++l)
      if (model.layout.mixers[static_cast<size_t>(l)] == MixerKind::kMha) candidates.push_back(l);
  }
  if (candidates.empty()) throw ShapeError("mmr_importance: model has no MHA layers to score");

  ImportanceReport r;
  r.method = "mmr";
  r.seed = mmr.seed;
  r.eval_desc = data.describe();
  r.steps = mmr.steps;
  r.initial_only = mmr.steps == 0;
  for (int l : candidates) {
    if (model.layout.mixers[static_cast<size_t>(l)] != MixerKind::kMha)
      throw ShapeError("mmr_importance: layer " + std::to_string(l) + " is not MHA");
    Model cand = replace_layers(model, {l}, InitKind::kMil, -1, "mmr");
    DistillRunConfig cfg = mmr;
    cfg.seed = mix_seed(mmr.seed, 0x33A10000ULL + static_cast<uint64_t>(l));
    cfg.warmup_steps = std::min(10, cfg.steps);  // fixed short warm-up
    RunLog log = distill_stage(model, cand, data, cfg);
    r.layers.push_back(l);
    r.initial_scores.push_back(log.eval_initial);
    r.scores.push_back(mmr.steps == 0 ? log.eval_initial : log.eval_final);
  }
  r.ranking = ImportanceReport::rank_ascending(r.layers, r.scores);
  return r;
}

std::vector<int> select_least_important(const ImportanceReport& report, int k,
                                        const std::set<int>& already_replaced) {
  if (k < 0) throw ShapeError("select_least_important: k must be >= 0");
  std::vector<int> out;
  for (int l : report.ranking) {
    if (already_replaced.count(l)) continue;
    out.push_back(l);
    if (static_cast<int>(out.size()) == k) break;
  }
  if (static_cast<int>(out.size()) < k)
    throw ShapeError("select_least_important: requested " + std::to_string(k) +
                     " layers but only " + std::to_string(out.size()) + " remain");
  return out;
}

}  // namespace hybridlm

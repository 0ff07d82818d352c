#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "hybridlm/transformer.hpp"

namespace hybridlm {

// Record of which attention matrix landed in which Mamba slice.
struct MilReport {
  struct CopiedSlice {
    std::string source;       // e.g. "wk"
    std::string destination;  // e.g. "in_b[cols 64..80]"
    Shape shape;
  };
  std::vector<CopiedSlice> slices;
  int repetition = 1;  // g = n_heads / n_kv_heads
};

// Attention-to-Mamba initialization:
//   C-proj <- W_Q, B-proj <- repeat(W_K, g), x-proj <- repeat(W_V, g),
//   out_proj <- W_O, with g = n_heads / n_kv_heads tiled so query head h pairs
//   with KV group (h % n_kv_heads), exactly as the attention does.
// Auxiliaries start at pass-through: conv = delta kernel, softplus(dt) = 1,
// gate = 1, so the mixer begins as the linearized (softmax-free) view of the
// copied attention.
MambaParams mil_init(const AttentionWeights& w, const ModelConfig& cfg, const MambaConfig& mcfg,
                     MilReport* report = nullptr);

enum class InitKind { kMil, kRandom };

// Replaces the MHA mixers of `layer_ids` in a copy of the model. Every weight
// outside the replaced mixers is bit-identical to the source. Throws if a
// requested layer is not currently MHA.
Model replace_layers(const Model& model, const std::set<int>& layer_ids, InitKind init,
                     int stage = -1, const std::string& method = "manual",
                     const std::map<int, double>& scores = {});

// gate bias b with silu(b) = 1 and dt bias with softplus(dt) = 1
inline constexpr float kGateBiasUnit = 1.2784645f;
inline constexpr float kDtBiasUnit = 0.5413249f;

}  // namespace hybridlm

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hybridlm/layout.hpp"
#include "hybridlm/mamba.hpp"
#include "hybridlm/tensor.hpp"

namespace hybridlm {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 8;
  int n_kv_heads = 2;
  int d_head = 16;
  int vocab_size = 64;
  int d_mlp = 256;
  int max_seq = 8192;
  float rope_base = 10000.0f;
  float norm_eps = 1e-5f;

  int q_dim() const { return n_heads * d_head; }
  int kv_dim() const { return n_kv_heads * d_head; }
  int gqa_groups() const { return n_heads / n_kv_heads; }
  void validate() const;  // throws ConfigError
};

// Projections stored (in_features, out_features).
// Query head h reads KV head (h % n_kv_heads); this tiled grouping is what the
// Mamba-side weight expansion reproduces.
struct AttentionWeights {
  Tensor wq;  // (d_model, n_heads*d_head)
  Tensor wk;  // (d_model, n_kv_heads*d_head)
  Tensor wv;  // (d_model, n_kv_heads*d_head)
  Tensor wo;  // (n_heads*d_head, d_model)
};

struct MlpWeights {
  Tensor w1;  // (d_model, d_mlp)
  Tensor w2;  // (d_mlp, d_model)
};

// Raw per-layer KV storage, one row of kv_dim floats per token; logically
// (n_kv_heads, t, d_head) per the accounting below. Decode streams own their
// cache exclusively.
struct KvCache {
  struct LayerKv {
    std::vector<float> k, v;  // [t][kv_dim]
  };
  std::vector<LayerKv> layers;
  int tokens = 0;
  int kv_dim = 0;

  static KvCache empty(const ModelConfig& cfg);
  // 2 * n_kv_heads * d_head * tokens * 4 bytes per MHA layer, exactly.
  size_t bytes(const HybridLayout& layout) const;
};

// Ablation used by leave-one-out scoring. kFullBlock skips the whole
// transformer block (residual passthrough); kMixerOnly skips just the mixer.
struct AblationSpec {
  int layer = -1;
  enum Mode { kFullBlock, kMixerOnly } mode = kFullBlock;
};

struct LayerParams {
  AttentionWeights attn;  // defined when the layout says kMha
  MambaParams mamba;      // defined when the layout says kMamba
  MlpWeights mlp;
  Tensor norm_mixer;  // (d_model)
  Tensor norm_mlp;    // (d_model)
};

// Causal GQA attention. If cache is non-null the new keys/values are appended
// (detached) and attention runs over the whole cache; gradients do not flow
// through cached entries.
Tensor attention_forward(const Tensor& x, const AttentionWeights& w, const ModelConfig& cfg,
                         KvCache* cache, int layer);

struct Model {
  ModelConfig cfg;
  MambaConfig mamba_cfg;
  HybridLayout layout;
  Tensor tok_embed;    // (vocab, d_model)
  Tensor final_norm;   // (d_model)
  Tensor unembed;      // (d_model, vocab)
  std::vector<LayerParams> layers;
  uint64_t seed = 0;
  uint64_t tokens_trained = 0;

  static Model init_random(const ModelConfig& cfg, const MambaConfig& mcfg, uint64_t seed);

  // Pre-norm residual block; layer selects weights, kind selects the mixer.
  Tensor block_forward(const Tensor& x, int layer, MixerKind kind, KvCache* cache,
                       bool skip_mixer = false) const;

  // tokens -> logits (t, vocab). layout_override substitutes the stored
  // layout (used for ablations); ablation skips one block or one mixer.
  Tensor forward(std::span<const int32_t> tokens, KvCache* cache = nullptr,
                 const HybridLayout* layout_override = nullptr,
                 const AblationSpec* ablation = nullptr) const;

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  // Stable name -> tensor table; also fixes the checkpoint payload order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  void set_requires_grad(bool rg);
  Model clone() const;
};

}  // namespace hybridlm

#include "hybridlm/transformer.hpp"

#include <cmath>
#include <cstring>

namespace hybridlm {

const char* mixer_kind_name(MixerKind k) {
  switch (k) {
    case MixerKind::kMha: return "mha";
    case MixerKind::kMamba: return "mamba";
    case MixerKind::kIdentity: return "identity";
  }
  return "?";
}

MixerKind mixer_kind_from_name(const std::string& name) {
  if (name == "mha") return MixerKind::kMha;
  if (name == "mamba") return MixerKind::kMamba;
  if (name == "identity") return MixerKind::kIdentity;
  throw ConfigError("unknown mixer kind '" + name + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("model config: n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || n_kv_heads < 1 || d_head < 1 || vocab_size < 2 || d_mlp < 1 ||
      max_seq < 1)
    throw ConfigError("model config: dimensions must be positive (vocab >= 2)");
  if (n_heads % n_kv_heads != 0)
    throw ConfigError("model config: n_heads (" + std::to_string(n_heads) +
                      ") must be divisible by n_kv_heads (" + std::to_string(n_kv_heads) + ")");
  if (d_model != n_heads * d_head)
    throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                      ") must equal n_heads*d_head (" + std::to_string(n_heads * d_head) + ")");
  if (d_head % 2 != 0) throw ConfigError("model config: d_head must be even for rotary embedding");
}

KvCache KvCache::empty(const ModelConfig& cfg) {
  KvCache c;
  c.layers.resize(static_cast<size_t>(cfg.n_layers));
  c.kv_dim = cfg.kv_dim();
  return c;
}

size_t KvCache::bytes(const HybridLayout& layout) const {
  size_t total = 0;
  for (size_t l = 0; l < layers.size(); ++l) {
    if (l < layout.mixers.size() && layout.mixers[l] != MixerKind::kMha) continue;
    total += (layers[l].k.size() + layers[l].v.size()) * sizeof(float);
  }
  return total;
}

Tensor attention_forward(const Tensor& x, const AttentionWeights& w, const ModelConfig& cfg,
                         KvCache* cache, int layer) {
  if (x.ndim() != 2 || x.dim(1) != cfg.d_model)
    throw ShapeError("attention_forward: input " + shape_str(x.shape()) + " vs d_model " +
                     std::to_string(cfg.d_model));
  const int t = x.dim(0);
  int past = 0;
  if (cache) {
    if (layer < 0 || layer >= static_cast<int>(cache->layers.size()))
      throw ShapeError("attention_forward: cache has " + std::to_string(cache->layers.size()) +
                       " layers, layer " + std::to_string(layer) + " requested");
    if (cache->kv_dim != cfg.kv_dim())
      throw ShapeError("attention_forward: cache width " + std::to_string(cache->kv_dim) +
                       " vs model kv width " + std::to_string(cfg.kv_dim()));
    past = static_cast<int>(cache->layers[static_cast<size_t>(layer)].k.size()) / cfg.kv_dim();
  }

  Tensor q = rope(matmul(x, w.wq), cfg.d_head, past, cfg.rope_base);
  Tensor k_new = rope(matmul(x, w.wk), cfg.d_head, past, cfg.rope_base);
  Tensor v_new = matmul(x, w.wv);

  Tensor k_all = k_new, v_all = v_new;
  if (cache) {
    auto& lk = cache->layers[static_cast<size_t>(layer)];
    lk.k.insert(lk.k.end(), k_new.data(), k_new.data() + k_new.numel());
    lk.v.insert(lk.v.end(), v_new.data(), v_new.data() + v_new.numel());
    // cached entries are constants; gradients never flow through a cache
    k_all = from_vector({past + t, cfg.kv_dim()}, std::vector<float>(lk.k));
    v_all = from_vector({past + t, cfg.kv_dim()}, std::vector<float>(lk.v));
  }

  const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.d_head));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int g = h % cfg.n_kv_heads;
    Tensor qh = slice(q, 1, h * cfg.d_head, cfg.d_head);
    Tensor kh = slice(k_all, 1, g * cfg.d_head, cfg.d_head);
    Tensor vh = slice(v_all, 1, g * cfg.d_head, cfg.d_head);
    Tensor scores = mul_scalar(matmul(qh, transpose(kh)), scale);
    Tensor probs = causal_softmax(scores, past);
    heads.push_back(matmul(probs, vh));
  }
  Tensor ctx = concat(heads, 1);
  return matmul(ctx, w.wo);
}

Tensor Model::block_forward(const Tensor& x, int layer, MixerKind kind, KvCache* cache,
                            bool skip_mixer) const {
  if (kind == MixerKind::kIdentity) return x;
  const LayerParams& lp = layers[static_cast<size_t>(layer)];
  Tensor h = x;
  if (!skip_mixer) {
    Tensor normed = rms_norm(x, lp.norm_mixer, cfg.norm_eps);
    Tensor mixed;
    if (kind == MixerKind::kMha) {
      mixed = attention_forward(normed, lp.attn, cfg, cache, layer);
    } else {
      mixed = mixer_forward(lp.mamba, mamba_cfg, normed, MixerMode::kScan, nullptr);
    }
    h = add(x, mixed);
  }
  Tensor normed2 = rms_norm(h, lp.norm_mlp, cfg.norm_eps);
  Tensor up = silu(matmul(normed2, lp.mlp.w1));
  return add(h, matmul(up, lp.mlp.w2));
}

Tensor Model::forward(std::span<const int32_t> tokens, KvCache* cache,
                      const HybridLayout* layout_override, const AblationSpec* ablation) const {
  const HybridLayout& lay = layout_override ? *layout_override : layout;
  if (lay.n_layers() != cfg.n_layers)
    throw ShapeError("model.forward: layout has " + std::to_string(lay.n_layers()) +
                     " entries for " + std::to_string(cfg.n_layers) + " layers");
  if (tokens.empty()) throw ShapeError("model.forward: empty token sequence");
  int past = cache ? cache->tokens : 0;
  if (past + static_cast<int>(tokens.size()) > cfg.max_seq)
    throw ShapeError("model.forward: sequence length " +
                     std::to_string(past + static_cast<int>(tokens.size())) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  if (cache) {
    for (int l = 0; l < cfg.n_layers; ++l)
      if (lay.mixers[static_cast<size_t>(l)] == MixerKind::kMamba)
        throw ShapeError(
            "model.forward: the KV-cache path supports attention layers only; use Decoder for "
            "hybrid decode");
  }

  Tensor x = embedding(tok_embed, tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    MixerKind kind = lay.mixers[static_cast<size_t>(l)];
    bool skip_mixer = false;
    if (ablation && ablation->layer == l) {
      if (ablation->mode == AblationSpec::kFullBlock) continue;
      skip_mixer = true;
    }
    x = block_forward(x, l, kind, cache, skip_mixer);
  }
  x = rms_norm(x, final_norm, cfg.norm_eps);
  Tensor logits = matmul(x, unembed);
  if (cache) cache->tokens += static_cast<int>(tokens.size());
  return logits;
}

Model Model::init_random(const ModelConfig& cfg, const MambaConfig& mcfg, uint64_t seed) {
  cfg.validate();
  mcfg.validate();
  Model m;
  m.cfg = cfg;
  m.mamba_cfg = mcfg;
  m.layout = HybridLayout::all_mha(cfg.n_layers);
  m.seed = seed;
  Rng rng(mix_seed(seed, 0xA11C0DE));
  const float embed_std = 0.02f;
  const float proj_std = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
  // residual-writing projections scaled down to keep the stream near unit scale
  const float resid_std = proj_std / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
  m.tok_embed = randn({cfg.vocab_size, cfg.d_model}, rng, embed_std);
  m.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& lp : m.layers) {
    lp.attn.wq = randn({cfg.d_model, cfg.q_dim()}, rng, proj_std);
    lp.attn.wk = randn({cfg.d_model, cfg.kv_dim()}, rng, proj_std);
    lp.attn.wv = randn({cfg.d_model, cfg.kv_dim()}, rng, proj_std);
    lp.attn.wo = randn({cfg.q_dim(), cfg.d_model}, rng, resid_std);
    lp.mlp.w1 = randn({cfg.d_model, cfg.d_mlp}, rng, proj_std);
    lp.mlp.w2 = randn({cfg.d_mlp, cfg.d_model}, rng,
                      resid_std * std::sqrt(static_cast<float>(cfg.d_model) / cfg.d_mlp));
    lp.norm_mixer = full({cfg.d_model}, 1.0f);
    lp.norm_mlp = full({cfg.d_model}, 1.0f);
  }
  m.final_norm = full({cfg.d_model}, 1.0f);
  m.unembed = randn({cfg.d_model, cfg.vocab_size}, rng, proj_std);
  return m;
}

namespace {

template <class ModelT, class Fn>
void visit_params(ModelT& m, Fn&& fn) {
  fn("embed.weight", m.tok_embed);
  for (int l = 0; l < m.cfg.n_layers; ++l) {
    auto& lp = m.layers[static_cast<size_t>(l)];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "norm_mixer.weight", lp.norm_mixer);
    switch (m.layout.mixers[static_cast<size_t>(l)]) {
      case MixerKind::kMha:
        fn(prefix + "attn.wq", lp.attn.wq);
        fn(prefix + "attn.wk", lp.attn.wk);
        fn(prefix + "attn.wv", lp.attn.wv);
        fn(prefix + "attn.wo", lp.attn.wo);
        break;
      case MixerKind::kMamba:
        fn(prefix + "mamba.in_x", lp.mamba.in_x);
        fn(prefix + "mamba.in_b", lp.mamba.in_b);
        fn(prefix + "mamba.in_c", lp.mamba.in_c);
        fn(prefix + "mamba.in_b_bias", lp.mamba.in_b_bias);
        fn(prefix + "mamba.in_c_bias", lp.mamba.in_c_bias);
        fn(prefix + "mamba.in_gate", lp.mamba.in_gate);
        fn(prefix + "mamba.gate_bias", lp.mamba.gate_bias);
        fn(prefix + "mamba.dt_down", lp.mamba.dt_down);
        fn(prefix + "mamba.dt_up", lp.mamba.dt_up);
        fn(prefix + "mamba.dt_bias", lp.mamba.dt_bias);
        fn(prefix + "mamba.a_log", lp.mamba.a_log);
        fn(prefix + "mamba.conv_w", lp.mamba.conv_w);
        fn(prefix + "mamba.conv_b", lp.mamba.conv_b);
        fn(prefix + "mamba.out_proj", lp.mamba.out_proj);
        break;
      case MixerKind::kIdentity:
        break;
    }
    fn(prefix + "norm_mlp.weight", lp.norm_mlp);
    fn(prefix + "mlp.w1", lp.mlp.w1);
    fn(prefix + "mlp.w2", lp.mlp.w2);
  }
  fn("final_norm.weight", m.final_norm);
  fn("unembed.weight", m.unembed);
}

}  // namespace

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  visit_params(*this, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  visit_params(*this, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit_params(*this, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

void Model::set_requires_grad(bool rg) {
  for (Tensor* t : parameters()) t->set_requires_grad(rg);
}

Model Model::clone() const {
  Model m;
  m.cfg = cfg;
  m.mamba_cfg = mamba_cfg;
  m.layout = layout;
  m.seed = seed;
  m.tokens_trained = tokens_trained;
  m.tok_embed = tok_embed.clone();
  m.final_norm = final_norm.clone();
  m.unembed = unembed.clone();
  m.layers.resize(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    const LayerParams& src = layers[l];
    LayerParams& dst = m.layers[l];
    auto cp = [](const Tensor& t) { return t.defined() ? t.clone() : Tensor(); };
    dst.attn.wq = cp(src.attn.wq);
    dst.attn.wk = cp(src.attn.wk);
    dst.attn.wv = cp(src.attn.wv);
    dst.attn.wo = cp(src.attn.wo);
    dst.mamba.in_x = cp(src.mamba.in_x);
    dst.mamba.in_b = cp(src.mamba.in_b);
    dst.mamba.in_c = cp(src.mamba.in_c);
    dst.mamba.in_b_bias = cp(src.mamba.in_b_bias);
    dst.mamba.in_c_bias = cp(src.mamba.in_c_bias);
    dst.mamba.in_gate = cp(src.mamba.in_gate);
    dst.mamba.gate_bias = cp(src.mamba.gate_bias);
    dst.mamba.dt_down = cp(src.mamba.dt_down);
    dst.mamba.dt_up = cp(src.mamba.dt_up);
    dst.mamba.dt_bias = cp(src.mamba.dt_bias);
    dst.mamba.a_log = cp(src.mamba.a_log);
    dst.mamba.conv_w = cp(src.mamba.conv_w);
    dst.mamba.conv_b = cp(src.mamba.conv_b);
    dst.mamba.out_proj = cp(src.mamba.out_proj);
    dst.mlp.w1 = cp(src.mlp.w1);
    dst.mlp.w2 = cp(src.mlp.w2);
    dst.norm_mixer = cp(src.norm_mixer);
    dst.norm_mlp = cp(src.norm_mlp);
  }
  return m;
}

}  // namespace hybridlm

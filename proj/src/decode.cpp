#include "hybridlm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace hybridlm {

namespace {

// y += x @ W with W stored (in, out)
inline void matvec(const float* x, const float* w, float* y, int in, int out) {
  for (int d = 0; d < in; ++d) {
    const float xv = x[d];
    const float* row = w + static_cast<size_t>(d) * out;
    for (int j = 0; j < out; ++j) y[j] += xv * row[j];
  }
}

inline void rms_norm_row(const float* x, const float* w, float* y, int n, float eps) {
  double ss = 0.0;
  for (int i = 0; i < n; ++i) ss += static_cast<double>(x[i]) * x[i];
  const float ir = static_cast<float>(1.0 / std::sqrt(ss / n + eps));
  for (int i = 0; i < n; ++i) y[i] = x[i] * ir * w[i];
}

inline void rope_row(float* x, int width, int d_head, int pos, float base) {
  const int half = d_head / 2;
  for (int j = 0; j < half; ++j) {
    const double theta = static_cast<double>(pos) *
                         std::pow(static_cast<double>(base), -2.0 * j / d_head);
    const float c = static_cast<float>(std::cos(theta));
    const float s = static_cast<float>(std::sin(theta));
    for (int off = 0; off < width; off += d_head) {
      const float a = x[off + 2 * j], b = x[off + 2 * j + 1];
      x[off + 2 * j] = a * c - b * s;
      x[off + 2 * j + 1] = a * s + b * c;
    }
  }
}

}  // namespace

Decoder::Decoder(const Model& model) : model_(model) {
  if (model_.layout.has_identity())
    throw ShapeError("decoder: identity mixers are evaluation-only, not decodable layouts");
  reset();
  const ModelConfig& cfg = model_.cfg;
  x_.resize(static_cast<size_t>(cfg.d_model));
  normed_.resize(static_cast<size_t>(cfg.d_model));
  q_.resize(static_cast<size_t>(cfg.q_dim()));
  krow_.resize(static_cast<size_t>(cfg.kv_dim()));
  vrow_.resize(static_cast<size_t>(cfg.kv_dim()));
  ctx_.resize(static_cast<size_t>(cfg.q_dim()));
  proj_.resize(static_cast<size_t>(cfg.d_model));
  mlp_up_.resize(static_cast<size_t>(cfg.d_mlp));
  logits_.resize(static_cast<size_t>(cfg.vocab_size));
}

void Decoder::reset() {
  kv_ = KvCache::empty(model_.cfg);
  ssm_.assign(static_cast<size_t>(model_.cfg.n_layers), SsmState{});
  for (int l = 0; l < model_.cfg.n_layers; ++l)
    if (model_.layout.mixers[static_cast<size_t>(l)] == MixerKind::kMamba)
      ssm_[static_cast<size_t>(l)] = SsmState::zero(model_.mamba_cfg);
  pos_ = 0;
}

size_t Decoder::ssm_bytes() const {
  size_t total = 0;
  for (const SsmState& s : ssm_) total += s.bytes();
  return total;
}

const std::vector<float>& Decoder::step(int32_t token) {
  const ModelConfig& cfg = model_.cfg;
  if (token < 0 || token >= cfg.vocab_size)
    throw ShapeError("decoder: token id " + std::to_string(token) + " out of range [0," +
                     std::to_string(cfg.vocab_size) + ")");
  if (pos_ + 1 > cfg.max_seq)
    throw ShapeError("decoder: position " + std::to_string(pos_) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));

  std::memcpy(x_.data(), model_.tok_embed.data() + static_cast<size_t>(token) * cfg.d_model,
              sizeof(float) * static_cast<size_t>(cfg.d_model));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = model_.layers[static_cast<size_t>(l)];
    const MixerKind kind = model_.layout.mixers[static_cast<size_t>(l)];
    rms_norm_row(x_.data(), lp.norm_mixer.data(), normed_.data(), cfg.d_model, cfg.norm_eps);
    std::fill(proj_.begin(), proj_.end(), 0.0f);

    if (kind == MixerKind::kMha) {
      std::fill(q_.begin(), q_.end(), 0.0f);
      std::fill(krow_.begin(), krow_.end(), 0.0f);
      std::fill(vrow_.begin(), vrow_.end(), 0.0f);
      matvec(normed_.data(), lp.attn.wq.data(), q_.data(), cfg.d_model, cfg.q_dim());
      matvec(normed_.data(), lp.attn.wk.data(), krow_.data(), cfg.d_model, cfg.kv_dim());
      matvec(normed_.data(), lp.attn.wv.data(), vrow_.data(), cfg.d_model, cfg.kv_dim());
      rope_row(q_.data(), cfg.q_dim(), cfg.d_head, pos_, cfg.rope_base);
      rope_row(krow_.data(), cfg.kv_dim(), cfg.d_head, pos_, cfg.rope_base);
      auto& lkv = kv_.layers[static_cast<size_t>(l)];
      lkv.k.insert(lkv.k.end(), krow_.begin(), krow_.end());
      lkv.v.insert(lkv.v.end(), vrow_.begin(), vrow_.end());
      const int t_total = pos_ + 1;
      const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.d_head));
      static thread_local std::vector<float> scores;
      scores.resize(static_cast<size_t>(t_total));
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int g = h % cfg.n_kv_heads;
        const float* qh = q_.data() + static_cast<size_t>(h) * cfg.d_head;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < t_total; ++j) {
          const float* kj = lkv.k.data() + static_cast<size_t>(j) * cfg.kv_dim() +
                            static_cast<size_t>(g) * cfg.d_head;
          float acc = 0.0f;
          for (int d = 0; d < cfg.d_head; ++d) acc += qh[d] * kj[d];
          scores[static_cast<size_t>(j)] = acc * scale;
          mx = std::max(mx, scores[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        for (int j = 0; j < t_total; ++j) {
          scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
          denom += scores[static_cast<size_t>(j)];
        }
        const float inv = static_cast<float>(1.0 / denom);
        float* ch = ctx_.data() + static_cast<size_t>(h) * cfg.d_head;
        std::fill(ch, ch + cfg.d_head, 0.0f);
        for (int j = 0; j < t_total; ++j) {
          const float p = scores[static_cast<size_t>(j)] * inv;
          const float* vj = lkv.v.data() + static_cast<size_t>(j) * cfg.kv_dim() +
                            static_cast<size_t>(g) * cfg.d_head;
          for (int d = 0; d < cfg.d_head; ++d) ch[d] += p * vj[d];
        }
      }
      matvec(ctx_.data(), lp.attn.wo.data(), proj_.data(), cfg.q_dim(), cfg.d_model);
    } else if (kind == MixerKind::kMamba) {
      const MambaConfig& mc = model_.mamba_cfg;
      std::vector<float> y =
          ssm_step(lp.mamba, mc, ssm_[static_cast<size_t>(l)], normed_.data(), cfg.d_model);
      const int ch = mc.channels();
      static thread_local std::vector<float> gate;
      gate.assign(lp.mamba.gate_bias.data(), lp.mamba.gate_bias.data() + ch);
      for (int d = 0; d < cfg.d_model; ++d) {
        const float xv = normed_[static_cast<size_t>(d)];
        const float* row = lp.mamba.in_gate.data() + static_cast<size_t>(d) * ch;
        for (int c = 0; c < ch; ++c) gate[static_cast<size_t>(c)] += xv * row[c];
      }
      for (int c = 0; c < ch; ++c) {
        const float g = gate[static_cast<size_t>(c)];
        y[static_cast<size_t>(c)] *= g / (1.0f + std::exp(-g));
      }
      matvec(y.data(), lp.mamba.out_proj.data(), proj_.data(), ch, cfg.d_model);
    }
    for (int d = 0; d < cfg.d_model; ++d) x_[static_cast<size_t>(d)] += proj_[static_cast<size_t>(d)];

    rms_norm_row(x_.data(), lp.norm_mlp.data(), normed_.data(), cfg.d_model, cfg.norm_eps);
    std::fill(mlp_up_.begin(), mlp_up_.end(), 0.0f);
    matvec(normed_.data(), lp.mlp.w1.data(), mlp_up_.data(), cfg.d_model, cfg.d_mlp);
    for (float& v : mlp_up_) v = v / (1.0f + std::exp(-v));
    std::fill(proj_.begin(), proj_.end(), 0.0f);
    matvec(mlp_up_.data(), lp.mlp.w2.data(), proj_.data(), cfg.d_mlp, cfg.d_model);
    for (int d = 0; d < cfg.d_model; ++d) x_[static_cast<size_t>(d)] += proj_[static_cast<size_t>(d)];
  }

  rms_norm_row(x_.data(), model_.final_norm.data(), normed_.data(), cfg.d_model, cfg.norm_eps);
  std::fill(logits_.begin(), logits_.end(), 0.0f);
  matvec(normed_.data(), model_.unembed.data(), logits_.data(), cfg.d_model, cfg.vocab_size);
  kv_.tokens = ++pos_;
  return logits_;
}

}  // namespace hybridlm

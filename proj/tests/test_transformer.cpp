#include <cstring>

#include "doctest.h"
#include "hybridlm/decode.hpp"
#include "hybridlm/transformer.hpp"
#include "test_util.hpp"

using namespace hybridlm;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_head = 8;
  c.vocab_size = 16;
  c.d_mlp = 48;
  c.max_seq = 256;
  return c;
}

MambaConfig tiny_mamba() {
  MambaConfig m;
  m.d_state = 8;
  m.n_ssm_heads = 4;
  m.d_head = 8;
  m.dt_rank = 4;
  return m;
}

std::vector<int32_t> random_tokens(int n, int vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int32_t> t(static_cast<size_t>(n));
  for (auto& v : t) v = rng.uniform_int(0, vocab);
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_cfg();
  c.n_kv_heads = 3;  // does not divide n_heads
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg();
  c.d_model = 33;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("single token attention reduces to W_O(V tiled per head)") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 5);
  Rng rng(17);
  Tensor x = randn({1, cfg.d_model}, rng);
  const AttentionWeights& w = m.layers[0].attn;
  Tensor out = attention_forward(x, w, cfg, nullptr, 0);

  Tensor v = matmul(x, w.wv);
  Tensor ctx = zeros({1, cfg.q_dim()});
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int g = h % cfg.n_kv_heads;
    std::memcpy(ctx.data() + h * cfg.d_head, v.data() + g * cfg.d_head,
                sizeof(float) * static_cast<size_t>(cfg.d_head));
  }
  Tensor expected = matmul(ctx, w.wo);
  CHECK(hlmtest::max_abs_diff(out, expected) < 1e-7);
}

TEST_CASE("causality: suffix edits leave prefix logits bit-identical") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 6);
  std::vector<int32_t> tokens = random_tokens(12, cfg.vocab_size, 3);
  Tensor base = m.forward(tokens);
  auto edited = tokens;
  for (size_t i = 7; i < edited.size(); ++i) edited[i] = (edited[i] + 3) % cfg.vocab_size;
  Tensor changed = m.forward(edited);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < cfg.vocab_size; ++c) {
      const size_t idx = static_cast<size_t>(r) * cfg.vocab_size + c;
      CHECK(std::bit_cast<uint32_t>(base.data()[idx]) ==
            std::bit_cast<uint32_t>(changed.data()[idx]));
    }
}

TEST_CASE("prefill equals incremental cached decode (tensor path)") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 7);
  std::vector<int32_t> tokens = random_tokens(8, cfg.vocab_size, 4);
  Tensor full = m.forward(tokens);

  KvCache cache = KvCache::empty(cfg);
  std::vector<float> last_rows;
  for (size_t i = 0; i < tokens.size(); ++i) {
    std::span<const int32_t> one(&tokens[i], 1);
    Tensor logits = m.forward(one, &cache);
    last_rows.insert(last_rows.end(), logits.data(), logits.data() + cfg.vocab_size);
  }
  float worst = 0.0f;
  for (size_t i = 0; i < last_rows.size(); ++i)
    worst = std::max(worst, std::abs(last_rows[i] - full.data()[i]));
  CHECK(worst < 1e-5);
  CHECK(cache.tokens == 8);
}

TEST_CASE("prefill equals the raw decoder") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 8);
  std::vector<int32_t> tokens = random_tokens(10, cfg.vocab_size, 5);
  Tensor full = m.forward(tokens);
  Decoder dec(m);
  float worst = 0.0f;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const std::vector<float>& logits = dec.step(tokens[i]);
    for (int c = 0; c < cfg.vocab_size; ++c)
      worst = std::max(worst,
                       std::abs(logits[static_cast<size_t>(c)] -
                                full.data()[i * static_cast<size_t>(cfg.vocab_size) + c]));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("KV cache byte accounting is the closed form") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 9);
  KvCache cache = KvCache::empty(cfg);
  std::vector<int32_t> tokens = random_tokens(13, cfg.vocab_size, 6);
  m.forward(tokens, &cache);
  const size_t expected = static_cast<size_t>(cfg.n_layers) * 2 *
                          static_cast<size_t>(cfg.n_kv_heads) * cfg.d_head * 13 * 4;
  CHECK(cache.bytes(m.layout) == expected);
}

TEST_CASE("zeroed output projections make a block the identity") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 10);
  LayerParams& lp = m.layers[0];
  std::fill(lp.attn.wo.data(), lp.attn.wo.data() + lp.attn.wo.numel(), 0.0f);
  std::fill(lp.mlp.w2.data(), lp.mlp.w2.data() + lp.mlp.w2.numel(), 0.0f);
  Rng rng(33);
  Tensor x = randn({5, cfg.d_model}, rng);
  Tensor y = m.block_forward(x, 0, MixerKind::kMha, nullptr);
  CHECK(hlmtest::bit_equal(x, y));
}

TEST_CASE("mixer-only ablation reduces the block to the MLP residual") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 11);
  Rng rng(34);
  Tensor x = randn({4, cfg.d_model}, rng);
  Tensor ablated = m.block_forward(x, 1, MixerKind::kMha, nullptr, /*skip_mixer=*/true);
  const LayerParams& lp = m.layers[1];
  Tensor up = silu(matmul(rms_norm(x, lp.norm_mlp, cfg.norm_eps), lp.mlp.w1));
  Tensor expected = add(x, matmul(up, lp.mlp.w2));
  CHECK(hlmtest::bit_equal(ablated, expected));
}

TEST_CASE("full-block identity ablation skips the layer") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 12);
  std::vector<int32_t> tokens = random_tokens(6, cfg.vocab_size, 7);
  HybridLayout lay = m.layout;
  lay.mixers[0] = MixerKind::kIdentity;
  Tensor skipped = m.forward(tokens, nullptr, &lay);
  AblationSpec ab{0, AblationSpec::kFullBlock};
  Tensor ablated = m.forward(tokens, nullptr, nullptr, &ab);
  CHECK(hlmtest::bit_equal(skipped, ablated));
}

TEST_CASE("gradient check through a full attention block") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 13);
  Rng rng(35);
  Tensor mixw = randn({cfg.d_model}, rng);
  auto f = [&](const Tensor& x) {
    return mean(mul(m.block_forward(x, 0, MixerKind::kMha, nullptr),
                    reshape(concat(std::vector<Tensor>(4, reshape(mixw, {1, cfg.d_model})), 0),
                            {4, cfg.d_model})));
  };
  Tensor point = randn({4, cfg.d_model}, rng, 0.7f);
  GradCheckReport rep = grad_check(f, point, 1e-2f);
  INFO("rel err ", rep.max_rel_err);
  CHECK(rep.ok(1e-3f));
}

TEST_CASE("out-of-range tokens are rejected") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 14);
  std::vector<int32_t> bad{0, 99};
  CHECK_THROWS_AS(m.forward(bad), ShapeError);
}

TEST_CASE("deterministic forward: same model, same tokens, same bits") {
  ModelConfig cfg = tiny_cfg();
  Model m = Model::init_random(cfg, tiny_mamba(), 15);
  std::vector<int32_t> tokens = random_tokens(9, cfg.vocab_size, 8);
  CHECK(hlmtest::bit_equal(m.forward(tokens), m.forward(tokens)));
}

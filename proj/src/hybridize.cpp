#include "hybridlm/hybridize.hpp"

#include <cmath>
#include <cstring>

namespace hybridlm {

namespace {

// tile the (d_model, n_kv*d) matrix g times along columns, head-block layout
Tensor tile_columns(const Tensor& src, int group_width, int g) {
  const int rows = src.dim(0);
  const int src_cols = src.dim(1);
  Tensor out = zeros({rows, src_cols * g});
  const int out_cols = src_cols * g;
  const int n_groups = src_cols / group_width;
  for (int r = 0; r < rows; ++r) {
    const float* srow = src.data() + static_cast<size_t>(r) * src_cols;
    float* drow = out.data() + static_cast<size_t>(r) * out_cols;
    for (int h = 0; h < n_groups * g; ++h) {
      const int src_group = h % n_groups;
      std::memcpy(drow + static_cast<size_t>(h) * group_width,
                  srow + static_cast<size_t>(src_group) * group_width,
                  sizeof(float) * static_cast<size_t>(group_width));
    }
  }
  return out;
}

void require_copy_shape(const char* matrix, const Tensor& t, int rows, int cols) {
  if (!t.defined() || t.ndim() != 2 || t.dim(0) != rows || t.dim(1) != cols)
    throw ShapeError(std::string("mil_init: ") + matrix + " must be (" + std::to_string(rows) +
                     "," + std::to_string(cols) + "), got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

}  // namespace

MambaParams mil_init(const AttentionWeights& w, const ModelConfig& cfg, const MambaConfig& mcfg,
                     MilReport* report) {
  cfg.validate();
  mcfg.validate();
  if (mcfg.d_head != mcfg.d_state)
    throw ShapeError("mil_init: d_head (" + std::to_string(mcfg.d_head) + ") must equal d_state (" +
                     std::to_string(mcfg.d_state) + ") for exact weight copies");
  if (mcfg.n_ssm_heads != cfg.n_heads)
    throw ShapeError("mil_init: n_ssm_heads (" + std::to_string(mcfg.n_ssm_heads) +
                     ") must equal teacher n_heads (" + std::to_string(cfg.n_heads) + ")");
  if (mcfg.d_head != cfg.d_head)
    throw ShapeError("mil_init: mamba d_head (" + std::to_string(mcfg.d_head) +
                     ") must equal teacher d_head (" + std::to_string(cfg.d_head) + ")");
  require_copy_shape("W_Q", w.wq, cfg.d_model, cfg.q_dim());
  require_copy_shape("W_K", w.wk, cfg.d_model, cfg.kv_dim());
  require_copy_shape("W_V", w.wv, cfg.d_model, cfg.kv_dim());
  require_copy_shape("W_O", w.wo, cfg.q_dim(), cfg.d_model);

  const int g = cfg.gqa_groups();
  const int ch = mcfg.channels();
  MambaParams p;
  p.in_c = w.wq.detach();
  p.in_b = tile_columns(w.wk.detach(), cfg.d_head, g);
  p.in_x = tile_columns(w.wv.detach(), cfg.d_head, g);
  p.out_proj = w.wo.detach();
  p.in_b_bias = zeros({mcfg.bc_dim()});
  p.in_c_bias = zeros({mcfg.bc_dim()});
  // pass-through auxiliaries: the mixer starts as linearized attention
  p.in_gate = zeros({cfg.d_model, ch});
  p.gate_bias = full({ch}, kGateBiasUnit);
  p.dt_down = zeros({ch, mcfg.dt_rank});
  p.dt_up = zeros({mcfg.dt_rank, ch});
  p.dt_bias = full({ch}, kDtBiasUnit);
  p.conv_w = zeros({mcfg.conv_width, ch});
  for (int c = 0; c < ch; ++c)
    p.conv_w.data()[static_cast<size_t>(mcfg.conv_width - 1) * ch + c] = 1.0f;  // delta kernel
  p.conv_b = zeros({ch});
  p.a_log = zeros({ch, mcfg.d_state});
  for (int c = 0; c < ch; ++c)
    for (int n = 0; n < mcfg.d_state; ++n)
      p.a_log.data()[static_cast<size_t>(c) * mcfg.d_state + n] =
          std::log(static_cast<float>(n + 1));

  if (report) {
    report->repetition = g;
    report->slices.clear();
    report->slices.push_back({"wq", "in_c", {cfg.d_model, cfg.q_dim()}});
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int src_group = h % cfg.n_kv_heads;
      const std::string span = "[cols " + std::to_string(h * cfg.d_head) + ".." +
                               std::to_string((h + 1) * cfg.d_head) + "]";
      report->slices.push_back({"wk[group " + std::to_string(src_group) + "]", "in_b" + span,
                                {cfg.d_model, cfg.d_head}});
      report->slices.push_back({"wv[group " + std::to_string(src_group) + "]", "in_x" + span,
                                {cfg.d_model, cfg.d_head}});
    }
    report->slices.push_back({"wo", "out_proj", {cfg.q_dim(), cfg.d_model}});
  }
  p.check_shapes(mcfg, cfg.d_model);
  return p;
}

Model replace_layers(const Model& model, const std::set<int>& layer_ids, InitKind init, int stage,
                     const std::string& method, const std::map<int, double>& scores) {
  for (int l : layer_ids) {
    if (l < 0 || l >= model.cfg.n_layers)
      throw ShapeError("replace_layers: layer " + std::to_string(l) + " out of range [0," +
                       std::to_string(model.cfg.n_layers) + ")");
    if (model.layout.mixers[static_cast<size_t>(l)] != MixerKind::kMha)
      throw ShapeError("replace_layers: layer " + std::to_string(l) + " is " +
                       mixer_kind_name(model.layout.mixers[static_cast<size_t>(l)]) +
                       ", only MHA mixers can be replaced");
  }
  Model out = model.clone();
  for (int l : layer_ids) {
    LayerParams& lp = out.layers[static_cast<size_t>(l)];
    if (init == InitKind::kMil) {
      lp.mamba = mil_init(lp.attn, out.cfg, out.mamba_cfg);
    } else {
      Rng rng(mix_seed(out.seed, 0x5EED0000ULL + static_cast<uint64_t>(l)));
      lp.mamba = random_mamba_params(out.mamba_cfg, out.cfg.d_model, rng);
    }
    lp.attn = AttentionWeights{};  // replaced mixer drops its attention weights
    out.layout.mixers[static_cast<size_t>(l)] = MixerKind::kMamba;
    LayerProvenance& prov = out.layout.provenance[static_cast<size_t>(l)];
    prov.stage = stage;
    prov.method = method;
    prov.init = init == InitKind::kMil ? "mil" : "random";
    auto it = scores.find(l);
    if (it != scores.end()) prov.score = it->second;
  }
  return out;
}

}  // namespace hybridlm

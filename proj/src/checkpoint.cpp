#include "hybridlm/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hybridlm/datasynth.hpp"  // fnv1a64
#include "json.hpp"

namespace hybridlm {

namespace {

using nlohmann::json;

json model_config_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
              {"n_kv_heads", c.n_kv_heads}, {"d_head", c.d_head}, {"vocab_size", c.vocab_size},
              {"d_mlp", c.d_mlp},       {"max_seq", c.max_seq},   {"rope_base", c.rope_base},
              {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.rope_base = j.value("rope_base", 10000.0f);
  c.norm_eps = j.value("norm_eps", 1e-5f);
  return c;
}

json mamba_config_json(const MambaConfig& c) {
  return json{{"d_state", c.d_state},       {"n_ssm_heads", c.n_ssm_heads},
              {"d_head", c.d_head},         {"conv_width", c.conv_width},
              {"dt_rank", c.dt_rank},       {"conv_activation", c.conv_activation}};
}

MambaConfig mamba_config_from_json(const json& j) {
  MambaConfig c;
  c.d_state = j.at("d_state").get<int>();
  c.n_ssm_heads = j.at("n_ssm_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.conv_width = j.at("conv_width").get<int>();
  c.dt_rank = j.at("dt_rank").get<int>();
  c.conv_activation = j.value("conv_activation", true);
  return c;
}

json layout_json(const HybridLayout& l) {
  json mixers = json::array();
  for (MixerKind k : l.mixers) mixers.push_back(mixer_kind_name(k));
  json prov = json::array();
  for (const LayerProvenance& p : l.provenance) {
    json e{{"stage", p.stage}, {"method", p.method}, {"init", p.init}};
    if (std::isnan(p.score))
      e["score"] = nullptr;
    else
      e["score"] = p.score;
    prov.push_back(e);
  }
  return json{{"mixers", mixers}, {"provenance", prov}};
}

HybridLayout layout_from_json(const json& j) {
  HybridLayout l;
  for (const auto& m : j.at("mixers")) l.mixers.push_back(mixer_kind_from_name(m.get<std::string>()));
  if (j.contains("provenance")) {
    for (const auto& e : j.at("provenance")) {
      LayerProvenance p;
      p.stage = e.value("stage", -1);
      p.method = e.value("method", "");
      p.init = e.value("init", "");
      if (e.contains("score") && !e.at("score").is_null()) p.score = e.at("score").get<double>();
      l.provenance.push_back(p);
    }
  }
  l.provenance.resize(l.mixers.size());
  return l;
}

void append_f32_le(std::string& out, const float* data, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    const uint32_t bits = std::bit_cast<uint32_t>(data[i]);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
  }
}

void read_f32_le(const unsigned char* src, float* dst, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    const uint32_t bits = static_cast<uint32_t>(src[4 * i]) |
                          (static_cast<uint32_t>(src[4 * i + 1]) << 8) |
                          (static_cast<uint32_t>(src[4 * i + 2]) << 16) |
                          (static_cast<uint32_t>(src[4 * i + 3]) << 24);
    dst[i] = std::bit_cast<float>(bits);
  }
}

void append_u32_le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

constexpr char kMagic[9] = "HLMCKPT1";

}  // namespace

Model make_model_shell(const ModelConfig& cfg, const MambaConfig& mcfg,
                       const HybridLayout& layout) {
  cfg.validate();
  mcfg.validate();
  if (layout.n_layers() != cfg.n_layers)
    throw ShapeError("model shell: layout has " + std::to_string(layout.n_layers()) +
                     " entries for " + std::to_string(cfg.n_layers) + " layers");
  Model m;
  m.cfg = cfg;
  m.mamba_cfg = mcfg;
  m.layout = layout;
  m.tok_embed = zeros({cfg.vocab_size, cfg.d_model});
  m.final_norm = zeros({cfg.d_model});
  m.unembed = zeros({cfg.d_model, cfg.vocab_size});
  m.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams& lp = m.layers[static_cast<size_t>(l)];
    lp.norm_mixer = zeros({cfg.d_model});
    lp.norm_mlp = zeros({cfg.d_model});
    lp.mlp.w1 = zeros({cfg.d_model, cfg.d_mlp});
    lp.mlp.w2 = zeros({cfg.d_mlp, cfg.d_model});
    switch (layout.mixers[static_cast<size_t>(l)]) {
      case MixerKind::kMha:
        lp.attn.wq = zeros({cfg.d_model, cfg.q_dim()});
        lp.attn.wk = zeros({cfg.d_model, cfg.kv_dim()});
        lp.attn.wv = zeros({cfg.d_model, cfg.kv_dim()});
        lp.attn.wo = zeros({cfg.q_dim(), cfg.d_model});
        break;
      case MixerKind::kMamba: {
        const int ch = mcfg.channels();
        lp.mamba.in_x = zeros({cfg.d_model, ch});
        lp.mamba.in_b = zeros({cfg.d_model, mcfg.bc_dim()});
        lp.mamba.in_c = zeros({cfg.d_model, mcfg.bc_dim()});
        lp.mamba.in_b_bias = zeros({mcfg.bc_dim()});
        lp.mamba.in_c_bias = zeros({mcfg.bc_dim()});
        lp.mamba.in_gate = zeros({cfg.d_model, ch});
        lp.mamba.gate_bias = zeros({ch});
        lp.mamba.dt_down = zeros({ch, mcfg.dt_rank});
        lp.mamba.dt_up = zeros({mcfg.dt_rank, ch});
        lp.mamba.dt_bias = zeros({ch});
        lp.mamba.a_log = zeros({ch, mcfg.d_state});
        lp.mamba.conv_w = zeros({mcfg.conv_width, ch});
        lp.mamba.conv_b = zeros({ch});
        lp.mamba.out_proj = zeros({ch, cfg.d_model});
        break;
      }
      case MixerKind::kIdentity:
        throw IoError("model shell: identity mixers are never persisted");
    }
  }
  return m;
}

void save_checkpoint(const Model& model, const std::string& path) {
  if (model.layout.has_identity())
    throw IoError("checkpoint: identity mixers are never persisted");
  Model& m = const_cast<Model&>(model);  // traversal only; tensors untouched
  auto named = m.named_parameters();

  json tensors = json::array();
  for (const auto& [name, t] : named) {
    if (!t->defined()) throw IoError("checkpoint: undefined tensor " + name);
    tensors.push_back(json{{"name", name}, {"shape", t->shape()}});
  }
  json header{{"format_version", kCheckpointVersion},
              {"model", model_config_json(model.cfg)},
              {"mamba", mamba_config_json(model.mamba_cfg)},
              {"layout", layout_json(model.layout)},
              {"seed", model.seed},
              {"tokens_trained", model.tokens_trained},
              {"tensors", tensors}};
  const std::string hs = header.dump();

  std::string payload;
  size_t total = 0;
  for (const auto& [name, t] : named) total += t->numel() * 4;
  payload.reserve(total);
  for (const auto& [name, t] : named) append_f32_le(payload, t->data(), t->numel());
  const uint64_t checksum = fnv1a64(payload.data(), payload.size());

  std::string blob;
  blob.reserve(8 + 4 + hs.size() + payload.size() + 8);
  blob.append(kMagic, 8);
  append_u32_le(blob, static_cast<uint32_t>(hs.size()));
  blob.append(hs);
  blob.append(payload);
  append_u64_le(blob, checksum);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 20 || std::memcmp(blob.data(), kMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const uint32_t hlen = static_cast<uint32_t>(bytes[8]) | (static_cast<uint32_t>(bytes[9]) << 8) |
                        (static_cast<uint32_t>(bytes[10]) << 16) |
                        (static_cast<uint32_t>(bytes[11]) << 24);
  if (blob.size() < 12 + static_cast<size_t>(hlen) + 8)
    throw IoError("checkpoint: truncated header in " + path);
  json header = json::parse(blob.substr(12, hlen), nullptr, false);
  if (header.is_discarded()) throw IoError("checkpoint: invalid header JSON in " + path);
  if (header.at("format_version").get<int>() != kCheckpointVersion)
    throw IoError("checkpoint: unsupported format version in " + path);

  const size_t payload_off = 12 + hlen;
  if (blob.size() < payload_off + 8) throw IoError("checkpoint: truncated file " + path);
  const size_t payload_len = blob.size() - payload_off - 8;
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<uint64_t>(bytes[blob.size() - 8 + i]) << (8 * i);
  const uint64_t computed = fnv1a64(blob.data() + payload_off, payload_len);
  if (stored != computed)
    throw IoError("checkpoint: checksum mismatch in " + path + " (file corrupt), refusing to load");

  Model m = make_model_shell(model_config_from_json(header.at("model")),
                             mamba_config_from_json(header.at("mamba")),
                             layout_from_json(header.at("layout")));
  m.seed = header.value("seed", 0ULL);
  m.tokens_trained = header.value("tokens_trained", 0ULL);

  auto named = m.named_parameters();
  const json& tensors = header.at("tensors");
  if (tensors.size() != named.size())
    throw IoError("checkpoint: tensor table has " + std::to_string(tensors.size()) +
                  " entries, expected " + std::to_string(named.size()));
  size_t off = payload_off;
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& [name, t] = named[i];
    const json& e = tensors[i];
    if (e.at("name").get<std::string>() != name)
      throw IoError("checkpoint: tensor " + std::to_string(i) + " is '" +
                    e.at("name").get<std::string>() + "', expected '" + name + "'");
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != t->shape())
      throw IoError("checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                    ", expected " + shape_str(t->shape()));
    const size_t bytes_needed = t->numel() * 4;
    if (off + bytes_needed > payload_off + payload_len)
      throw IoError("checkpoint: payload too short for " + name);
    read_f32_le(reinterpret_cast<const unsigned char*>(blob.data() + off), t->data(), t->numel());
    off += bytes_needed;
  }
  if (off != payload_off + payload_len)
    throw IoError("checkpoint: trailing payload bytes in " + path);
  return m;
}

uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("file_checksum: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(blob.data(), blob.size());
}

}  // namespace hybridlm

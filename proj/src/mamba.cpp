#include "hybridlm/mamba.hpp"

#include <cmath>
#include <cstring>

namespace hybridlm {

void MambaConfig::validate() const {
  if (d_state < 1 || n_ssm_heads < 1 || d_head < 1 || conv_width < 1 || dt_rank < 1)
    throw ConfigError("mamba config: all dimensions must be >= 1");
}

namespace {

void check_mat(const char* name, const Tensor& t, int rows, int cols) {
  if (!t.defined() || t.ndim() != 2 || t.dim(0) != rows || t.dim(1) != cols)
    throw ShapeError(std::string("mamba params: ") + name + " expected (" + std::to_string(rows) +
                     "," + std::to_string(cols) + "), got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

void check_vec(const char* name, const Tensor& t, int len) {
  if (!t.defined() || t.ndim() != 1 || t.dim(0) != len)
    throw ShapeError(std::string("mamba params: ") + name + " expected (" + std::to_string(len) +
                     "), got " + (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

inline float softplus_scalar(float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); }
inline float silu_scalar(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace

void MambaParams::check_shapes(const MambaConfig& cfg, int d_model) const {
  check_mat("in_x", in_x, d_model, cfg.channels());
  check_mat("in_b", in_b, d_model, cfg.bc_dim());
  check_mat("in_c", in_c, d_model, cfg.bc_dim());
  check_vec("in_b_bias", in_b_bias, cfg.bc_dim());
  check_vec("in_c_bias", in_c_bias, cfg.bc_dim());
  check_mat("in_gate", in_gate, d_model, cfg.channels());
  check_vec("gate_bias", gate_bias, cfg.channels());
  check_mat("dt_down", dt_down, cfg.channels(), cfg.dt_rank);
  check_mat("dt_up", dt_up, cfg.dt_rank, cfg.channels());
  check_vec("dt_bias", dt_bias, cfg.channels());
  check_mat("a_log", a_log, cfg.channels(), cfg.d_state);
  check_mat("conv_w", conv_w, cfg.conv_width, cfg.channels());
  check_vec("conv_b", conv_b, cfg.channels());
  check_mat("out_proj", out_proj, cfg.channels(), d_model);
}

MambaParams random_mamba_params(const MambaConfig& cfg, int d_model, Rng& rng, bool rg) {
  cfg.validate();
  const int ch = cfg.channels();
  const float in_std = 1.0f / std::sqrt(static_cast<float>(d_model));
  MambaParams p;
  p.in_x = randn({d_model, ch}, rng, in_std, rg);
  p.in_b = randn({d_model, cfg.bc_dim()}, rng, in_std, rg);
  p.in_c = randn({d_model, cfg.bc_dim()}, rng, in_std, rg);
  p.in_b_bias = zeros({cfg.bc_dim()}, rg);
  p.in_c_bias = zeros({cfg.bc_dim()}, rg);
  p.in_gate = randn({d_model, ch}, rng, in_std, rg);
  p.gate_bias = zeros({ch}, rg);
  p.dt_down = randn({ch, cfg.dt_rank}, rng, 1.0f / std::sqrt(static_cast<float>(ch)), rg);
  const float dt_up_bound = 1.0f / std::sqrt(static_cast<float>(cfg.dt_rank));
  p.dt_up = rand_uniform({cfg.dt_rank, ch}, rng, -dt_up_bound, dt_up_bound, rg);
  p.dt_bias = zeros({ch}, rg);
  for (int c = 0; c < ch; ++c) {
    // dt ~ logUniform(1e-3, 1e-1); bias stores softplus^-1(dt)
    const float dt = std::exp(rng.uniform_f32(std::log(1e-3f), std::log(1e-1f)));
    p.dt_bias.data()[c] = std::log(std::expm1(dt));
  }
  p.a_log = zeros({ch, cfg.d_state}, rg);
  for (int c = 0; c < ch; ++c)
    for (int n = 0; n < cfg.d_state; ++n)
      p.a_log.data()[static_cast<size_t>(c) * cfg.d_state + n] =
          std::log(static_cast<float>(n + 1));
  const float conv_bound = 1.0f / std::sqrt(static_cast<float>(cfg.conv_width));
  p.conv_w = rand_uniform({cfg.conv_width, ch}, rng, -conv_bound, conv_bound, rg);
  p.conv_b = zeros({ch}, rg);
  p.out_proj = randn({ch, d_model}, rng, 1.0f / std::sqrt(static_cast<float>(ch)), rg);
  return p;
}

SsmState SsmState::zero(const MambaConfig& cfg) {
  SsmState s;
  s.h.assign(static_cast<size_t>(cfg.channels()) * cfg.d_state, 0.0f);
  s.conv_tail.assign(static_cast<size_t>(cfg.conv_width - 1) * cfg.channels(), 0.0f);
  return s;
}

std::pair<Tensor, Tensor> discretize(const Tensor& dt, const Tensor& a_log, const Tensor& B,
                                     int n_heads) {
  if (dt.ndim() != 2 || a_log.ndim() != 2 || B.ndim() != 2)
    throw ShapeError("discretize: dt " + shape_str(dt.shape()) + ", a_log " +
                     shape_str(a_log.shape()) + ", B " + shape_str(B.shape()));
  const int t = dt.dim(0), ch = dt.dim(1), n_state = a_log.dim(1);
  if (a_log.dim(0) != ch || ch % n_heads != 0 || B.dim(0) != t || B.dim(1) != n_heads * n_state)
    throw ShapeError("discretize: inconsistent dims, dt " + shape_str(dt.shape()) + ", a_log " +
                     shape_str(a_log.shape()) + ", B " + shape_str(B.shape()));
  for (float v : dt.values())
    if (!(v > 0.0f)) throw NumericError("discretize: dt must be strictly positive");
  const int head_width = ch / n_heads;
  Tensor abar = zeros({t, ch, n_state});
  Tensor bbar = zeros({t, ch, n_state});
  for (int i = 0; i < t; ++i)
    for (int c = 0; c < ch; ++c) {
      const float delta = dt.data()[static_cast<size_t>(i) * ch + c];
      const int head = c / head_width;
      for (int n = 0; n < n_state; ++n) {
        const size_t idx = (static_cast<size_t>(i) * ch + c) * n_state + n;
        const float a = -std::exp(a_log.data()[static_cast<size_t>(c) * n_state + n]);
        abar.data()[idx] = std::exp(delta * a);
        bbar.data()[idx] =
            delta * B.data()[static_cast<size_t>(i) * n_heads * n_state + head * n_state + n];
      }
    }
  return {abar, bbar};
}

Tensor ssm_scan(const MambaParams& p, const MambaConfig& cfg, const Tensor& u) {
  if (u.ndim() != 2) throw ShapeError("ssm_scan: input must be (t, d_model), got " + shape_str(u.shape()));
  p.check_shapes(cfg, u.dim(1));
  Tensor x_raw = matmul(u, p.in_x);
  Tensor x_conv = causal_conv1d(x_raw, p.conv_w, p.conv_b);
  Tensor x = cfg.conv_activation ? silu(x_conv) : x_conv;
  Tensor b = add_row(matmul(u, p.in_b), p.in_b_bias);
  Tensor c = add_row(matmul(u, p.in_c), p.in_c_bias);
  Tensor dt = softplus(add_row(matmul(matmul(x, p.dt_down), p.dt_up), p.dt_bias));
  return selective_scan(x, dt, b, c, p.a_log, cfg.n_ssm_heads);
}

std::vector<float> ssm_step(const MambaParams& p, const MambaConfig& cfg, SsmState& state,
                            const float* u_t, int d_model) {
  const int ch = cfg.channels();
  const int n_state = cfg.d_state;
  const int w = cfg.conv_width;
  if (state.h.size() != static_cast<size_t>(ch) * n_state ||
      state.conv_tail.size() != static_cast<size_t>(w - 1) * ch)
    throw ShapeError("ssm_step: state size does not match config");

  std::vector<float> x_raw(static_cast<size_t>(ch), 0.0f);
  for (int d = 0; d < d_model; ++d) {
    const float uv = u_t[d];
    const float* row = p.in_x.data() + static_cast<size_t>(d) * ch;
    for (int c = 0; c < ch; ++c) x_raw[static_cast<size_t>(c)] += uv * row[c];
  }

  // depthwise causal conv over [tail..., x_raw]; tail is oldest-first
  std::vector<float> x(static_cast<size_t>(ch));
  for (int c = 0; c < ch; ++c) {
    float acc = p.conv_b.data()[c];
    for (int j = 0; j < w - 1; ++j)
      acc += p.conv_w.data()[static_cast<size_t>(j) * ch + c] *
             state.conv_tail[static_cast<size_t>(j) * ch + c];
    acc += p.conv_w.data()[static_cast<size_t>(w - 1) * ch + c] * x_raw[static_cast<size_t>(c)];
    x[static_cast<size_t>(c)] = cfg.conv_activation ? silu_scalar(acc) : acc;
  }
  if (w > 1) {
    std::memmove(state.conv_tail.data(), state.conv_tail.data() + ch,
                 sizeof(float) * static_cast<size_t>(w - 2) * ch);
    std::memcpy(state.conv_tail.data() + static_cast<size_t>(w - 2) * ch, x_raw.data(),
                sizeof(float) * static_cast<size_t>(ch));
  }

  const int bc = cfg.bc_dim();
  std::vector<float> bvec(p.in_b_bias.values().begin(), p.in_b_bias.values().end());
  std::vector<float> cvec(p.in_c_bias.values().begin(), p.in_c_bias.values().end());
  for (int d = 0; d < d_model; ++d) {
    const float uv = u_t[d];
    const float* rb = p.in_b.data() + static_cast<size_t>(d) * bc;
    const float* rc = p.in_c.data() + static_cast<size_t>(d) * bc;
    for (int k = 0; k < bc; ++k) {
      bvec[static_cast<size_t>(k)] += uv * rb[k];
      cvec[static_cast<size_t>(k)] += uv * rc[k];
    }
  }

  std::vector<float> dt_low(static_cast<size_t>(cfg.dt_rank), 0.0f);
  for (int c = 0; c < ch; ++c) {
    const float xv = x[static_cast<size_t>(c)];
    const float* row = p.dt_down.data() + static_cast<size_t>(c) * cfg.dt_rank;
    for (int r = 0; r < cfg.dt_rank; ++r) dt_low[static_cast<size_t>(r)] += xv * row[r];
  }
  std::vector<float> dt(p.dt_bias.values().begin(), p.dt_bias.values().end());
  for (int r = 0; r < cfg.dt_rank; ++r) {
    const float lv = dt_low[static_cast<size_t>(r)];
    const float* row = p.dt_up.data() + static_cast<size_t>(r) * ch;
    for (int c = 0; c < ch; ++c) dt[static_cast<size_t>(c)] += lv * row[c];
  }
  for (int c = 0; c < ch; ++c) dt[static_cast<size_t>(c)] = softplus_scalar(dt[static_cast<size_t>(c)]);

  std::vector<float> y(static_cast<size_t>(ch), 0.0f);
  const int head_width = ch / cfg.n_ssm_heads;
  for (int c = 0; c < ch; ++c) {
    const int head = c / head_width;
    const float delta = dt[static_cast<size_t>(c)];
    const float xv = x[static_cast<size_t>(c)];
    const float* brow = bvec.data() + static_cast<size_t>(head) * n_state;
    const float* crow = cvec.data() + static_cast<size_t>(head) * n_state;
    float* hrow = state.h.data() + static_cast<size_t>(c) * n_state;
    const float* arow = p.a_log.data() + static_cast<size_t>(c) * n_state;
    float acc = 0.0f;
    for (int n = 0; n < n_state; ++n) {
      const float a = -std::exp(arow[n]);
      const float ab = std::exp(delta * a);
      hrow[n] = ab * hrow[n] + delta * brow[n] * xv;
      acc += crow[n] * hrow[n];
    }
    y[static_cast<size_t>(c)] = acc;
  }
  return y;
}

Tensor mixer_forward(const MambaParams& p, const MambaConfig& cfg, const Tensor& x, MixerMode mode,
                     SsmState* state) {
  if (x.ndim() != 2) throw ShapeError("mixer_forward: input must be 2-D, got " + shape_str(x.shape()));
  const int d_model = x.dim(1);
  if (mode == MixerMode::kScan) {
    if (state != nullptr)
      throw ShapeError("mixer_forward: scan mode takes no state");
    Tensor y = ssm_scan(p, cfg, x);
    Tensor gate = silu(add_row(matmul(x, p.in_gate), p.gate_bias));
    return matmul(mul(y, gate), p.out_proj);
  }
  if (state == nullptr) throw ShapeError("mixer_forward: step mode requires a state");
  if (x.dim(0) != 1)
    throw ShapeError("mixer_forward: step mode takes a single row, got " + shape_str(x.shape()));
  p.check_shapes(cfg, d_model);
  std::vector<float> y = ssm_step(p, cfg, *state, x.data(), d_model);
  const int ch = cfg.channels();
  std::vector<float> gated(static_cast<size_t>(ch));
  for (int c = 0; c < ch; ++c) {
    float g = p.gate_bias.data()[c];
    for (int d = 0; d < d_model; ++d)
      g += x.data()[d] * p.in_gate.data()[static_cast<size_t>(d) * ch + c];
    gated[static_cast<size_t>(c)] = y[static_cast<size_t>(c)] * silu_scalar(g);
  }
  std::vector<float> out(static_cast<size_t>(d_model), 0.0f);
  for (int c = 0; c < ch; ++c) {
    const float gv = gated[static_cast<size_t>(c)];
    const float* row = p.out_proj.data() + static_cast<size_t>(c) * d_model;
    for (int d = 0; d < d_model; ++d) out[static_cast<size_t>(d)] += gv * row[d];
  }
  return from_vector({1, d_model}, std::move(out));
}

}  // namespace hybridlm

#pragma once

#include <cstdint>
#include <utility>

#include "hybridlm/tensor.hpp"

namespace hybridlm {

// Selective-SSM mixer configuration. The SSM channel block is
// n_ssm_heads * d_head wide so the attention projections can be copied in
// verbatim; d_inner() reports the combined value+gate width (2*d_model at the
// desk scale; the paper-scale reference is state size 16, inner dim 4096).
struct MambaConfig {
  int d_state = 16;
  int n_ssm_heads = 8;
  int d_head = 16;
  int conv_width = 4;
  int dt_rank = 8;
  // SiLU after the causal conv. Off gives the exactly-linear variant the
  // linearized-attention view assumes; tests use it for superposition checks.
  bool conv_activation = true;

  int channels() const { return n_ssm_heads * d_head; }
  int bc_dim() const { return n_ssm_heads * d_state; }
  int d_inner() const { return 2 * channels(); }
  void validate() const;
};

// All projections stored (in_features, out_features) for row-major x @ W.
struct MambaParams {
  Tensor in_x;      // (d_model, channels)       value path, MIL: repeat(W_V, g)
  Tensor in_b;      // (d_model, bc_dim)         MIL: repeat(W_K, g)
  Tensor in_c;      // (d_model, bc_dim)         MIL: W_Q
  Tensor in_b_bias; // (bc_dim)                  zero at init
  Tensor in_c_bias; // (bc_dim)
  Tensor in_gate;   // (d_model, channels)
  Tensor gate_bias; // (channels)
  Tensor dt_down;   // (channels, dt_rank)
  Tensor dt_up;     // (dt_rank, channels)
  Tensor dt_bias;   // (channels)
  Tensor a_log;     // (channels, d_state)       A = -exp(a_log)
  Tensor conv_w;    // (conv_width, channels)    depthwise, last row = current step
  Tensor conv_b;    // (channels)
  Tensor out_proj;  // (channels, d_model)       MIL: W_O

  void check_shapes(const MambaConfig& cfg, int d_model) const;
};

MambaParams random_mamba_params(const MambaConfig& cfg, int d_model, Rng& rng,
                                bool requires_grad = false);

// Fixed-size decode state: SSM hidden + causal-conv tail. Byte size is
// independent of how many tokens have been processed.
struct SsmState {
  std::vector<float> h;          // channels * d_state
  std::vector<float> conv_tail;  // (conv_width - 1) * channels, oldest first

  static SsmState zero(const MambaConfig& cfg);
  size_t bytes() const { return (h.size() + conv_tail.size()) * sizeof(float); }
};

// Zero-order hold on the decay, Euler on the input path:
//   abar[t,c,n] = exp(dt[t,c] * A[c,n]),  bbar[t,c,n] = dt[t,c] * B[t,head(c),n]
// dt must be strictly positive. Forward-only helper (training uses the fused
// selective_scan op).
std::pair<Tensor, Tensor> discretize(const Tensor& dt, const Tensor& a_log, const Tensor& B,
                                     int n_heads);

// Full-sequence mode: u is the mixer input (t, d_model). Runs the value path
// (projection, causal conv, activation), derives dt/B/C, and applies the
// recurrence from h_0 = 0. Output is (t, channels), pre-gate.
Tensor ssm_scan(const MambaParams& p, const MambaConfig& cfg, const Tensor& u);

// Single-step mode with identical numerics to one scan step. No gradients.
std::vector<float> ssm_step(const MambaParams& p, const MambaConfig& cfg, SsmState& state,
                            const float* u_t, int d_model);

enum class MixerMode { kScan, kStep };

// conv -> SiLU -> SSM -> gate -> out_proj, shape-preserving on d_model.
// kScan: state must be null. kStep: x must be a single row and state non-null.
Tensor mixer_forward(const MambaParams& p, const MambaConfig& cfg, const Tensor& x, MixerMode mode,
                     SsmState* state);

}  // namespace hybridlm

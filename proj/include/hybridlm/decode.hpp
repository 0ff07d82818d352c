#pragma once

#include "hybridlm/transformer.hpp"

namespace hybridlm {

// Incremental single-stream decoder over raw float buffers: no tape, no
// per-step allocation. Numerics mirror the tensor prefill path within float
// tolerance; equivalence is pinned by tests. The decoder borrows the model,
// which must stay immutable while decoding.
class Decoder {
 public:
  explicit Decoder(const Model& model);

  void reset();
  // Feed one token, get logits over the vocabulary.
  const std::vector<float>& step(int32_t token);

  int position() const { return pos_; }
  size_t kv_bytes() const { return kv_.bytes(model_.layout); }
  size_t ssm_bytes() const;
  size_t state_bytes() const { return kv_bytes() + ssm_bytes(); }
  const KvCache& kv() const { return kv_; }

 private:
  const Model& model_;
  KvCache kv_;
  std::vector<SsmState> ssm_;  // indexed by layer; empty unless kMamba
  int pos_ = 0;
  // scratch buffers reused across steps
  std::vector<float> x_, normed_, q_, krow_, vrow_, ctx_, proj_, mlp_up_, logits_;
};

}  // namespace hybridlm

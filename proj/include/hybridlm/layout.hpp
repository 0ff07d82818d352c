#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hybridlm/errors.hpp"

namespace hybridlm {

enum class MixerKind : uint8_t { kMha = 0, kMamba = 1, kIdentity = 2 };

const char* mixer_kind_name(MixerKind k);
MixerKind mixer_kind_from_name(const std::string& name);

// Why/when a layer's mixer was replaced. stage < 0 means "never replaced".
struct LayerProvenance {
  int stage = -1;
  std::string method;  // importance method that selected it ("loo"/"mmr"/"manual")
  double score = std::nan("");
  std::string init;  // "mil" | "random"
};

// Per-layer mixer assignment; the central object the pipeline mutates.
// kIdentity is only ever used for leave-one-out evaluation and is refused by
// checkpoint serialization.
struct HybridLayout {
  std::vector<MixerKind> mixers;
  std::vector<LayerProvenance> provenance;

  static HybridLayout all_mha(int n_layers) {
    HybridLayout l;
    l.mixers.assign(static_cast<size_t>(n_layers), MixerKind::kMha);
    l.provenance.resize(static_cast<size_t>(n_layers));
    return l;
  }

  int n_layers() const { return static_cast<int>(mixers.size()); }

  int mamba_count() const {
    int h = 0;
    for (MixerKind k : mixers)
      if (k == MixerKind::kMamba) ++h;
    return h;
  }

  bool has_identity() const {
    for (MixerKind k : mixers)
      if (k == MixerKind::kIdentity) return true;
    return false;
  }

  // Shorthand "H1-h/L" where h counts the Mamba entries.
  std::string name() const {
    return "H1-" + std::to_string(mamba_count()) + "/" + std::to_string(n_layers());
  }
  // Filesystem-safe variant, e.g. "H1-4-8".
  std::string file_stem() const {
    return "H1-" + std::to_string(mamba_count()) + "-" + std::to_string(n_layers());
  }
};

}  // namespace hybridlm

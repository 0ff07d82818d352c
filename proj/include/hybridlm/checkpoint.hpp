#pragma once

#include <string>

#include "hybridlm/transformer.hpp"

namespace hybridlm {

// Single-file checkpoint:
//   "HLMCKPT1" | u32 header length | header JSON | payload | u64 fnv1a(payload)
// The header carries format version, configs, layout + provenance, rng seed,
// tokens trained, and the tensor table ({name, shape} in payload order).
// Tensors are raw 32-bit little-endian floats; load(save(m)) is bit-exact.
// Layouts containing identity mixers are evaluation-only and refused.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);  // IoError on checksum mismatch

// Builds a model shell (zero tensors) matching configs + layout.
Model make_model_shell(const ModelConfig& cfg, const MambaConfig& mcfg,
                       const HybridLayout& layout);

uint64_t file_checksum(const std::string& path);  // fnv1a over the whole file

inline constexpr int kCheckpointVersion = 1;

}  // namespace hybridlm

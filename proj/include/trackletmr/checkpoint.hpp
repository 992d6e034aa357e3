#pragma once

#include <string>

#include "trackletmr/model.hpp"

namespace tmr {

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
};

// Single-file format: 8-byte magic, little-endian u64 header length, JSON
// header (model config + parameter names/shapes in sorted order), then the
// float32 little-endian payload in the same order. Loading validates the
// magic, every shape, and the payload length; mismatches throw FormatError.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore<float>& params);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace tmr

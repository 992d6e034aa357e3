#pragma once

#include <string>
#include <vector>

#include "trackletmr/detections.hpp"

namespace tmr {

// Writes the manifest JSON at `manifest_path` and the flat little-endian
// float32 feature blob next to it (same stem, ".bin"). Feature offsets are in
// float units. save -> load is the identity, bit for bit.
void save_detections(const DetectionSequence& seq, const std::string& manifest_path);

DetectionSequence load_detections(const std::string& manifest_path);

// Flat little-endian float32 vectors, e.g. per-video frame features (L x d_f).
void save_floats_le32(const std::vector<float>& data, const std::string& path);
std::vector<float> load_floats_le32(const std::string& path);

}  // namespace tmr

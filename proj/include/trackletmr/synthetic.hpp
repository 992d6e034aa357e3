#pragma once

#include <string>
#include <vector>

#include "trackletmr/detections.hpp"

namespace tmr {

// Knobs for the deterministic benchmark generator. noise_sigma is the
// expected noise vector norm (per-coordinate sigma = noise_sigma / sqrt(dim)).
// state_subspace_dim leading visual coordinates carry per-object state signs;
// the rest carry the class embedding.
struct SyntheticConfig {
  int num_videos = 500;
  int L = 64;
  int max_objects = 4;
  int d_v = 64;
  int d_s = 64;
  int d_f = 64;
  int state_subspace_dim = 8;
  double noise_sigma = 0.05;
  double relation_active_prob = 0.5;
  double fps = 2.0;
  std::uint64_t seed = 7;

  void validate() const;
};

struct SyntheticExample {
  std::string video_id;
  DetectionSequence seq;
  std::vector<float> frame_feats;  // L x d_f row-major
  std::string query;
  std::vector<Moment> gt;  // seconds
};

// Deterministic for a fixed config: each video is generated from an
// independent substream keyed by (seed, video index). Every object flips its
// state sign at one frame; an edge query's ground truth is the interval
// between its two endpoints' flips (the span where exactly one has flipped),
// a single-object query's is an 8-frame window centered on the flip.
std::vector<SyntheticExample> generate_synthetic(const SyntheticConfig& cfg);

// Vocabulary shared by the generator and tests.
const std::vector<std::string>& synthetic_object_classes();
const std::vector<std::string>& synthetic_predicates();

}  // namespace tmr

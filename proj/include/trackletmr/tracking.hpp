#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trackletmr/detections.hpp"
#include "trackletmr/tensor.hpp"

namespace tmr {

struct TrackerConfig {
  float obj_conf_thresh = 0.2f;
  float rel_conf_thresh = 0.3f;
  float track_thresh = 0.0f;
  int track_buffer = 30;
  float match_thresh = 0.9f;

  void validate() const;
};

// One tracked entity's aligned per-frame slots; empty vectors mean absent.
struct TrackSlot {
  std::vector<float> visual;
  std::vector<float> semantic;
  float conf = 0.0f;
};

struct ObjectTracklet {
  int track_id = 0;
  std::string cls;
  std::vector<std::uint8_t> presence;  // length L
  std::vector<TrackSlot> slots;        // length L
};

struct RelationshipTracklet {
  int subject_track = 0;
  int object_track = 0;
  std::string predicate;
  std::vector<std::uint8_t> presence;
  std::vector<TrackSlot> slots;
};

// Temporally aligned dense view the model consumes. features[n, t, :] is
// visual || semantic of tracklet n at frame t, all-zero exactly when absent.
// Objects come first, then relations. adjacency is N_O x N_R incidence.
struct TrackletBundle {
  std::int64_t L = 0;
  std::int64_t feat_dim = 0;
  std::vector<ObjectTracklet> objects;
  std::vector<RelationshipTracklet> relations;
  ad::Tensor<float> features;
  std::vector<std::uint8_t> adjacency;

  std::int64_t num_objects() const { return static_cast<std::int64_t>(objects.size()); }
  std::int64_t num_relations() const { return static_cast<std::int64_t>(relations.size()); }
};

// Mean of the visual and semantic cosine similarities; a zero vector's cosine
// contributes 0. Throws DimMismatch on dimension disagreement.
double similarity(const std::vector<float>& va, const std::vector<float>& sa,
                  const std::vector<float>& vb, const std::vector<float>& sb);

struct ObjectTrackingResult {
  std::vector<ObjectTracklet> tracklets;
  // det_to_track[frame][det_idx] = track id, or -1 for dropped detections.
  std::vector<std::vector<int>> det_to_track;
};

ObjectTrackingResult track_objects(const DetectionSequence& seq, const TrackerConfig& cfg);

// Surviving relationship detections keyed by (subject track, object track,
// predicate). Relations whose endpoints were dropped are skipped; the count
// lands in *dangling_count when given.
std::vector<RelationshipTracklet> track_relations(const DetectionSequence& seq,
                                                  const ObjectTrackingResult& objects,
                                                  const TrackerConfig& cfg,
                                                  std::size_t* dangling_count = nullptr);

TrackletBundle build_bundle(std::vector<ObjectTracklet> objects,
                            std::vector<RelationshipTracklet> relations, std::int64_t L,
                            std::int64_t feat_dim);

TrackletBundle track_video(const DetectionSequence& seq, const TrackerConfig& cfg);

// Fraction of hinted detections whose track agrees with a one-to-one greedy
// matching between generator identities and predicted tracks; splits and
// merges both count as errors.
double association_accuracy(const DetectionSequence& seq, const ObjectTrackingResult& result);

}  // namespace tmr

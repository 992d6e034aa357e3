#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

namespace tmr {

// Frame-to-seconds mapping for one video: frame i sits at i / fps seconds.
struct TimeBase {
  double fps = 1.0;
  std::int64_t num_frames = 1;

  double duration() const { return static_cast<double>(num_frames) / fps; }
  double frame_to_seconds(double frame) const { return frame / fps; }

  bool valid() const { return fps > 0.0 && num_frames >= 1; }
};

// Half-open interval [start, end) in seconds. end > start always.
struct Moment {
  double start = 0.0;
  double end = 0.0;

  double length() const { return end - start; }
  double center() const { return 0.5 * (start + end); }
  bool valid() const;
};

// One scored moment prediction anchored at (level, index) of the pyramid.
struct Candidate {
  Moment moment;
  double score = 0.0;
  int level = 0;
  std::int64_t anchor = 0;
};

struct QueryEdge {
  std::size_t subject = 0;
  std::string predicate;
  std::size_t object = 0;

  bool operator==(const QueryEdge& other) const {
    return subject == other.subject && object == other.object &&
           predicate == other.predicate;
  }
};

// Parsed query: object class names (first-appearance order, deduplicated) and
// subject-predicate-object edges indexing into `objects`.
struct QueryGraph {
  std::vector<std::string> objects;
  std::vector<QueryEdge> edges;

  bool operator==(const QueryGraph& other) const {
    return objects == other.objects && edges == other.edges;
  }
};

// Intersection over union of two intervals; lengths measured in seconds, so
// the value is independent of fps. Touching endpoints count as disjoint.
double temporal_iou(const Moment& a, const Moment& b);

// Smallest interval containing both inputs.
Moment enclosing_span(const Moment& a, const Moment& b);

}  // namespace tmr

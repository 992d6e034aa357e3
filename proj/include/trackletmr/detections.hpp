#pragma once

#include <array>
#include <string>
#include <vector>

#include "trackletmr/core.hpp"

namespace tmr {

// One detected object in one frame. track_hint carries generator ground-truth
// identity (-1 when unknown); it never influences tracking.
struct ObjectDetection {
  std::string cls;
  int track_hint = -1;
  std::array<float, 4> box{};  // x1, y1, x2, y2 normalized to [0,1]
  float conf = 0.0f;
  std::vector<float> visual;
  std::vector<float> semantic;
};

struct RelationshipDetection {
  int subject_idx = 0;  // indices into the frame's object list
  int object_idx = 0;
  std::string predicate;
  float conf = 0.0f;
  std::vector<float> visual;
  std::vector<float> semantic;
};

struct FrameDetections {
  std::vector<ObjectDetection> objects;
  std::vector<RelationshipDetection> relations;
};

struct DetectionSequence {
  TimeBase timebase;
  int d_v = 0;
  int d_s = 0;
  std::vector<FrameDetections> frames;
};

}  // namespace tmr

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "trackletmr/synthetic.hpp"
#include "trackletmr/tracking.hpp"

using namespace tmr;

namespace {

std::vector<float> unit(int dim, int axis) {
  std::vector<float> v(static_cast<std::size_t>(dim), 0.0f);
  v[static_cast<std::size_t>(axis)] = 1.0f;
  return v;
}

ObjectDetection det(const std::string& cls, std::vector<float> vis, std::vector<float> sem,
                    float conf = 0.9f) {
  ObjectDetection o;
  o.cls = cls;
  o.box = {0.1f, 0.1f, 0.4f, 0.4f};
  o.conf = conf;
  o.visual = std::move(vis);
  o.semantic = std::move(sem);
  return o;
}

DetectionSequence two_object_sequence(std::int64_t frames) {
  DetectionSequence seq;
  seq.timebase = TimeBase{1.0, frames};
  seq.d_v = 4;
  seq.d_s = 4;
  for (std::int64_t t = 0; t < frames; ++t) {
    FrameDetections f;
    f.objects.push_back(det("cup", unit(4, 0), unit(4, 0)));
    f.objects.push_back(det("book", unit(4, 1), unit(4, 1)));
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

}  // namespace

TEST_CASE("similarity worked examples") {
  const auto e0 = unit(2, 0);
  const auto e1 = unit(2, 1);
  CHECK(similarity(e0, e1, e0, e1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(similarity(e0, e1, e1, e1) == doctest::Approx(0.5).epsilon(1e-12));

  const std::vector<float> va{1, 0};
  const std::vector<float> vb{static_cast<float>(1 / std::sqrt(2.0)),
                              static_cast<float>(1 / std::sqrt(2.0))};
  const std::vector<float> s{0, 1};
  CHECK(similarity(va, s, vb, s) == doctest::Approx((std::sqrt(2.0) / 2 + 1) / 2).epsilon(1e-6));
}

TEST_CASE("similarity defines zero-vector cosine as 0 and checks dims") {
  const std::vector<float> z{0, 0};
  const auto e0 = unit(2, 0);
  CHECK(similarity(z, e0, e0, e0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS((void)similarity(unit(3, 0), e0, e0, e0), DimMismatch);
}

TEST_CASE("two constant objects yield two fully present tracklets") {
  auto seq = two_object_sequence(10);
  auto result = track_objects(seq, TrackerConfig{});
  REQUIRE(result.tracklets.size() == 2);
  for (const auto& tr : result.tracklets) {
    for (std::int64_t t = 0; t < 10; ++t) CHECK(tr.presence[static_cast<std::size_t>(t)] == 1);
  }
  CHECK(association_accuracy(seq, result) == 1.0);  // no hints -> trivially 1
}

TEST_CASE("a gap shorter than track_buffer keeps one tracklet") {
  auto seq = two_object_sequence(10);
  // Object 0 absent frames 4-6.
  for (std::int64_t t = 4; t <= 6; ++t)
    seq.frames[static_cast<std::size_t>(t)].objects.erase(
        seq.frames[static_cast<std::size_t>(t)].objects.begin());
  auto result = track_objects(seq, TrackerConfig{});
  REQUIRE(result.tracklets.size() == 2);
  const auto& cup = result.tracklets[0];
  CHECK(cup.cls == "cup");
  CHECK(cup.presence[3] == 1);
  CHECK(cup.presence[4] == 0);
  CHECK(cup.presence[6] == 0);
  CHECK(cup.presence[7] == 1);
}

TEST_CASE("a gap longer than track_buffer starts a new tracklet") {
  auto seq = two_object_sequence(10);
  for (std::int64_t t = 3; t <= 7; ++t)
    seq.frames[static_cast<std::size_t>(t)].objects.erase(
        seq.frames[static_cast<std::size_t>(t)].objects.begin());
  TrackerConfig cfg;
  cfg.track_buffer = 2;
  auto result = track_objects(seq, cfg);
  CHECK(result.tracklets.size() == 3);
}

TEST_CASE("low-confidence detections are dropped") {
  auto seq = two_object_sequence(5);
  for (auto& frame : seq.frames) frame.objects[0].conf = 0.1f;  // below 0.2
  auto result = track_objects(seq, TrackerConfig{});
  REQUIRE(result.tracklets.size() == 1);
  CHECK(result.tracklets[0].cls == "book");
  for (const auto& frame_assign : result.det_to_track) CHECK(frame_assign[0] == -1);
}

TEST_CASE("class gate prevents cross-class matches") {
  DetectionSequence seq;
  seq.timebase = TimeBase{1.0, 2};
  seq.d_v = 4;
  seq.d_s = 4;
  for (int t = 0; t < 2; ++t) {
    FrameDetections f;
    // Identical features but different classes.
    f.objects.push_back(det(t == 0 ? "cup" : "book", unit(4, 0), unit(4, 0)));
    seq.frames.push_back(std::move(f));
  }
  auto result = track_objects(seq, TrackerConfig{});
  CHECK(result.tracklets.size() == 2);
}

TEST_CASE("relationship tracklets keyed per predicate") {
  auto seq = two_object_sequence(6);
  for (std::int64_t t = 2; t <= 5; ++t) {
    auto& frame = seq.frames[static_cast<std::size_t>(t)];
    RelationshipDetection r;
    r.subject_idx = 0;
    r.object_idx = 1;
    r.predicate = "holds";
    r.conf = 0.4f;
    r.visual = unit(4, 2);
    r.semantic = unit(4, 2);
    frame.relations.push_back(r);
    if (t <= 3) {
      r.predicate = "lifts";
      frame.relations.push_back(r);
    }
  }
  auto objects = track_objects(seq, TrackerConfig{});
  auto rels = track_relations(seq, objects, TrackerConfig{});
  REQUIRE(rels.size() == 2);
  CHECK(rels[0].predicate == "holds");
  for (std::int64_t t = 0; t < 6; ++t)
    CHECK(rels[0].presence[static_cast<std::size_t>(t)] == (t >= 2 ? 1 : 0));
  CHECK(rels[1].predicate == "lifts");
}

TEST_CASE("relations below threshold produce no tracklet") {
  auto seq = two_object_sequence(4);
  RelationshipDetection r;
  r.subject_idx = 0;
  r.object_idx = 1;
  r.predicate = "holds";
  r.conf = 0.25f;  // below 0.3
  r.visual = unit(4, 2);
  r.semantic = unit(4, 2);
  seq.frames[1].relations.push_back(r);
  auto objects = track_objects(seq, TrackerConfig{});
  auto rels = track_relations(seq, objects, TrackerConfig{});
  CHECK(rels.empty());
}

TEST_CASE("relations with dropped endpoints are skipped and counted") {
  auto seq = two_object_sequence(3);
  seq.frames[1].objects[0].conf = 0.05f;  // subject dropped in frame 1
  for (auto& frame : seq.frames) {
    RelationshipDetection r;
    r.subject_idx = 0;
    r.object_idx = 1;
    r.predicate = "holds";
    r.conf = 0.8f;
    r.visual = unit(4, 2);
    r.semantic = unit(4, 2);
    frame.relations.push_back(r);
  }
  auto objects = track_objects(seq, TrackerConfig{});
  std::size_t dangling = 0;
  auto rels = track_relations(seq, objects, TrackerConfig{}, &dangling);
  CHECK(dangling == 1);
  REQUIRE(rels.size() == 1);
  CHECK(rels[0].presence[0] == 1);
  CHECK(rels[0].presence[1] == 0);
  CHECK(rels[0].presence[2] == 1);
}

TEST_CASE("raising obj_conf_thresh never increases tracklet count") {
  SyntheticConfig scfg;
  scfg.num_videos = 5;
  scfg.L = 24;
  auto data = generate_synthetic(scfg);
  for (const auto& ex : data) {
    std::size_t prev = SIZE_MAX;
    for (float thresh : {0.0f, 0.3f, 0.6f, 0.8f, 0.95f}) {
      TrackerConfig cfg;
      cfg.obj_conf_thresh = thresh;
      auto result = track_objects(ex.seq, cfg);
      CHECK(result.tracklets.size() <= prev);
      prev = result.tracklets.size();
    }
  }
}

TEST_CASE("bundle zero-fills absent rows and fills adjacency") {
  auto seq = two_object_sequence(4);
  seq.frames[2].objects.erase(seq.frames[2].objects.begin());  // cup absent frame 2
  RelationshipDetection r;
  r.subject_idx = 0;
  r.object_idx = 1;
  r.predicate = "holds";
  r.conf = 0.9f;
  r.visual = unit(4, 2);
  r.semantic = unit(4, 2);
  seq.frames[0].relations.push_back(r);

  auto bundle = track_video(seq, TrackerConfig{});
  REQUIRE(bundle.num_objects() == 2);
  REQUIRE(bundle.num_relations() == 1);
  CHECK(bundle.feat_dim == 8);
  CHECK(bundle.features.shape == ad::Shape{3, 4, 8});

  // Row 0 (cup) all-zero exactly at frame 2.
  for (std::int64_t t = 0; t < 4; ++t) {
    bool all_zero = true;
    for (std::int64_t d = 0; d < 8; ++d)
      if (bundle.features.at({0, t, d}) != 0.0f) all_zero = false;
    CHECK(all_zero == (t == 2));
  }
  // Relation row present only at frame 0.
  for (std::int64_t t = 0; t < 4; ++t) {
    bool all_zero = true;
    for (std::int64_t d = 0; d < 8; ++d)
      if (bundle.features.at({2, t, d}) != 0.0f) all_zero = false;
    CHECK(all_zero == (t != 0));
  }
  // Adjacency: both objects touch the single relation.
  REQUIRE(bundle.adjacency.size() == 2);
  CHECK(bundle.adjacency[0] == 1);
  CHECK(bundle.adjacency[1] == 1);

  // Visual || semantic concatenation layout.
  CHECK(bundle.features.at({0, 0, 0}) == 1.0f);  // cup visual e0
  CHECK(bundle.features.at({0, 0, 4}) == 1.0f);  // cup semantic e0
}

TEST_CASE("synthetic tracking recovers generator identities") {
  SyntheticConfig cfg;
  cfg.num_videos = 20;
  cfg.L = 32;
  cfg.noise_sigma = 0.01;
  auto data = generate_synthetic(cfg);
  double worst = 1.0;
  for (const auto& ex : data) {
    auto result = track_objects(ex.seq, TrackerConfig{});
    worst = std::min(worst, association_accuracy(ex.seq, result));
  }
  CHECK(worst == 1.0);
}

TEST_CASE("tracking determinism") {
  SyntheticConfig cfg;
  cfg.num_videos = 2;
  cfg.L = 16;
  auto data = generate_synthetic(cfg);
  for (const auto& ex : data) {
    auto a = track_objects(ex.seq, TrackerConfig{});
    auto b = track_objects(ex.seq, TrackerConfig{});
    REQUIRE(a.tracklets.size() == b.tracklets.size());
    CHECK(a.det_to_track == b.det_to_track);
  }
}

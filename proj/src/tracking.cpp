#include "trackletmr/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "trackletmr/errors.hpp"
#include "trackletmr/log.hpp"

namespace tmr {

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size())
    throw DimMismatch("cosine: dims " + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

void TrackerConfig::validate() const {
  auto in01 = [](float v) { return v >= 0.0f && v <= 1.0f; };
  if (!in01(obj_conf_thresh) || !in01(rel_conf_thresh) || !in01(track_thresh) ||
      !in01(match_thresh))
    throw ConfigError("tracker: thresholds must be in [0,1]");
  if (track_buffer < 0) throw ConfigError("tracker: track_buffer must be >= 0");
}

double similarity(const std::vector<float>& va, const std::vector<float>& sa,
                  const std::vector<float>& vb, const std::vector<float>& sb) {
  return 0.5 * (cosine(va, vb) + cosine(sa, sb));
}

ObjectTrackingResult track_objects(const DetectionSequence& seq, const TrackerConfig& cfg) {
  cfg.validate();
  const std::int64_t L = seq.timebase.num_frames;

  struct LiveTrack {
    int id;
    std::string cls;
    std::vector<float> visual, semantic;  // last seen features
    std::int64_t last_seen;
  };
  std::vector<LiveTrack> live;
  ObjectTrackingResult result;
  result.det_to_track.resize(static_cast<std::size_t>(L));
  std::vector<ObjectTracklet>& tracklets = result.tracklets;

  auto new_track = [&](const ObjectDetection& det, std::int64_t frame) {
    const int id = static_cast<int>(tracklets.size());
    ObjectTracklet tr;
    tr.track_id = id;
    tr.cls = det.cls;
    tr.presence.assign(static_cast<std::size_t>(L), 0);
    tr.slots.resize(static_cast<std::size_t>(L));
    tracklets.push_back(std::move(tr));
    live.push_back(LiveTrack{id, det.cls, det.visual, det.semantic, frame});
    return id;
  };

  for (std::int64_t t = 0; t < L; ++t) {
    const auto& dets = seq.frames[static_cast<std::size_t>(t)].objects;
    auto& assignment = result.det_to_track[static_cast<std::size_t>(t)];
    assignment.assign(dets.size(), -1);

    // Retire tracks unseen for longer than the buffer.
    live.erase(std::remove_if(live.begin(), live.end(),
                              [&](const LiveTrack& tr) {
                                return t - tr.last_seen > cfg.track_buffer;
                              }),
               live.end());

    // All candidate (detection, track) pairs above both gates, greedily
    // accepted in order of similarity; ties by detection index then track id.
    struct Pair {
      double sim;
      std::size_t det;
      std::size_t track_pos;
    };
    std::vector<Pair> pairs;
    std::vector<std::size_t> eligible;
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (dets[d].conf < cfg.obj_conf_thresh) continue;
      eligible.push_back(d);
      for (std::size_t p = 0; p < live.size(); ++p) {
        if (live[p].cls != dets[d].cls) continue;
        const double sim =
            similarity(dets[d].visual, dets[d].semantic, live[p].visual, live[p].semantic);
        if (sim >= cfg.match_thresh) pairs.push_back({sim, d, p});
      }
    }
    std::sort(pairs.begin(), pairs.end(), [&](const Pair& a, const Pair& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      if (a.det != b.det) return a.det < b.det;
      return live[a.track_pos].id < live[b.track_pos].id;
    });

    std::vector<std::uint8_t> det_used(dets.size(), 0);
    std::vector<std::uint8_t> track_used(live.size(), 0);
    for (const auto& pr : pairs) {
      if (det_used[pr.det] || track_used[pr.track_pos]) continue;
      det_used[pr.det] = 1;
      track_used[pr.track_pos] = 1;
      assignment[pr.det] = live[pr.track_pos].id;
    }

    for (const std::size_t d : eligible) {
      int id = assignment[d];
      if (id < 0) {
        if (dets[d].conf < cfg.track_thresh) continue;
        id = new_track(dets[d], t);
        assignment[d] = id;
      }
      auto& tr = tracklets[static_cast<std::size_t>(id)];
      tr.presence[static_cast<std::size_t>(t)] = 1;
      tr.slots[static_cast<std::size_t>(t)] =
          TrackSlot{dets[d].visual, dets[d].semantic, dets[d].conf};
      for (auto& lt : live)
        if (lt.id == id) {
          lt.visual = dets[d].visual;
          lt.semantic = dets[d].semantic;
          lt.last_seen = t;
          break;
        }
    }
  }
  return result;
}

std::vector<RelationshipTracklet> track_relations(const DetectionSequence& seq,
                                                  const ObjectTrackingResult& objects,
                                                  const TrackerConfig& cfg,
                                                  std::size_t* dangling_count) {
  cfg.validate();
  const std::int64_t L = seq.timebase.num_frames;
  std::size_t dangling = 0;

  // Keyed per (subject track, object track, predicate): the same pair under a
  // different predicate is a distinct tracklet.
  std::map<std::tuple<int, int, std::string>, std::size_t> index;
  std::vector<RelationshipTracklet> tracklets;

  for (std::int64_t t = 0; t < L; ++t) {
    const auto& frame = seq.frames[static_cast<std::size_t>(t)];
    const auto& assignment = objects.det_to_track[static_cast<std::size_t>(t)];
    for (const auto& rel : frame.relations) {
      if (rel.conf < cfg.rel_conf_thresh) continue;
      const int sub_track = assignment[static_cast<std::size_t>(rel.subject_idx)];
      const int obj_track = assignment[static_cast<std::size_t>(rel.object_idx)];
      if (sub_track < 0 || obj_track < 0) {
        ++dangling;
        continue;
      }
      const auto key = std::make_tuple(sub_track, obj_track, rel.predicate);
      auto it = index.find(key);
      if (it == index.end()) {
        RelationshipTracklet tr;
        tr.subject_track = sub_track;
        tr.object_track = obj_track;
        tr.predicate = rel.predicate;
        tr.presence.assign(static_cast<std::size_t>(L), 0);
        tr.slots.resize(static_cast<std::size_t>(L));
        it = index.emplace(key, tracklets.size()).first;
        tracklets.push_back(std::move(tr));
      }
      auto& tr = tracklets[it->second];
      tr.presence[static_cast<std::size_t>(t)] = 1;
      tr.slots[static_cast<std::size_t>(t)] = TrackSlot{rel.visual, rel.semantic, rel.conf};
    }
  }
  if (dangling > 0)
    TMR_LOG_DEBUG("track_relations skipped " + std::to_string(dangling) +
                  " relations with dropped endpoints");
  if (dangling_count) *dangling_count = dangling;
  return tracklets;
}

TrackletBundle build_bundle(std::vector<ObjectTracklet> objects,
                            std::vector<RelationshipTracklet> relations, std::int64_t L,
                            std::int64_t feat_dim) {
  TrackletBundle bundle;
  bundle.L = L;
  bundle.feat_dim = feat_dim;
  const std::int64_t n = static_cast<std::int64_t>(objects.size() + relations.size());
  bundle.features = ad::Tensor<float>::zeros({n, L, feat_dim});

  auto fill = [&](std::int64_t row, const std::vector<std::uint8_t>& presence,
                  const std::vector<TrackSlot>& slots) {
    for (std::int64_t t = 0; t < L; ++t) {
      if (!presence[static_cast<std::size_t>(t)]) continue;
      const auto& slot = slots[static_cast<std::size_t>(t)];
      if (static_cast<std::int64_t>(slot.visual.size() + slot.semantic.size()) != feat_dim)
        throw DimMismatch("bundle: slot feature dims disagree with feat_dim");
      float* dst = bundle.features.data.data() +
                   static_cast<std::size_t>((row * L + t) * feat_dim);
      std::copy(slot.visual.begin(), slot.visual.end(), dst);
      std::copy(slot.semantic.begin(), slot.semantic.end(), dst + slot.visual.size());
    }
  };

  for (std::size_t i = 0; i < objects.size(); ++i)
    fill(static_cast<std::int64_t>(i), objects[i].presence, objects[i].slots);
  for (std::size_t j = 0; j < relations.size(); ++j)
    fill(static_cast<std::int64_t>(objects.size() + j), relations[j].presence,
         relations[j].slots);

  // track_id -> dense object row (ids are dense for fresh tracking output, but
  // bundles may be built from filtered lists).
  std::map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < objects.size(); ++i) row_of[objects[i].track_id] = i;
  bundle.adjacency.assign(objects.size() * relations.size(), 0);
  for (std::size_t j = 0; j < relations.size(); ++j) {
    const auto s = row_of.find(relations[j].subject_track);
    const auto o = row_of.find(relations[j].object_track);
    if (s == row_of.end() || o == row_of.end())
      throw DimMismatch("bundle: relation endpoint track missing from object list");
    bundle.adjacency[s->second * relations.size() + j] = 1;
    bundle.adjacency[o->second * relations.size() + j] = 1;
  }

  bundle.objects = std::move(objects);
  bundle.relations = std::move(relations);
  return bundle;
}

TrackletBundle track_video(const DetectionSequence& seq, const TrackerConfig& cfg) {
  ObjectTrackingResult objects = track_objects(seq, cfg);
  std::vector<RelationshipTracklet> relations = track_relations(seq, objects, cfg);
  return build_bundle(std::move(objects.tracklets), std::move(relations),
                      seq.timebase.num_frames, seq.d_v + seq.d_s);
}

double association_accuracy(const DetectionSequence& seq, const ObjectTrackingResult& result) {
  // overlap[hint][track] = detections carrying that hint assigned to that track
  std::map<int, std::map<int, std::int64_t>> overlap;
  std::int64_t total = 0;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto& dets = seq.frames[t].objects;
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (dets[d].track_hint < 0) continue;
      ++total;
      const int track = result.det_to_track[t][d];
      if (track >= 0) ++overlap[dets[d].track_hint][track];
    }
  }
  if (total == 0) return 1.0;

  struct Entry {
    std::int64_t count;
    int hint, track;
  };
  std::vector<Entry> entries;
  for (const auto& [hint, row] : overlap)
    for (const auto& [track, count] : row) entries.push_back({count, hint, track});
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count > b.count;
    if (a.hint != b.hint) return a.hint < b.hint;
    return a.track < b.track;
  });

  std::map<int, bool> hint_used, track_used;
  std::int64_t matched = 0;
  for (const auto& e : entries) {
    if (hint_used[e.hint] || track_used[e.track]) continue;
    hint_used[e.hint] = true;
    track_used[e.track] = true;
    matched += e.count;
  }
  return static_cast<double>(matched) / static_cast<double>(total);
}

}  // namespace tmr

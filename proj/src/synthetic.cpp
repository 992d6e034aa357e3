#include "trackletmr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "trackletmr/errors.hpp"
#include "trackletmr/rng.hpp"
#include "trackletmr/word_embedding.hpp"

namespace tmr {

namespace {

// Fraction of visual-feature energy carried by the state sign. Sized so a
// state flip keeps the matcher's mean cosine comfortably above match_thresh
// (visual cosine across a flip is 1 - 2*kStateEnergy).
constexpr double kStateEnergy = 0.05;

constexpr double kSingleQueryProb = 0.2;
constexpr int kGtMinFrames = 4;
constexpr int kGtMaxFrames = 32;
constexpr int kSingleGtFrames = 8;

void add_noise(std::vector<float>& v, Rng& rng, double sigma_norm) {
  if (sigma_norm <= 0.0) return;
  const double per_coord = sigma_norm / std::sqrt(static_cast<double>(v.size()));
  for (auto& x : v) x += static_cast<float>(rng.normal(0.0, per_coord));
}

}  // namespace

const std::vector<std::string>& synthetic_object_classes() {
  static const std::vector<std::string> classes{
      "person", "laptop", "book",   "chair",  "cup",    "door",   "phone",
      "bag",    "table",  "window", "box",    "ball",   "bottle", "plant",
      "shirt",  "shoe",   "pillow", "towel",  "remote", "lamp"};
  return classes;
}

const std::vector<std::string>& synthetic_predicates() {
  static const std::vector<std::string> predicates{
      "opens",   "holds",   "sits_on",  "closes",    "picks_up",  "puts_down",
      "touches", "lifts",   "pushes",   "pulls",     "wears",     "removes",
      "reads",   "throws",  "catches",  "carries",   "drops",     "turns_on",
      "turns_off", "covers"};
  return predicates;
}

void SyntheticConfig::validate() const {
  if (num_videos < 1 || L < 1 || max_objects < 1)
    throw ConfigError("synthetic: counts must be >= 1");
  if (d_v < 1 || d_s < 1 || d_f < 1) throw ConfigError("synthetic: feature dims must be >= 1");
  if (state_subspace_dim < 1 || state_subspace_dim >= d_v)
    throw ConfigError("synthetic: state_subspace_dim must be in [1, d_v)");
  if (max_objects > state_subspace_dim)
    throw ConfigError("synthetic: max_objects must not exceed state_subspace_dim");
  if (max_objects > static_cast<int>(synthetic_object_classes().size()))
    throw ConfigError("synthetic: max_objects exceeds the class vocabulary");
  if (noise_sigma < 0.0) throw ConfigError("synthetic: noise_sigma must be >= 0");
  if (relation_active_prob < 0.0 || relation_active_prob > 1.0)
    throw ConfigError("synthetic: relation_active_prob must be in [0,1]");
  if (d_f != d_v) throw ConfigError("synthetic: d_f must equal d_v (frame feats average object visuals)");
  if (fps <= 0.0) throw ConfigError("synthetic: fps must be positive");
  if (L < kSingleGtFrames) throw ConfigError("synthetic: L too short for a ground-truth moment");
}

std::vector<SyntheticExample> generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto& classes = synthetic_object_classes();
  const auto& predicates = synthetic_predicates();
  const Rng root(cfg.seed);

  std::vector<SyntheticExample> out;
  out.reserve(static_cast<std::size_t>(cfg.num_videos));

  for (int vid = 0; vid < cfg.num_videos; ++vid) {
    Rng rng = root.fork(static_cast<std::uint64_t>(vid));
    SyntheticExample ex;
    {
      char buf[32];
      std::snprintf(buf, sizeof buf, "vid_%06d", vid);
      ex.video_id = buf;
    }

    const int num_objects =
        cfg.max_objects == 1
            ? 1
            : static_cast<int>(rng.uniform_int(2, cfg.max_objects));

    // Distinct classes per video keep class-gated tracking unambiguous.
    std::vector<int> class_pool(classes.size());
    std::iota(class_pool.begin(), class_pool.end(), 0);
    rng.shuffle(class_pool.begin(), class_pool.end());
    std::vector<std::string> obj_class(static_cast<std::size_t>(num_objects));
    for (int k = 0; k < num_objects; ++k)
      obj_class[static_cast<std::size_t>(k)] = classes[static_cast<std::size_t>(class_pool[static_cast<std::size_t>(k)])];

    // Static boxes.
    std::vector<std::array<float, 4>> boxes(static_cast<std::size_t>(num_objects));
    for (auto& box : boxes) {
      const double cx = rng.uniform(0.2, 0.8);
      const double cy = rng.uniform(0.2, 0.8);
      const double w = rng.uniform(0.1, 0.3);
      const double h = rng.uniform(0.1, 0.3);
      box = {static_cast<float>(cx - w / 2), static_cast<float>(cy - h / 2),
             static_cast<float>(cx + w / 2), static_cast<float>(cy + h / 2)};
    }

    const bool single_query = rng.uniform() < kSingleQueryProb || num_objects < 2;
    const int query_pred = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(predicates.size()) - 1));

    // Distractor relations between non-query pairs (random direction).
    struct Edge {
      int subject, object;
      std::string predicate;
    };
    std::vector<Edge> edges;
    if (!single_query)
      edges.push_back({0, 1, predicates[static_cast<std::size_t>(query_pred)]});
    for (int i = 0; i < num_objects; ++i)
      for (int j = i + 1; j < num_objects; ++j) {
        if (!single_query && i == 0 && j == 1) continue;
        if (rng.uniform() < cfg.relation_active_prob) {
          const bool forward = rng.uniform() < 0.5;
          const int p = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(predicates.size()) - 1));
          edges.push_back({forward ? i : j, forward ? j : i, predicates[static_cast<std::size_t>(p)]});
        }
      }

    // Flip frames. Query objects flip at the ground-truth endpoints.
    std::vector<int> flip(static_cast<std::size_t>(num_objects));
    int gt_begin = 0, gt_end = 0;  // frames
    if (single_query) {
      const int half = kSingleGtFrames / 2;
      const int f0 = static_cast<int>(rng.uniform_int(half, cfg.L - half));
      flip[0] = f0;
      gt_begin = f0 - half;
      gt_end = f0 + half;
      for (int k = 1; k < num_objects; ++k)
        flip[static_cast<std::size_t>(k)] = static_cast<int>(rng.uniform_int(1, cfg.L - 1));
    } else {
      const int max_len = std::min(kGtMaxFrames, cfg.L - 2);
      const int len = static_cast<int>(rng.uniform_int(kGtMinFrames, max_len));
      const int fa = static_cast<int>(rng.uniform_int(1, cfg.L - 1 - len));
      flip[0] = fa;
      flip[1] = fa + len;
      gt_begin = fa;
      gt_end = fa + len;
      for (int k = 2; k < num_objects; ++k)
        flip[static_cast<std::size_t>(k)] = static_cast<int>(rng.uniform_int(1, cfg.L - 1));
    }

    ex.query = single_query
                   ? obj_class[0]
                   : obj_class[0] + " " + predicates[static_cast<std::size_t>(query_pred)] + " " + obj_class[1];
    ex.gt.push_back(Moment{gt_begin / cfg.fps, gt_end / cfg.fps});

    // Clean per-object feature parts.
    const double beta = std::sqrt(kStateEnergy);
    const double gamma = std::sqrt(1.0 - kStateEnergy);
    const int class_dim = cfg.d_v - cfg.state_subspace_dim;
    std::vector<std::vector<float>> class_vis(static_cast<std::size_t>(num_objects));
    std::vector<std::vector<float>> class_sem(static_cast<std::size_t>(num_objects));
    for (int k = 0; k < num_objects; ++k) {
      class_vis[static_cast<std::size_t>(k)] = token_embedding(obj_class[static_cast<std::size_t>(k)] + ":vis", class_dim);
      class_sem[static_cast<std::size_t>(k)] = token_embedding(obj_class[static_cast<std::size_t>(k)], cfg.d_s);
    }
    std::vector<std::vector<float>> pred_vis, pred_sem;
    for (const auto& e : edges) {
      pred_vis.push_back(token_embedding(e.predicate + ":vis", cfg.d_v));
      pred_sem.push_back(token_embedding(e.predicate, cfg.d_s));
    }

    ex.seq.timebase = TimeBase{cfg.fps, cfg.L};
    ex.seq.d_v = cfg.d_v;
    ex.seq.d_s = cfg.d_s;
    ex.seq.frames.resize(static_cast<std::size_t>(cfg.L));
    ex.frame_feats.assign(static_cast<std::size_t>(cfg.L) * static_cast<std::size_t>(cfg.d_f), 0.0f);

    for (int t = 0; t < cfg.L; ++t) {
      FrameDetections& frame = ex.seq.frames[static_cast<std::size_t>(t)];
      for (int k = 0; k < num_objects; ++k) {
        ObjectDetection det;
        det.cls = obj_class[static_cast<std::size_t>(k)];
        det.track_hint = k;
        det.box = boxes[static_cast<std::size_t>(k)];
        det.conf = static_cast<float>(rng.uniform(0.5, 1.0));
        const double sign = t >= flip[static_cast<std::size_t>(k)] ? -1.0 : 1.0;
        det.visual.assign(static_cast<std::size_t>(cfg.d_v), 0.0f);
        det.visual[static_cast<std::size_t>(k)] = static_cast<float>(sign * beta);
        for (int d = 0; d < class_dim; ++d)
          det.visual[static_cast<std::size_t>(cfg.state_subspace_dim + d)] =
              static_cast<float>(gamma) * class_vis[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)];
        add_noise(det.visual, rng, cfg.noise_sigma);
        det.semantic = class_sem[static_cast<std::size_t>(k)];
        frame.objects.push_back(std::move(det));
      }
      for (std::size_t e = 0; e < edges.size(); ++e) {
        RelationshipDetection rel;
        rel.subject_idx = edges[e].subject;
        rel.object_idx = edges[e].object;
        rel.predicate = edges[e].predicate;
        rel.conf = static_cast<float>(rng.uniform(0.5, 1.0));
        rel.visual = pred_vis[e];
        add_noise(rel.visual, rng, cfg.noise_sigma);
        rel.semantic = pred_sem[e];
        frame.relations.push_back(std::move(rel));
      }

      float* ff = ex.frame_feats.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(cfg.d_f);
      for (const auto& det : frame.objects)
        for (int d = 0; d < cfg.d_f; ++d) ff[d] += det.visual[static_cast<std::size_t>(d)];
      for (int d = 0; d < cfg.d_f; ++d) ff[d] /= static_cast<float>(num_objects);
      std::vector<float> noise(static_cast<std::size_t>(cfg.d_f), 0.0f);
      add_noise(noise, rng, cfg.noise_sigma);
      for (int d = 0; d < cfg.d_f; ++d) ff[d] += noise[static_cast<std::size_t>(d)];
    }

    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace tmr

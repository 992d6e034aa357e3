#include "trackletmr/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "trackletmr/errors.hpp"

namespace tmr {

using nlohmann::json;

void SoftNmsConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("soft_nms: sigma must be > 0");
  if (!(score_floor >= 0.0)) throw ConfigError("soft_nms: score_floor must be >= 0");
  if (top_n < 1) throw ConfigError("soft_nms: top_n must be >= 1");
}

std::vector<Candidate> decode(const std::vector<ad::Tensor<float>>& scores,
                              const std::vector<ad::Tensor<float>>& offsets,
                              const TimeBase& timebase, int top_n) {
  if (!timebase.valid()) throw ConfigError("decode: invalid timebase");
  if (top_n < 1) throw ConfigError("decode: top_n must be >= 1");
  if (scores.size() != offsets.size())
    throw ShapeError("decode: score and offset pyramids have different depths");

  const double duration = timebase.duration();
  std::vector<Candidate> out;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const auto& s = scores[k];
    const auto& o = offsets[k];
    if (s.rank() != 1) throw ShapeError("decode: level scores must be rank 1");
    const std::int64_t Lk = s.shape[0];
    if (o.shape != ad::Shape{Lk, 2})
      throw ShapeError("decode: level offsets must be [len, 2]");

    for (std::int64_t t = 0; t < Lk; ++t) {
      const double d_s = static_cast<double>(o.at({t, 0}));
      const double d_e = static_cast<double>(o.at({t, 1}));
      Moment m = decode_offsets(static_cast<int>(k), t, timebase.fps, d_s, d_e);
      m.start = std::clamp(m.start, 0.0, duration);
      m.end = std::clamp(m.end, 0.0, duration);
      if (m.end <= m.start) continue;
      out.push_back(Candidate{m, static_cast<double>(s.data[static_cast<std::size_t>(t)]),
                              static_cast<int>(k), t});
    }
  }

  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.moment.start != b.moment.start) return a.moment.start < b.moment.start;
    if (a.level != b.level) return a.level < b.level;
    return a.anchor < b.anchor;
  });
  if (static_cast<int>(out.size()) > top_n) out.resize(static_cast<std::size_t>(top_n));
  return out;
}

std::vector<Candidate> soft_nms(std::vector<Candidate> candidates, const SoftNmsConfig& cfg) {
  cfg.validate();

  struct Item {
    Candidate c;
    std::size_t orig;
  };
  std::vector<Item> alive;
  alive.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i].score >= cfg.score_floor) alive.push_back(Item{candidates[i], i});

  // Higher score wins; ties go to the earlier start, then the original index.
  auto before = [](const Item& a, const Item& b) {
    if (a.c.score != b.c.score) return a.c.score > b.c.score;
    if (a.c.moment.start != b.c.moment.start) return a.c.moment.start < b.c.moment.start;
    return a.orig < b.orig;
  };

  std::vector<Item> selected;
  selected.reserve(alive.size());
  while (!alive.empty()) {
    const auto best = std::min_element(alive.begin(), alive.end(),
                                       [&](const Item& a, const Item& b) { return before(a, b); });
    const Item picked = *best;
    alive.erase(best);
    selected.push_back(picked);

    std::vector<Item> kept;
    kept.reserve(alive.size());
    for (Item& it : alive) {
      const double iou = temporal_iou(picked.c.moment, it.c.moment);
      it.c.score *= std::exp(-(iou * iou) / cfg.sigma);
      if (it.c.score >= cfg.score_floor) kept.push_back(std::move(it));
    }
    alive = std::move(kept);
  }

  std::sort(selected.begin(), selected.end(), before);
  std::vector<Candidate> out;
  out.reserve(selected.size());
  for (const Item& it : selected) out.push_back(it.c);
  return out;
}

namespace {

// True iff ranked prediction `i` can join the matching, re-routing earlier
// predictions to alternate ground truths when needed (augmenting path).
bool try_match(std::size_t i, const std::vector<std::vector<char>>& ok,
               std::vector<int>& gt_owner, std::vector<char>& visited) {
  for (std::size_t g = 0; g < gt_owner.size(); ++g) {
    if (!ok[i][g] || visited[g]) continue;
    visited[g] = 1;
    if (gt_owner[g] < 0 ||
        try_match(static_cast<std::size_t>(gt_owner[g]), ok, gt_owner, visited)) {
      gt_owner[g] = static_cast<int>(i);
      return true;
    }
  }
  return false;
}

double average_precision(const std::vector<Moment>& preds, const std::vector<Moment>& gts,
                         double threshold) {
  const std::size_t n = preds.size();
  const std::size_t num_gts = gts.size();
  if (n == 0) return 0.0;

  std::vector<std::vector<char>> ok(n, std::vector<char>(num_gts, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < num_gts; ++g)
      ok[i][g] = temporal_iou(preds[i], gts[g]) >= threshold ? 1 : 0;

  std::vector<int> gt_owner(num_gts, -1);
  std::vector<char> tp(n, 0);
  std::vector<char> visited(num_gts, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(visited.begin(), visited.end(), 0);
    tp[i] = try_match(i, ok, gt_owner, visited) ? 1 : 0;
  }

  // Interpolated precision: each true positive counts the best precision seen
  // at or after its rank.
  std::vector<std::size_t> tp_at(n, 0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    count += tp[i] ? 1 : 0;
    tp_at[i] = count;
  }
  double best = 0.0, sum = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double prec = static_cast<double>(tp_at[i]) / static_cast<double>(i + 1);
    best = std::max(best, prec);
    if (tp[i]) sum += best;
  }
  return sum / static_cast<double>(num_gts);
}

}  // namespace

EvalReport evaluate(const std::vector<QueryResult>& queries) {
  if (queries.empty()) throw ConfigError("evaluate: no queries");
  for (const auto& q : queries) {
    if (q.gts.empty()) throw ConfigError("evaluate: query without ground truth");
    for (const auto& g : q.gts)
      if (!g.valid()) throw ConfigError("evaluate: invalid ground-truth moment");
  }

  EvalReport report;
  report.num_queries = static_cast<std::int64_t>(queries.size());
  const double nq = static_cast<double>(queries.size());

  for (const auto& q : queries) {
    double top1 = 0.0;
    if (!q.predictions.empty())
      for (const auto& g : q.gts) top1 = std::max(top1, temporal_iou(q.predictions[0], g));
    report.miou += top1 / nq;
    for (std::size_t r = 0; r < kRecallThresholds.size(); ++r)
      if (top1 >= kRecallThresholds[r]) report.r1[r] += 1.0 / nq;
    for (std::size_t a = 0; a < kApThresholds.size(); ++a)
      report.ap[a] += average_precision(q.predictions, q.gts, kApThresholds[a]) / nq;
  }

  for (const double ap : report.ap) report.map += ap / static_cast<double>(report.ap.size());
  return report;
}

std::vector<ScoredMoment> scored_moments(const std::vector<Candidate>& candidates) {
  std::vector<ScoredMoment> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(ScoredMoment{c.moment, c.score});
  return out;
}

void write_predictions(const std::vector<PredictionRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& r : records) {
    json moments = json::array();
    for (const auto& m : r.moments)
      moments.push_back(json::array({m.moment.start, m.moment.end, m.score}));
    const json line{{"video_id", r.video_id}, {"query_idx", r.query_idx},
                    {"moments", std::move(moments)}};
    out << line.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::vector<PredictionRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError("predictions line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      PredictionRecord r;
      r.video_id = j.at("video_id").get<std::string>();
      r.query_idx = j.at("query_idx").get<int>();
      for (const auto& m : j.at("moments")) {
        if (!m.is_array() || m.size() != 3)
          throw FormatError("moments entries must be [start, end, score]");
        r.moments.push_back(
            ScoredMoment{Moment{m[0].get<double>(), m[1].get<double>()}, m[2].get<double>()});
      }
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError("predictions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

namespace {

std::string threshold_key(double t, const char* fmt) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), fmt, t);
  return buf;
}

}  // namespace

std::string report_json(const EvalReport& report) {
  json r1, ap;
  for (std::size_t i = 0; i < kRecallThresholds.size(); ++i)
    r1[threshold_key(kRecallThresholds[i], "%.1f")] = report.r1[i];
  for (std::size_t i = 0; i < kApThresholds.size(); ++i)
    ap[threshold_key(kApThresholds[i], "%.2f")] = report.ap[i];
  const json j{{"num_queries", report.num_queries},
               {"r1", std::move(r1)},
               {"miou", report.miou},
               {"ap", std::move(ap)},
               {"map", report.map}};
  return j.dump(1) + "\n";
}

std::string report_table(const EvalReport& report) {
  std::ostringstream os;
  char buf[64];
  auto row = [&](const std::string& name, double value) {
    std::snprintf(buf, sizeof(buf), "%-10s %8.4f\n", name.c_str(), value);
    os << buf;
  };
  os << "metric        value\n";
  os << "------------------\n";
  for (std::size_t i = 0; i < kRecallThresholds.size(); ++i)
    row("R1@" + threshold_key(kRecallThresholds[i], "%.1f"), report.r1[i]);
  row("mIoU", report.miou);
  for (std::size_t i = 0; i < kApThresholds.size(); ++i)
    row("mAP@" + threshold_key(kApThresholds[i], "%.2f"), report.ap[i]);
  row("mAP", report.map);
  std::snprintf(buf, sizeof(buf), "%-10s %8lld\n", "queries",
                static_cast<long long>(report.num_queries));
  os << buf;
  return os.str();
}

}  // namespace tmr

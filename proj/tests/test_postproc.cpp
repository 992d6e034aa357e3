#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "trackletmr/postproc.hpp"
#include "trackletmr/rng.hpp"

using namespace tmr;

namespace {

Candidate cand(double s, double e, double score, int level = 0, std::int64_t anchor = 0) {
  return Candidate{Moment{s, e}, score, level, anchor};
}

std::vector<Moment> moments_of(const std::vector<Candidate>& cs) {
  std::vector<Moment> out;
  for (const auto& c : cs) out.push_back(c.moment);
  return out;
}

// Random scored moments inside [0, span]; scores in (floor, 1].
std::vector<Candidate> random_cands(Rng& rng, int n, double span) {
  std::vector<Candidate> out;
  for (int i = 0; i < n; ++i) {
    const double a = rng.uniform(0.0, span);
    const double len = rng.uniform(0.1, span / 2);
    out.push_back(cand(a, a + len, rng.uniform(0.01, 1.0), 0, i));
  }
  return out;
}

// Hard NMS: keep the best remaining, discard everything overlapping it.
std::vector<Moment> hard_nms_oracle(std::vector<Candidate> cs) {
  std::vector<Moment> kept;
  while (!cs.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < cs.size(); ++i) {
      const bool better = cs[i].score > cs[best].score ||
                          (cs[i].score == cs[best].score &&
                           cs[i].moment.start < cs[best].moment.start);
      if (better) best = i;
    }
    const Moment m = cs[best].moment;
    kept.push_back(m);
    std::vector<Candidate> rest;
    for (std::size_t i = 0; i < cs.size(); ++i)
      if (i != best && temporal_iou(m, cs[i].moment) == 0.0) rest.push_back(cs[i]);
    cs = std::move(rest);
  }
  return kept;
}

// AP oracle: enumerate every injective assignment of predictions to ground
// truths (prediction i may take gt g only when tIoU >= thr), compute the
// interpolated AP of the resulting true-positive set from first principles,
// and return the maximum over assignments.
double ap_from_tp(const std::vector<int>& tp, std::size_t num_gts) {
  const std::size_t n = tp.size();
  double best_ap = 0.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!tp[k]) continue;
    // precision best at any rank >= k+1
    double best_prec = 0.0;
    for (std::size_t j = k; j < n; ++j) {
      int count = 0;
      for (std::size_t t = 0; t <= j; ++t) count += tp[t];
      const double prec = static_cast<double>(count) / static_cast<double>(j + 1);
      best_prec = std::max(best_prec, prec);
    }
    sum += best_prec;
  }
  best_ap = sum / static_cast<double>(num_gts);
  return best_ap;
}

void enumerate_assignments(std::size_t i, const std::vector<Moment>& preds,
                           const std::vector<Moment>& gts, double thr,
                           std::vector<int>& taken, std::vector<int>& tp, double& best) {
  if (i == preds.size()) {
    best = std::max(best, ap_from_tp(tp, gts.size()));
    return;
  }
  tp[i] = 0;  // prediction i left unmatched
  enumerate_assignments(i + 1, preds, gts, thr, taken, tp, best);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (taken[g] || temporal_iou(preds[i], gts[g]) < thr) continue;
    taken[g] = 1;
    tp[i] = 1;
    enumerate_assignments(i + 1, preds, gts, thr, taken, tp, best);
    taken[g] = 0;
    tp[i] = 0;
  }
}

double ap_oracle(const std::vector<Moment>& preds, const std::vector<Moment>& gts, double thr) {
  if (preds.empty()) return 0.0;
  std::vector<int> taken(gts.size(), 0), tp(preds.size(), 0);
  double best = 0.0;
  enumerate_assignments(0, preds, gts, thr, taken, tp, best);
  return best;
}

}  // namespace

TEST_CASE("decode applies the grid offset and offset scaling") {
  // Anchor 10 at level 0, fps 1: center 10.5; d_s=2, d_e=3 -> [8.5, 13.5].
  auto scores = ad::Tensor<float>::zeros({16});
  auto offsets = ad::Tensor<float>::zeros({16, 2});
  scores.at({10}) = 0.9f;
  offsets.at({10, 0}) = 2.0f;
  offsets.at({10, 1}) = 3.0f;
  const TimeBase tb{1.0, 16};

  const auto cands = decode({scores}, {offsets}, tb);
  REQUIRE(!cands.empty());
  const Candidate& top = cands[0];
  CHECK(top.level == 0);
  CHECK(top.anchor == 10);
  CHECK(top.moment.start == doctest::Approx(8.5).epsilon(1e-12));
  CHECK(top.moment.end == doctest::Approx(13.5).epsilon(1e-12));
  CHECK(top.score == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("decode drops degenerate moments and clamps to the video") {
  auto scores = ad::Tensor<float>::full({4}, 0.5f);
  auto offsets = ad::Tensor<float>::zeros({4, 2});
  // anchor 0: zero length (dropped); anchor 3: end spills past the video
  offsets.at({3, 0}) = 1.0f;
  offsets.at({3, 1}) = 100.0f;
  const TimeBase tb{2.0, 4};  // duration 2 s

  const auto cands = decode({scores}, {offsets}, tb);
  REQUIRE(cands.size() == 1);
  CHECK(cands[0].anchor == 3);
  CHECK(cands[0].moment.end == doctest::Approx(tb.duration()).epsilon(1e-12));
  CHECK(cands[0].moment.start == doctest::Approx((3 + 0.5) / 2.0 - 0.5).epsilon(1e-12));
}

TEST_CASE("decode decodes strides per level and sorts by score") {
  // Two levels: lengths 4 and 2. Level 1 anchor 1 has stride 2.
  auto s0 = ad::Tensor<float>::full({4}, 0.2f);
  auto o0 = ad::Tensor<float>::full({4, 2}, 0.25f);
  auto s1 = ad::Tensor<float>::full({2}, 0.8f);
  auto o1 = ad::Tensor<float>::full({2, 2}, 0.25f);
  const TimeBase tb{1.0, 4};

  const auto cands = decode({s0, s1}, {o0, o1}, tb);
  REQUIRE(cands.size() == 6);
  // Level-1 candidates come first (higher score), earlier start first.
  CHECK(cands[0].level == 1);
  CHECK(cands[1].level == 1);
  CHECK(cands[0].moment.start < cands[1].moment.start);
  // Level 1, anchor 1: center (1+0.5)*2 = 3.0, d_s = d_e = 0.25 in stride
  // units of 2 frames -> [2.5, 3.5].
  CHECK(cands[1].anchor == 1);
  CHECK(cands[1].moment.start == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(cands[1].moment.end == doctest::Approx(3.5).epsilon(1e-12));
  for (std::size_t i = 1; i < cands.size(); ++i) CHECK(cands[i - 1].score >= cands[i].score);
}

TEST_CASE("decode truncates to top_n and validates inputs") {
  auto scores = ad::Tensor<float>::full({8}, 0.5f);
  auto offsets = ad::Tensor<float>::full({8, 2}, 1.0f);
  const TimeBase tb{1.0, 8};
  CHECK(decode({scores}, {offsets}, tb, 3).size() == 3);

  CHECK_THROWS_AS(decode({scores}, {offsets}, tb, 0), ConfigError);
  CHECK_THROWS_AS(decode({scores}, {offsets}, TimeBase{0.0, 8}), ConfigError);
  CHECK_THROWS_AS(decode({scores}, {}, tb), ShapeError);
  auto bad = ad::Tensor<float>::full({8, 3}, 1.0f);
  CHECK_THROWS_AS(decode({scores}, {bad}, tb), ShapeError);
}

TEST_CASE("soft_nms worked example: overlap 0.5 decays the runner-up") {
  // [0,3] vs [1,4]: intersection 2, union 4 -> tIoU exactly 0.5.
  std::vector<Candidate> cs{cand(0, 3, 0.9), cand(1, 4, 0.8)};
  const auto out = soft_nms(cs, SoftNmsConfig{});
  REQUIRE(out.size() == 2);
  CHECK(out[0].score == 0.9);
  CHECK(out[1].score == doctest::Approx(0.8 * std::exp(-0.5)).epsilon(1e-15));
  CHECK(out[1].score == doctest::Approx(0.4852).epsilon(1e-4));
}

TEST_CASE("soft_nms leaves singletons and disjoint sets unchanged") {
  const auto one = soft_nms({cand(0, 1, 0.7)}, SoftNmsConfig{});
  REQUIRE(one.size() == 1);
  CHECK(one[0].score == 0.7);

  std::vector<Candidate> disjoint{cand(0, 1, 0.6), cand(2, 3, 0.5), cand(5, 9, 0.4)};
  const auto out = soft_nms(disjoint, SoftNmsConfig{});
  REQUIRE(out.size() == 3);
  CHECK(out[0].score == 0.6);
  CHECK(out[1].score == 0.5);
  CHECK(out[2].score == 0.4);
}

TEST_CASE("soft_nms never raises a score and keeps the argmax first") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const auto cs = random_cands(rng, 12, 20.0);
    double best = 0.0;
    for (const auto& c : cs) best = std::max(best, c.score);
    const auto out = soft_nms(cs, SoftNmsConfig{});
    REQUIRE(!out.empty());
    CHECK(out[0].score == best);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto orig = std::find_if(cs.begin(), cs.end(), [&](const Candidate& c) {
        return c.moment.start == out[i].moment.start && c.moment.end == out[i].moment.end;
      });
      REQUIRE(orig != cs.end());
      CHECK(out[i].score <= orig->score + 1e-15);
      if (i) CHECK(out[i - 1].score >= out[i].score);
    }
  }
}

TEST_CASE("soft_nms at sigma -> 0 degenerates to hard NMS") {
  Rng rng(32);
  SoftNmsConfig cfg;
  cfg.sigma = 1e-9;
  // Quarter-frame grid keeps every positive overlap far from zero, so the
  // tiny sigma always decays overlapping scores below the floor.
  auto grid_cands = [](Rng& r, int n, double span) {
    std::vector<Candidate> out;
    for (int i = 0; i < n; ++i) {
      const double a = 0.25 * std::floor(r.uniform(0.0, span) * 4.0);
      const double len = 0.25 * (1.0 + std::floor(r.uniform(0.0, span / 2) * 4.0));
      out.push_back(cand(a, a + len, r.uniform(0.01, 1.0), 0, i));
    }
    return out;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const auto cs = grid_cands(rng, 10, 12.0);
    const auto want = hard_nms_oracle(cs);
    const auto got = moments_of(soft_nms(cs, cfg));
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].start == want[i].start);
      CHECK(got[i].end == want[i].end);
    }
  }
}

TEST_CASE("soft_nms drops rescored candidates below the floor") {
  SoftNmsConfig cfg;
  cfg.score_floor = 0.5;
  // Runner-up decays to 0.8 * exp(-0.5) ~= 0.485 < 0.5 -> dropped.
  const auto out = soft_nms({cand(0, 3, 0.9), cand(1, 4, 0.8)}, cfg);
  REQUIRE(out.size() == 1);
  CHECK(out[0].score == 0.9);
}

TEST_CASE("soft_nms breaks score ties by earlier start then input order") {
  std::vector<Candidate> cs{cand(5, 6, 0.5), cand(1, 2, 0.5), cand(3, 4, 0.5)};
  const auto out = soft_nms(cs, SoftNmsConfig{});
  REQUIRE(out.size() == 3);
  CHECK(out[0].moment.start == 1.0);
  CHECK(out[1].moment.start == 3.0);
  CHECK(out[2].moment.start == 5.0);

  CHECK_THROWS_AS(soft_nms({}, SoftNmsConfig{0.0, 1e-3, 100}), ConfigError);
  CHECK_THROWS_AS(soft_nms({}, SoftNmsConfig{0.5, 1e-3, 0}), ConfigError);
}

TEST_CASE("evaluate: perfect predictions score 1.0 everywhere") {
  std::vector<QueryResult> qs;
  qs.push_back({{Moment{0, 5}}, {Moment{0, 5}}});
  qs.push_back({{Moment{2, 9}, Moment{20, 30}}, {Moment{2, 9}, Moment{20, 30}}});
  const auto r = evaluate(qs);
  for (const double v : r.r1) CHECK(v == 1.0);
  CHECK(r.miou == 1.0);
  for (const double v : r.ap) CHECK(v == 1.0);
  CHECK(r.map == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.num_queries == 2);
}

TEST_CASE("evaluate: single query with top-1 tIoU 0.6") {
  // [0,6] vs [0,10]: tIoU = 6/10 = 0.6 exactly.
  const auto r = evaluate({{{Moment{0, 6}}, {Moment{0, 10}}}});
  CHECK(r.r1[0] == 1.0);  // 0.3
  CHECK(r.r1[1] == 1.0);  // 0.5
  CHECK(r.r1[2] == 0.0);  // 0.7
  CHECK(r.miou == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("evaluate: empty prediction lists count as tIoU zero") {
  std::vector<QueryResult> qs;
  qs.push_back({{}, {Moment{0, 5}}});
  qs.push_back({{Moment{0, 5}}, {Moment{0, 5}}});
  const auto r = evaluate(qs);
  CHECK(r.miou == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.r1[1] == doctest::Approx(0.5).epsilon(1e-12));
  for (std::size_t i = 0; i < r.ap.size(); ++i)
    CHECK(r.ap[i] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("evaluate validates inputs") {
  CHECK_THROWS_AS(evaluate({}), ConfigError);
  CHECK_THROWS_AS(evaluate({{{Moment{0, 1}}, {}}}), ConfigError);
  CHECK_THROWS_AS(evaluate({{{Moment{0, 1}}, {Moment{3, 3}}}}), ConfigError);
}

TEST_CASE("evaluate R1 is non-increasing in the threshold") {
  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<QueryResult> qs;
    for (int q = 0; q < 8; ++q) {
      QueryResult qr;
      const double g = rng.uniform(0.0, 20.0);
      qr.gts.push_back(Moment{g, g + rng.uniform(1.0, 8.0)});
      for (int p = 0; p < 3; ++p) {
        const double a = rng.uniform(0.0, 25.0);
        qr.predictions.push_back(Moment{a, a + rng.uniform(0.5, 8.0)});
      }
      qs.push_back(std::move(qr));
    }
    const auto r = evaluate(qs);
    CHECK(r.r1[0] >= r.r1[1]);
    CHECK(r.r1[1] >= r.r1[2]);
  }
}

TEST_CASE("evaluate matching maximizes the match, not first-come overlap") {
  // tIoU(pred0, A) = 9/11, tIoU(pred0, B) = 9/13, tIoU(pred1, A) = 8/10,
  // tIoU(pred1, B) = 6/14 < 0.5. A best-IoU-first pairing at threshold 0.5
  // would burn A on pred0 and leave pred1 unmatched (AP 0.5); the matching
  // must instead pair pred0->B and pred1->A so both are true positives.
  QueryResult qr;
  qr.gts = {Moment{0, 10}, Moment{2, 14}};
  qr.predictions = {Moment{1, 11}, Moment{0, 8}};
  const auto r = evaluate({qr});
  CHECK(r.ap[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.ap[0] == doctest::Approx(ap_oracle(qr.predictions, qr.gts, 0.5)).epsilon(1e-12));
}

TEST_CASE("evaluate AP equals the exhaustive assignment oracle") {
  Rng rng(57);
  for (int trial = 0; trial < 25; ++trial) {
    QueryResult qr;
    const int num_gts = 1 + static_cast<int>(rng.uniform() * 3.0);
    const int num_preds = static_cast<int>(rng.uniform() * 6.0);
    for (int g = 0; g < num_gts; ++g) {
      const double a = rng.uniform(0.0, 15.0);
      qr.gts.push_back(Moment{a, a + rng.uniform(1.0, 6.0)});
    }
    for (int p = 0; p < num_preds; ++p) {
      const double a = rng.uniform(0.0, 18.0);
      qr.predictions.push_back(Moment{a, a + rng.uniform(0.5, 6.0)});
    }
    const auto r = evaluate({qr});
    for (std::size_t i = 0; i < kApThresholds.size(); ++i) {
      const double want = ap_oracle(qr.predictions, qr.gts, kApThresholds[i]);
      CHECK(std::abs(r.ap[i] - want) < 1e-9);
    }
  }
}

TEST_CASE("evaluate three-query toy set matches the oracle end to end") {
  std::vector<QueryResult> qs;
  qs.push_back({{Moment{0, 10}, Moment{20, 30}}, {Moment{0, 10}, Moment{21, 30}}});
  qs.push_back({{Moment{5, 9}}, {Moment{4, 10}, Moment{12, 16}}});
  qs.push_back({{Moment{1, 3}, Moment{2, 6}, Moment{8, 12}}, {Moment{2, 6}}});
  const auto r = evaluate(qs);
  for (std::size_t i = 0; i < kApThresholds.size(); ++i) {
    double want = 0.0;
    for (const auto& q : qs) want += ap_oracle(q.predictions, q.gts, kApThresholds[i]) / 3.0;
    CHECK(std::abs(r.ap[i] - want) < 1e-9);
  }
  double want_map = 0.0;
  for (const double v : r.ap) want_map += v / 10.0;
  CHECK(r.map == doctest::Approx(want_map).epsilon(1e-15));
}

TEST_CASE("predictions JSONL round-trips exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "tmr_postproc_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "preds.jsonl").string();

  std::vector<PredictionRecord> records;
  records.push_back({"vid_000", 0, {{Moment{0.5, 13.25}, 0.875}, {Moment{1.0, 2.0}, 0.125}}});
  records.push_back({"vid_001", 3, {{Moment{0.1234567890123, 7.75}, 0.9990234375}}});
  records.push_back({"vid_002", 1, {}});
  write_predictions(records, path);

  const auto loaded = read_predictions(path);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].video_id == records[i].video_id);
    CHECK(loaded[i].query_idx == records[i].query_idx);
    REQUIRE(loaded[i].moments.size() == records[i].moments.size());
    for (std::size_t m = 0; m < records[i].moments.size(); ++m) {
      CHECK(loaded[i].moments[m].moment.start == records[i].moments[m].moment.start);
      CHECK(loaded[i].moments[m].moment.end == records[i].moments[m].moment.end);
      CHECK(loaded[i].moments[m].score == records[i].moments[m].score);
    }
  }

  SUBCASE("malformed lines are rejected with the line number") {
    std::ofstream bad(path, std::ios::binary);
    bad << R"({"video_id":"v","query_idx":0,"moments":[[1,2,0.5]]})" << "\n";
    bad << "not json\n";
    bad.close();
    CHECK_THROWS_AS(read_predictions(path), FormatError);
  }
  SUBCASE("wrong moment arity is rejected") {
    std::ofstream bad(path, std::ios::binary);
    bad << R"({"video_id":"v","query_idx":0,"moments":[[1,2]]})" << "\n";
    bad.close();
    CHECK_THROWS_AS(read_predictions(path), FormatError);
  }
}

TEST_CASE("report renders as JSON and an aligned table") {
  const auto r = evaluate({{{Moment{0, 6}}, {Moment{0, 10}}}});

  const std::string js = report_json(r);
  const auto parsed = nlohmann::json::parse(js);
  CHECK(parsed.at("num_queries").get<int>() == 1);
  CHECK(parsed.at("miou").get<double>() == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(parsed.at("r1").at("0.5").get<double>() == 1.0);
  CHECK(parsed.at("r1").at("0.7").get<double>() == 0.0);
  CHECK(parsed.at("ap").contains("0.50"));
  CHECK(parsed.at("ap").contains("0.95"));
  CHECK(parsed.at("map").get<double>() == doctest::Approx(r.map).epsilon(1e-15));

  const std::string table = report_table(r);
  CHECK(table.find("R1@0.3") != std::string::npos);
  CHECK(table.find("R1@0.7") != std::string::npos);
  CHECK(table.find("mIoU") != std::string::npos);
  CHECK(table.find("mAP@0.95") != std::string::npos);
  CHECK(table.find("0.6000") != std::string::npos);
}

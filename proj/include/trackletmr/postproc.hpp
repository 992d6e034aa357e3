#pragma once

#include <array>
#include <string>
#include <vector>

#include "trackletmr/core.hpp"
#include "trackletmr/model.hpp"
#include "trackletmr/tensor.hpp"

namespace tmr {

struct SoftNmsConfig {
  double sigma = 0.5;
  double score_floor = 1e-3;
  int top_n = 100;

  void validate() const;
};

// Turns per-level score/offset tensors into scored moment candidates: every
// anchor cell decodes via decode_offsets, gets clamped to [0, duration], and
// zero-or-negative-length moments are dropped. Output is sorted by score
// descending (ties: earlier start, then level, then anchor) and truncated to
// top_n.
std::vector<Candidate> decode(const std::vector<ad::Tensor<float>>& scores,
                              const std::vector<ad::Tensor<float>>& offsets,
                              const TimeBase& timebase, int top_n = 100);

// Gaussian Soft-NMS: repeatedly select the best remaining candidate, decay
// every other remaining score by exp(-tIoU^2 / sigma), and drop scores below
// score_floor. Selection and output order break ties by earlier start, then
// original input index. Scores never increase; the global argmax keeps its
// score and stays first.
std::vector<Candidate> soft_nms(std::vector<Candidate> candidates, const SoftNmsConfig& cfg);

// Evaluation input for one query: predictions in rank order (best first).
// Queries with no predictions score zero everywhere; every query must have at
// least one ground-truth moment.
struct QueryResult {
  std::vector<Moment> predictions;
  std::vector<Moment> gts;
};

inline constexpr std::array<double, 3> kRecallThresholds{0.3, 0.5, 0.7};
inline constexpr std::array<double, 10> kApThresholds{0.50, 0.55, 0.60, 0.65, 0.70,
                                                      0.75, 0.80, 0.85, 0.90, 0.95};

struct EvalReport {
  std::array<double, 3> r1{};   // fraction of queries with top-1 tIoU >= threshold
  double miou = 0.0;            // mean over queries of the top-1's best tIoU
  std::array<double, 10> ap{};  // per-threshold AP, averaged over queries
  double map = 0.0;             // mean of ap
  std::int64_t num_queries = 0;
};

// R1 against any ground truth; AP by rank-order matching of predictions to
// ground truths (a prediction is a true positive iff the tIoU >= threshold
// matching can be extended to include it), interpolated precision, averaged
// over queries and then thresholds.
EvalReport evaluate(const std::vector<QueryResult>& queries);

// One prediction-file record: ranked scored moments for one (video, query).
struct ScoredMoment {
  Moment moment;
  double score = 0.0;
};

struct PredictionRecord {
  std::string video_id;
  int query_idx = 0;
  std::vector<ScoredMoment> moments;
};

std::vector<ScoredMoment> scored_moments(const std::vector<Candidate>& candidates);

// JSON-lines format, one record per line:
//   {"video_id": ..., "query_idx": ..., "moments": [[start, end, score], ...]}
// write -> read is the identity.
void write_predictions(const std::vector<PredictionRecord>& records, const std::string& path);
std::vector<PredictionRecord> read_predictions(const std::string& path);

std::string report_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace tmr

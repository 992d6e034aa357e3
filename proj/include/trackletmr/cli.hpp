#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "trackletmr/model.hpp"
#include "trackletmr/postproc.hpp"
#include "trackletmr/synthetic.hpp"
#include "trackletmr/tracking.hpp"
#include "trackletmr/train.hpp"

namespace tmr {

// Dataset directory paths consumed by train/eval/ablate/infer.
struct DataPaths {
  std::string train;
  std::string eval;
};

// One run's full configuration. Every field has a default; a config file, then
// --set overrides, then --seed/--threads flags refine it in that order.
struct RunConfig {
  bool has_synthetic = false;
  SyntheticConfig synthetic;
  DataPaths data;
  TrackerConfig tracker;
  ModelConfig model;
  TrainConfig train;
  SoftNmsConfig postproc;
  Variant variant = Variant::Relational;  // "train.variant"
  std::uint64_t seed = 7;
  std::string output_dir = "runs/out";

  void validate() const;
};

// Strict parse: unknown keys at any level throw ConfigError naming the key.
RunConfig parse_run_config(const nlohmann::json& doc);

// Applies one dotted-path override (e.g. "train.epochs=5") onto a JSON
// document; the value is parsed as a JSON literal, falling back to a string.
void apply_set_override(nlohmann::json& doc, const std::string& assignment);

// On-disk dataset: an index naming per-video detection manifests and frame
// feature files, plus query lines paired by position with ground-truth records.
struct DatasetVideo {
  std::string video_id;
  std::string manifest;  // relative to the dataset dir
  std::string frames;    // relative, LE32 floats, (L, d_f) row-major
};

struct Dataset {
  double fps = 0.0;
  int d_f = 0;
  std::vector<DatasetVideo> videos;
  std::vector<std::string> queries;           // queries[i] pairs with gts[i]
  std::vector<std::vector<Moment>> gts;       // per query
  std::vector<std::string> gt_video_ids;      // per query
  std::string dir;
};

void save_dataset(const std::vector<SyntheticExample>& examples, double fps, int d_f,
                  const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Tracks every video and assembles model-ready examples, pairing each query
// with its video by the ground-truth record's video_id.
std::vector<TrainExample> load_examples(const Dataset& ds, const TrackerConfig& tracker,
                                        const ModelConfig& mcfg);

// Inference for one prepared example: forward, decode, Soft-NMS.
std::vector<Candidate> predict_example(const ParamStore<float>& params, const ModelConfig& mcfg,
                                       const SoftNmsConfig& nms, const TrainExample& ex,
                                       Variant variant);

// Batch evaluation: per-query predictions plus the aggregate report.
struct EvalRun {
  std::vector<PredictionRecord> predictions;
  EvalReport report;
};
EvalRun evaluate_checkpoint(const ParamStore<float>& params, const ModelConfig& mcfg,
                            const SoftNmsConfig& nms, const std::vector<TrainExample>& examples,
                            Variant variant);

// Subcommand bodies. Each validates fully before touching the filesystem and
// returns a process exit code (0 success; validation failures throw and the
// driver maps them to exit 1).
int cmd_gen(const RunConfig& cfg, const std::string& out_dir);
int cmd_track(const RunConfig& cfg, const std::string& detections_in,
              const std::string& tracklets_out);
int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir);
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir);
int cmd_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& video_id,
              const std::string& query);
int cmd_gradcheck(const RunConfig& cfg);
int cmd_ablate(const RunConfig& cfg, const std::string& data_dir);

// Full driver: parses argv-style args (without the program name), dispatches,
// and maps errors to exit codes — 2 for usage, 1 for validation/runtime.
int run_cli(const std::vector<std::string>& args);

}  // namespace tmr

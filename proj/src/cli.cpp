#include "trackletmr/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "trackletmr/checkpoint.hpp"
#include "trackletmr/errors.hpp"
#include "trackletmr/gradcheck_suite.hpp"
#include "trackletmr/log.hpp"
#include "trackletmr/manifest_io.hpp"
#include "trackletmr/query.hpp"

namespace tmr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Flag-syntax problems; mapped to exit code 2 by run_cli.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_keys(const json& obj, const std::string& section,
                  std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw ConfigError("config: '" + section + "' must be a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("config: unknown key '" +
                        (section.empty() ? item.key() : section + "." + item.key()) + "'");
  }
}

int get_int(const json& obj, const char* key, int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigError(std::string("config: '") + key + "' must be an integer");
  return v.get<int>();
}

double get_double(const json& obj, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(std::string("config: '") + key + "' must be a number");
  return v.get<double>();
}

std::string get_string(const json& obj, const char* key, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(std::string("config: '") + key + "' must be a string");
  return v.get<std::string>();
}

std::uint64_t get_u64(const json& obj, const char* key, std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_unsigned() && !v.is_number_integer())
    throw ConfigError(std::string("config: '") + key + "' must be a nonnegative integer");
  if (v.is_number_integer() && v.get<std::int64_t>() < 0)
    throw ConfigError(std::string("config: '") + key + "' must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path + "'");
}

json parse_json_file(const std::string& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

json moments_json(const std::vector<Moment>& moments) {
  json arr = json::array();
  for (const auto& m : moments) arr.push_back(json::array({m.start, m.end}));
  return arr;
}

std::string variant_key(Variant v) { return variant_name(v); }

}  // namespace

void RunConfig::validate() const {
  if (has_synthetic) synthetic.validate();
  tracker.validate();
  model.validate();
  train.validate();
  postproc.validate();
  if (output_dir.empty()) throw ConfigError("config: output_dir must be nonempty");
}

RunConfig parse_run_config(const json& doc) {
  require_keys(doc, "",
               {"data", "synthetic", "tracker", "model", "train", "postproc", "seed",
                "output_dir"});
  if (doc.contains("data") && doc.contains("synthetic"))
    throw ConfigError("config: 'data' and 'synthetic' are mutually exclusive");

  RunConfig cfg;
  if (doc.contains("synthetic")) {
    const json& s = doc.at("synthetic");
    require_keys(s, "synthetic",
                 {"num_videos", "L", "max_objects", "d_v", "d_s", "d_f", "state_subspace_dim",
                  "noise_sigma", "relation_active_prob", "fps", "seed"});
    cfg.has_synthetic = true;
    auto& sc = cfg.synthetic;
    sc.num_videos = get_int(s, "num_videos", sc.num_videos);
    sc.L = get_int(s, "L", sc.L);
    sc.max_objects = get_int(s, "max_objects", sc.max_objects);
    sc.d_v = get_int(s, "d_v", sc.d_v);
    sc.d_s = get_int(s, "d_s", sc.d_s);
    sc.d_f = get_int(s, "d_f", sc.d_f);
    sc.state_subspace_dim = get_int(s, "state_subspace_dim", sc.state_subspace_dim);
    sc.noise_sigma = get_double(s, "noise_sigma", sc.noise_sigma);
    sc.relation_active_prob = get_double(s, "relation_active_prob", sc.relation_active_prob);
    sc.fps = get_double(s, "fps", sc.fps);
    sc.seed = get_u64(s, "seed", sc.seed);
  }
  if (doc.contains("data")) {
    const json& d = doc.at("data");
    require_keys(d, "data", {"train", "eval"});
    cfg.data.train = get_string(d, "train", "");
    cfg.data.eval = get_string(d, "eval", "");
  }
  if (doc.contains("tracker")) {
    const json& t = doc.at("tracker");
    require_keys(t, "tracker",
                 {"obj_conf_thresh", "rel_conf_thresh", "track_thresh", "track_buffer",
                  "match_thresh"});
    auto& tc = cfg.tracker;
    tc.obj_conf_thresh = static_cast<float>(get_double(t, "obj_conf_thresh", tc.obj_conf_thresh));
    tc.rel_conf_thresh = static_cast<float>(get_double(t, "rel_conf_thresh", tc.rel_conf_thresh));
    tc.track_thresh = static_cast<float>(get_double(t, "track_thresh", tc.track_thresh));
    tc.track_buffer = get_int(t, "track_buffer", tc.track_buffer);
    tc.match_thresh = static_cast<float>(get_double(t, "match_thresh", tc.match_thresh));
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    require_keys(m, "model",
                 {"d_model", "num_blocks", "strided_blocks", "heads", "mlp_ratio", "head_depth",
                  "dropout", "d_in", "d_t", "d_frame", "L_max"});
    auto& mc = cfg.model;
    mc.d_model = get_int(m, "d_model", mc.d_model);
    mc.num_blocks = get_int(m, "num_blocks", mc.num_blocks);
    mc.strided_blocks = get_int(m, "strided_blocks", mc.strided_blocks);
    mc.heads = get_int(m, "heads", mc.heads);
    mc.mlp_ratio = get_int(m, "mlp_ratio", mc.mlp_ratio);
    mc.head_depth = get_int(m, "head_depth", mc.head_depth);
    mc.dropout = get_double(m, "dropout", mc.dropout);
    mc.d_in = get_int(m, "d_in", mc.d_in);
    mc.d_t = get_int(m, "d_t", mc.d_t);
    mc.d_frame = get_int(m, "d_frame", mc.d_frame);
    mc.L_max = get_int(m, "L_max", mc.L_max);
  }
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    require_keys(t, "train",
                 {"lr_max", "batch_size", "epochs", "warmup_epochs", "focal_weight",
                  "diou_weight", "focal_alpha", "focal_gamma", "center_radius", "momentum",
                  "weight_decay", "threads", "variant"});
    auto& tc = cfg.train;
    tc.lr_max = get_double(t, "lr_max", tc.lr_max);
    tc.batch_size = get_int(t, "batch_size", tc.batch_size);
    tc.epochs = get_int(t, "epochs", tc.epochs);
    tc.warmup_epochs = get_int(t, "warmup_epochs", tc.warmup_epochs);
    tc.focal_weight = get_double(t, "focal_weight", tc.focal_weight);
    tc.diou_weight = get_double(t, "diou_weight", tc.diou_weight);
    tc.focal_alpha = get_double(t, "focal_alpha", tc.focal_alpha);
    tc.focal_gamma = get_double(t, "focal_gamma", tc.focal_gamma);
    tc.center_radius = get_double(t, "center_radius", tc.center_radius);
    tc.momentum = get_double(t, "momentum", tc.momentum);
    tc.weight_decay = get_double(t, "weight_decay", tc.weight_decay);
    tc.threads = get_int(t, "threads", tc.threads);
    cfg.variant = parse_variant(get_string(t, "variant", variant_key(cfg.variant)));
  }
  if (doc.contains("postproc")) {
    const json& p = doc.at("postproc");
    require_keys(p, "postproc", {"sigma", "score_floor", "top_n"});
    auto& pc = cfg.postproc;
    pc.sigma = get_double(p, "sigma", pc.sigma);
    pc.score_floor = get_double(p, "score_floor", pc.score_floor);
    pc.top_n = get_int(p, "top_n", pc.top_n);
  }
  cfg.seed = get_u64(doc, "seed", cfg.seed);
  cfg.output_dir = get_string(doc, "output_dir", cfg.output_dir);
  return cfg;
}

void apply_set_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // unquoted strings (paths, names) pass through verbatim
  }

  json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string part = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    if (part.empty()) throw UsageError("--set: empty path segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    if (!node->is_object() && !node->is_null())
      throw UsageError("--set: '" + part + "' is not an object in '" + path + "'");
    begin = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

void save_dataset(const std::vector<SyntheticExample>& examples, double fps, int d_f,
                  const std::string& dir) {
  if (examples.empty()) throw ConfigError("save_dataset: no examples");
  fs::create_directories(dir);

  json videos = json::array();
  std::string queries;
  json gts = json::array();
  for (const auto& ex : examples) {
    const std::string manifest = ex.video_id + ".json";
    const std::string frames = ex.video_id + ".frames.bin";
    save_detections(ex.seq, (fs::path(dir) / manifest).string());
    save_floats_le32(ex.frame_feats, (fs::path(dir) / frames).string());
    videos.push_back({{"id", ex.video_id}, {"manifest", manifest}, {"frames", frames}});
    queries += ex.query;
    queries += '\n';
    gts.push_back({{"video_id", ex.video_id}, {"moments", moments_json(ex.gt)}});
  }
  write_text_file((fs::path(dir) / "queries.txt").string(), queries);
  write_text_file((fs::path(dir) / "ground_truth.json").string(), gts.dump(2) + "\n");
  const json index = {{"version", 1},
                      {"fps", fps},
                      {"d_f", d_f},
                      {"videos", videos},
                      {"queries", "queries.txt"},
                      {"ground_truth", "ground_truth.json"}};
  write_text_file((fs::path(dir) / "dataset.json").string(), index.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const json index = parse_json_file((fs::path(dir) / "dataset.json").string());
  require_keys(index, "dataset", {"version", "fps", "d_f", "videos", "queries", "ground_truth"});
  if (get_int(index, "version", 0) != 1)
    throw FormatError("dataset '" + dir + "': unsupported version");

  Dataset ds;
  ds.dir = dir;
  ds.fps = get_double(index, "fps", 0.0);
  ds.d_f = get_int(index, "d_f", 0);
  if (!index.contains("videos") || !index.at("videos").is_array())
    throw FormatError("dataset '" + dir + "': 'videos' must be an array");
  for (const auto& v : index.at("videos")) {
    require_keys(v, "dataset.videos[]", {"id", "manifest", "frames"});
    DatasetVideo dv;
    dv.video_id = get_string(v, "id", "");
    dv.manifest = get_string(v, "manifest", "");
    dv.frames = get_string(v, "frames", "");
    if (dv.video_id.empty() || dv.manifest.empty() || dv.frames.empty())
      throw FormatError("dataset '" + dir + "': incomplete video entry");
    for (const std::string& rel : {dv.manifest, dv.frames})
      if (!fs::exists(fs::path(dir) / rel))
        throw IoError("dataset '" + dir + "': missing file '" + rel + "'");
    ds.videos.push_back(std::move(dv));
  }

  const std::string qtext = read_text_file(
      (fs::path(dir) / get_string(index, "queries", "queries.txt")).string());
  std::istringstream qs(qtext);
  std::string line;
  while (std::getline(qs, line))
    if (!line.empty()) ds.queries.push_back(line);

  const json gts = parse_json_file(
      (fs::path(dir) / get_string(index, "ground_truth", "ground_truth.json")).string());
  if (!gts.is_array()) throw FormatError("dataset '" + dir + "': ground truth must be an array");
  for (const auto& rec : gts) {
    require_keys(rec, "ground_truth[]", {"video_id", "moments"});
    ds.gt_video_ids.push_back(get_string(rec, "video_id", ""));
    std::vector<Moment> ms;
    if (!rec.contains("moments") || !rec.at("moments").is_array())
      throw FormatError("dataset '" + dir + "': 'moments' must be an array");
    for (const auto& m : rec.at("moments")) {
      if (!m.is_array() || m.size() != 2)
        throw FormatError("dataset '" + dir + "': each moment must be [start, end]");
      ms.push_back(Moment{m[0].get<double>(), m[1].get<double>()});
    }
    ds.gts.push_back(std::move(ms));
  }
  if (ds.queries.size() != ds.gts.size())
    throw FormatError("dataset '" + dir + "': " + std::to_string(ds.queries.size()) +
                      " queries vs " + std::to_string(ds.gts.size()) + " ground-truth records");
  return ds;
}

std::vector<TrainExample> load_examples(const Dataset& ds, const TrackerConfig& tracker,
                                        const ModelConfig& mcfg) {
  std::map<std::string, const DatasetVideo*> by_id;
  for (const auto& v : ds.videos) by_id.emplace(v.video_id, &v);

  std::vector<TrainExample> out;
  out.reserve(ds.queries.size());
  for (std::size_t i = 0; i < ds.queries.size(); ++i) {
    const auto it = by_id.find(ds.gt_video_ids[i]);
    if (it == by_id.end())
      throw FormatError("dataset '" + ds.dir + "': ground truth " + std::to_string(i) +
                        " names unknown video '" + ds.gt_video_ids[i] + "'");
    SyntheticExample ex;
    ex.video_id = it->second->video_id;
    ex.seq = load_detections((fs::path(ds.dir) / it->second->manifest).string());
    ex.frame_feats = load_floats_le32((fs::path(ds.dir) / it->second->frames).string());
    ex.query = ds.queries[i];
    ex.gt = ds.gts[i];
    out.push_back(make_train_example(ex, tracker, mcfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

std::vector<Candidate> predict_example(const ParamStore<float>& params, const ModelConfig& mcfg,
                                       const SoftNmsConfig& nms, const TrainExample& ex,
                                       Variant variant) {
  ad::Tape<float> tape;
  const auto bound = bind_params(tape, params, false);
  const ForwardResult<float> fwd =
      variant == Variant::Frame
          ? forward_frame_only(tape, bound, mcfg, ex.tokens, ex.frame_feats)
          : forward(tape, bound, mcfg, ex.bundle_feats, ex.num_objects, ex.mask, ex.tokens,
                    variant, ex.frame_feats);
  const HeadOutputs<float> hd = heads(bound, mcfg, fwd.fused);
  std::vector<ad::Tensor<float>> scores, offsets;
  for (const auto& v : hd.scores) scores.push_back(v.val());
  for (const auto& v : hd.offsets) offsets.push_back(v.val());
  const TimeBase tb{ex.fps, ex.bundle_feats.shape[1]};
  return soft_nms(decode(scores, offsets, tb, nms.top_n), nms);
}

EvalRun evaluate_checkpoint(const ParamStore<float>& params, const ModelConfig& mcfg,
                            const SoftNmsConfig& nms, const std::vector<TrainExample>& examples,
                            Variant variant) {
  EvalRun run;
  std::vector<QueryResult> queries;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto kept = predict_example(params, mcfg, nms, examples[i], variant);
    PredictionRecord rec;
    rec.video_id = examples[i].video_id;
    rec.query_idx = static_cast<int>(i);
    rec.moments = scored_moments(kept);
    run.predictions.push_back(std::move(rec));
    QueryResult qr;
    for (const auto& c : kept) qr.predictions.push_back(c.moment);
    qr.gts = examples[i].gts;
    queries.push_back(std::move(qr));
  }
  run.report = evaluate(queries);
  return run;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen(const RunConfig& cfg, const std::string& out_dir) {
  if (!cfg.has_synthetic)
    throw ConfigError("gen: config needs a 'synthetic' section");
  if (out_dir.empty()) throw ConfigError("gen: no output directory");
  const auto examples = generate_synthetic(cfg.synthetic);
  save_dataset(examples, cfg.synthetic.fps, cfg.synthetic.d_f, out_dir);
  TMR_LOG_INFO("gen: wrote " << examples.size() << " videos to " << out_dir);
  return 0;
}

int cmd_track(const RunConfig& cfg, const std::string& detections_in,
              const std::string& tracklets_out) {
  const DetectionSequence seq = load_detections(detections_in);
  const TrackletBundle bundle = track_video(seq, cfg.tracker);

  fs::path manifest_path(tracklets_out);
  fs::path bin_path = manifest_path;
  bin_path.replace_extension(".bin");
  if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());

  auto presence_json = [](const std::vector<std::uint8_t>& p) {
    json arr = json::array();
    for (auto v : p) arr.push_back(static_cast<int>(v));
    return arr;
  };
  json objects = json::array();
  for (const auto& o : bundle.objects)
    objects.push_back(
        {{"track_id", o.track_id}, {"class", o.cls}, {"presence", presence_json(o.presence)}});
  json relations = json::array();
  for (const auto& r : bundle.relations)
    relations.push_back({{"subject_track", r.subject_track},
                         {"object_track", r.object_track},
                         {"predicate", r.predicate},
                         {"presence", presence_json(r.presence)}});
  json adjacency = json::array();
  for (auto v : bundle.adjacency) adjacency.push_back(static_cast<int>(v));

  const json manifest = {{"version", 1},
                         {"L", bundle.L},
                         {"feat_dim", bundle.feat_dim},
                         {"objects", objects},
                         {"relations", relations},
                         {"adjacency", adjacency},
                         {"tensor_file", bin_path.filename().string()}};
  save_floats_le32(std::vector<float>(bundle.features.data.begin(), bundle.features.data.end()),
                   bin_path.string());
  write_text_file(manifest_path.string(), manifest.dump(2) + "\n");
  TMR_LOG_INFO("track: " << bundle.num_objects() << " object and " << bundle.num_relations()
                         << " relation tracklets -> " << tracklets_out);
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
  const std::string train_dir = data_dir.empty() ? cfg.data.train : data_dir;
  if (train_dir.empty()) throw ConfigError("train: no training data directory");
  const std::string run_dir = out_dir.empty() ? cfg.output_dir : out_dir;

  const Dataset train_ds = load_dataset(train_dir);
  const auto train_examples = load_examples(train_ds, cfg.tracker, cfg.model);
  std::vector<TrainExample> eval_examples;
  if (!cfg.data.eval.empty())
    eval_examples = load_examples(load_dataset(cfg.data.eval), cfg.tracker, cfg.model);

  fs::create_directories(run_dir);
  std::ofstream log_out((fs::path(run_dir) / "train_log.jsonl").string(), std::ios::binary);
  if (!log_out) throw IoError("cannot write training log in '" + run_dir + "'");

  ParamStore<float> params = init_params<float>(cfg.model, cfg.seed);
  fit(params, train_examples, cfg.model, cfg.train, cfg.variant, cfg.seed,
      [&](const EpochStats& s) {
        const json line = {{"epoch", s.epoch},
                           {"lr", s.lr},
                           {"focal", s.focal},
                           {"diou", s.diou},
                           {"total", s.total}};
        log_out << line.dump() << '\n';
        TMR_LOG_INFO("epoch " << s.epoch << " lr " << s.lr << " total " << s.total);
      });
  log_out.flush();
  if (!log_out) throw IoError("short write to training log in '" + run_dir + "'");

  save_checkpoint((fs::path(run_dir) / "checkpoint.tmr").string(), cfg.model, params);

  if (!eval_examples.empty()) {
    const EvalRun run =
        evaluate_checkpoint(params, cfg.model, cfg.postproc, eval_examples, cfg.variant);
    write_predictions(run.predictions, (fs::path(run_dir) / "predictions.jsonl").string());
    write_text_file((fs::path(run_dir) / "report.json").string(), report_json(run.report));
    std::cout << report_table(run.report);
  }
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir) {
  const std::string eval_dir = data_dir.empty() ? cfg.data.eval : data_dir;
  if (eval_dir.empty()) throw ConfigError("eval: no evaluation data directory");
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto examples = load_examples(load_dataset(eval_dir), cfg.tracker, ckpt.config);

  const EvalRun run =
      evaluate_checkpoint(ckpt.params, ckpt.config, cfg.postproc, examples, cfg.variant);

  fs::create_directories(cfg.output_dir);
  write_predictions(run.predictions, (fs::path(cfg.output_dir) / "predictions.jsonl").string());
  write_text_file((fs::path(cfg.output_dir) / "report.json").string(), report_json(run.report));
  std::cout << report_table(run.report);
  return 0;
}

int cmd_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& video_id,
              const std::string& query) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);

  std::optional<DatasetVideo> video;
  std::string found_dir;
  for (const std::string& dir : {cfg.data.eval, cfg.data.train}) {
    if (dir.empty() || video) continue;
    const Dataset ds = load_dataset(dir);
    for (const auto& v : ds.videos)
      if (v.video_id == video_id) {
        video = v;
        found_dir = dir;
        break;
      }
  }
  if (!video)
    throw ConfigError("infer: video '" + video_id + "' not found in configured data directories");

  SyntheticExample ex;
  ex.video_id = video_id;
  ex.seq = load_detections((fs::path(found_dir) / video->manifest).string());
  ex.frame_feats = load_floats_le32((fs::path(found_dir) / video->frames).string());
  ex.query = query;
  const TrainExample prepared = make_train_example(ex, cfg.tracker, ckpt.config);

  ad::Tape<float> tape;
  const auto bound = bind_params(tape, ckpt.params, false);
  const ForwardResult<float> fwd =
      cfg.variant == Variant::Frame
          ? forward_frame_only(tape, bound, ckpt.config, prepared.tokens, prepared.frame_feats)
          : forward(tape, bound, ckpt.config, prepared.bundle_feats, prepared.num_objects,
                    prepared.mask, prepared.tokens, cfg.variant, prepared.frame_feats);
  const HeadOutputs<float> hd = heads(bound, ckpt.config, fwd.fused);
  std::vector<ad::Tensor<float>> scores, offsets;
  for (const auto& v : hd.scores) scores.push_back(v.val());
  for (const auto& v : hd.offsets) offsets.push_back(v.val());
  const TimeBase tb{prepared.fps, prepared.bundle_feats.shape[1]};
  const auto kept = soft_nms(decode(scores, offsets, tb, cfg.postproc.top_n), cfg.postproc);

  json preds = json::array();
  for (const auto& c : kept) preds.push_back(json::array({c.moment.start, c.moment.end, c.score}));
  json curves = json::array();
  for (const auto& curve : activation_curves(fwd)) {
    json row = json::array();
    for (double x : curve) row.push_back(x);
    curves.push_back(std::move(row));
  }
  const json out = {{"video_id", video_id},
                    {"query", query},
                    {"predictions", preds},
                    {"activation_curves", curves}};

  fs::create_directories(cfg.output_dir);
  const std::string path = (fs::path(cfg.output_dir) / ("infer_" + video_id + ".json")).string();
  write_text_file(path, out.dump(2) + "\n");
  if (!kept.empty())
    std::cout << "top prediction: [" << kept.front().moment.start << ", "
              << kept.front().moment.end << "] score " << kept.front().score << "\n";
  else
    std::cout << "no prediction above the score floor\n";
  TMR_LOG_INFO("infer: wrote " << path);
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
  auto checks = op_gradient_suite(cfg.seed);
  checks.push_back(end_to_end_gradient_check(cfg.seed));
  double worst = 0.0;
  for (const auto& c : checks) {
    std::printf("%-20s %.3e\n", c.name.c_str(), c.max_rel_err);
    worst = std::max(worst, c.max_rel_err);
  }
  std::printf("max rel err %.3e\n", worst);
  return worst < 1e-4 ? 0 : 1;
}

int cmd_ablate(const RunConfig& cfg, const std::string& data_dir) {
  const std::string train_dir = data_dir.empty() ? cfg.data.train : data_dir;
  if (train_dir.empty()) throw ConfigError("ablate: no training data directory");
  if (cfg.data.eval.empty()) throw ConfigError("ablate: config needs data.eval");

  const auto train_examples = load_examples(load_dataset(train_dir), cfg.tracker, cfg.model);
  const auto eval_examples = load_examples(load_dataset(cfg.data.eval), cfg.tracker, cfg.model);

  const Variant variants[] = {Variant::Temporal, Variant::Unmasked, Variant::Relational,
                              Variant::Frame};
  json rows = json::array();
  std::string table;
  {
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %8s %8s\n", "variant", "R1@0.3", "R1@0.5",
                  "R1@0.7", "mIoU", "mAP");
    table += line;
  }
  for (const Variant variant : variants) {
    ParamStore<float> params = init_params<float>(cfg.model, cfg.seed);
    fit(params, train_examples, cfg.model, cfg.train, variant, cfg.seed);
    const EvalRun run =
        evaluate_checkpoint(params, cfg.model, cfg.postproc, eval_examples, variant);
    const auto& r = run.report;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %8.4f %8.4f %8.4f %8.4f %8.4f\n",
                  variant_key(variant).c_str(), r.r1[0], r.r1[1], r.r1[2], r.miou, r.map);
    table += line;
    rows.push_back({{"variant", variant_key(variant)},
                    {"report", json::parse(report_json(r))}});
    TMR_LOG_INFO("ablate: " << variant_key(variant) << " mIoU " << r.miou);
  }

  fs::create_directories(cfg.output_dir);
  write_text_file((fs::path(cfg.output_dir) / "ablation.json").string(), rows.dump(2) + "\n");
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

namespace {

const char* kUsage =
    "usage: trackletmr <command> [options] [args]\n"
    "\n"
    "commands:\n"
    "  gen [OUT_DIR]                    write a synthetic dataset\n"
    "  track DETECTIONS OUT             track one video's detections into a tracklet bundle\n"
    "  train [DATA_DIR [OUT_DIR]]       train a model; evaluates data.eval when configured\n"
    "  eval CHECKPOINT [DATA_DIR]       score a checkpoint on a dataset\n"
    "  infer CHECKPOINT VIDEO_ID QUERY  single-query prediction with activation curves\n"
    "  gradcheck                        finite-difference checks for ops and the full loss\n"
    "  ablate [DATA_DIR]                train and compare all attention variants\n"
    "\n"
    "options:\n"
    "  --config PATH   JSON run configuration\n"
    "  --seed N        override the config seed\n"
    "  --threads N     cap training workers\n"
    "  --set K=V       dotted-path config override, repeatable (e.g. train.epochs=5)\n";

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    if (args.empty()) throw UsageError("missing command");
    const std::string command = args[0];
    const bool known =
        command == "gen" || command == "track" || command == "train" || command == "eval" ||
        command == "infer" || command == "gradcheck" || command == "ablate";
    if (!known) throw UsageError("unknown command '" + command + "'");

    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed_flag;
    std::optional<int> threads_flag;
    std::vector<std::string> positional;
    for (std::size_t i = 1; i < args.size(); ++i) {
      const std::string& a = args[i];
      auto take_value = [&](const char* flag) -> const std::string& {
        if (i + 1 >= args.size()) throw UsageError(std::string(flag) + " needs a value");
        return args[++i];
      };
      if (a == "--config") {
        config_path = take_value("--config");
      } else if (a == "--seed") {
        const std::string& v = take_value("--seed");
        try {
          std::size_t pos = 0;
          seed_flag = std::stoull(v, &pos);
          if (pos != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
          throw UsageError("--seed expects an integer, got '" + v + "'");
        }
      } else if (a == "--threads") {
        const std::string& v = take_value("--threads");
        try {
          std::size_t pos = 0;
          threads_flag = std::stoi(v, &pos);
          if (pos != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
          throw UsageError("--threads expects an integer, got '" + v + "'");
        }
      } else if (a == "--set") {
        sets.push_back(take_value("--set"));
      } else if (a.rfind("--", 0) == 0) {
        throw UsageError("unknown option '" + a + "'");
      } else {
        positional.push_back(a);
      }
    }

    json doc = json::object();
    if (!config_path.empty()) doc = parse_json_file(config_path);
    for (const auto& s : sets) apply_set_override(doc, s);
    RunConfig cfg = parse_run_config(doc);
    if (seed_flag) cfg.seed = *seed_flag;
    if (threads_flag) cfg.train.threads = *threads_flag;
    cfg.validate();

    auto expect_positionals = [&](std::size_t min, std::size_t max) {
      if (positional.size() < min || positional.size() > max)
        throw UsageError("wrong number of arguments for '" + command + "'");
    };
    if (command == "gen") {
      expect_positionals(0, 1);
      return cmd_gen(cfg, positional.empty() ? cfg.output_dir : positional[0]);
    }
    if (command == "track") {
      expect_positionals(2, 2);
      return cmd_track(cfg, positional[0], positional[1]);
    }
    if (command == "train") {
      expect_positionals(0, 2);
      return cmd_train(cfg, positional.empty() ? "" : positional[0],
                       positional.size() > 1 ? positional[1] : "");
    }
    if (command == "eval") {
      expect_positionals(1, 2);
      return cmd_eval(cfg, positional[0], positional.size() > 1 ? positional[1] : "");
    }
    if (command == "infer") {
      expect_positionals(3, 3);
      return cmd_infer(cfg, positional[0], positional[1], positional[2]);
    }
    if (command == "gradcheck") {
      expect_positionals(0, 0);
      return cmd_gradcheck(cfg);
    }
    expect_positionals(0, 1);
    return cmd_ablate(cfg, positional.empty() ? "" : positional[0]);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << kUsage;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tmr

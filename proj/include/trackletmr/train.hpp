#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "trackletmr/model.hpp"
#include "trackletmr/synthetic.hpp"
#include "trackletmr/tracking.hpp"

namespace tmr {

// Half-open admission window [lo, hi) on a ground truth's maximum regression
// extent, measured in frames, for one pyramid level.
struct LevelRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct TrainConfig {
  double lr_max = 1e-3;
  int batch_size = 16;
  int epochs = 10;
  int warmup_epochs = 3;
  double focal_weight = 1.0;
  double diou_weight = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double center_radius = 1.5;  // in strides at each level
  std::vector<LevelRange> level_ranges{
      {0.0, 4.0},   {4.0, 8.0},   {8.0, 16.0},
      {16.0, 32.0}, {32.0, 64.0}, {64.0, std::numeric_limits<double>::infinity()}};
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int threads = 1;

  void validate() const;
};

// Regression target of one anchor cell. Offsets are in stride units at the
// anchor's level and both nonnegative: positives lie inside their ground truth.
struct CandidateTarget {
  bool positive = false;
  int gt_index = -1;
  double d_s = 0.0;
  double d_e = 0.0;
};

struct AssignedTargets {
  std::vector<std::vector<CandidateTarget>> levels;  // levels[k][t]
  std::int64_t num_positives = 0;
  std::vector<std::size_t> unassigned;  // ground truths no anchor admitted
};

// Anchor (k, t) admits ground truth g when (a) its time is within
// center_radius strides of g's center, (b) g's maximum regression extent in
// frames falls in level k's range, and (c) its time lies inside [start, end].
// Contested anchors go to the shortest ground truth, ties to the lowest index.
AssignedTargets assign_targets(const std::vector<Moment>& gts,
                               const std::vector<std::int64_t>& level_lengths, double fps,
                               const TrainConfig& cfg);

// Linear warmup to lr_max over warmup_steps, then cosine decay to zero across
// the remaining steps.
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double lr_max);

// SGD-with-momentum velocity per parameter, keyed by name.
struct SgdState {
  std::map<std::string, ad::Tensor<float>> velocity;
};

// v = momentum * v + (g + weight_decay * theta); theta -= lr * v.
// Weight decay touches rank >= 2 tensors only (never biases, norms, or pos).
void sgd_step(ParamStore<float>& params, const std::map<std::string, ad::Tensor<float>>& grads,
              SgdState& state, double lr, double momentum, double weight_decay);

// Elementwise focal terms on probabilities p with 0/1 targets y:
//   -[alpha y (1-p)^gamma log p + (1-alpha)(1-y) p^gamma log(1-p)],
// p clamped to [1e-6, 1 - 1e-6].
template <typename S>
ad::Var<S> focal_loss_elements(ad::Var<S> p, const ad::Tensor<S>& y, S alpha, S gamma) {
  if (!(p.val().shape == y.shape))
    throw ShapeError("focal_loss_elements: probabilities and targets disagree in shape");
  auto& tape = *p.tape;
  const S eps = static_cast<S>(1e-6);
  auto pc = ad::clamp(p, eps, S(1) - eps);
  auto omp = ad::add_const(ad::neg(pc), S(1));
  ad::Tensor<S> ny_t = y;
  for (auto& v : ny_t.data) v = S(1) - v;
  auto yv = ad::make_const(tape, y);
  auto ny = ad::make_const(tape, ny_t);
  auto pos = ad::mul(yv, ad::mul(ad::pow_const(omp, gamma), ad::log(pc)));
  auto neg = ad::mul(ny, ad::mul(ad::pow_const(pc, gamma), ad::log(omp)));
  return ad::neg(ad::add(ad::scale(pos, alpha), ad::scale(neg, S(1) - alpha)));
}

// Distance-penalized interval IoU loss on elementwise-aligned spans:
//   1 - tIoU + (center distance)^2 / (enclosing span)^2.
// Exceeds 1 - tIoU whenever centers differ, equals it when they coincide.
template <typename S>
ad::Var<S> diou_loss(ad::Var<S> ps, ad::Var<S> pe, ad::Var<S> gs, ad::Var<S> ge) {
  auto inter = ad::relu(ad::sub(ad::minimum(pe, ge), ad::maximum(ps, gs)));
  auto len_sum = ad::add(ad::sub(pe, ps), ad::sub(ge, gs));
  auto iou = ad::div(inter, ad::sub(len_sum, inter));
  auto dc = ad::scale(ad::sub(ad::add(ps, pe), ad::add(gs, ge)), S(0.5));
  auto c = ad::sub(ad::maximum(pe, ge), ad::minimum(ps, gs));
  auto penalty = ad::div(ad::mul(dc, dc), ad::mul(c, c));
  return ad::add_const(ad::sub(penalty, iou), S(1));
}

template <typename S>
ad::Var<S> diou_loss(ad::Var<S> ps, ad::Var<S> pe, const Moment& gt) {
  auto& tape = *ps.tape;
  auto gs = ad::make_const(tape, ad::Tensor<S>::full(ps.val().shape, static_cast<S>(gt.start)));
  auto ge = ad::make_const(tape, ad::Tensor<S>::full(pe.val().shape, static_cast<S>(gt.end)));
  return diou_loss(ps, pe, gs, ge);
}

// Per-term values of one example's objective, for logging.
struct LossBreakdown {
  double focal = 0.0;
  double diou = 0.0;
  double total = 0.0;
  std::int64_t num_positives = 0;
  std::vector<std::size_t> unassigned;
};

// Full per-example objective: focal over every anchor plus DIoU over positive
// anchors' decoded spans, each normalized by max(1, num positives), weighted
// and summed per config.
template <typename S>
ad::Var<S> example_loss(ad::Tape<S>& tape, const BoundParams<S>& params,
                        const ModelConfig& mcfg, const TrainConfig& tcfg,
                        const ad::Tensor<S>& bundle_feats, std::int64_t num_objects,
                        const RelationalMask& mask, const ad::Tensor<S>& tokens,
                        const ad::Tensor<S>& frame_feats, const std::vector<Moment>& gts,
                        double fps, Variant variant, LossBreakdown* breakdown = nullptr) {
  ForwardResult<S> fwd =
      variant == Variant::Frame
          ? forward_frame_only(tape, params, mcfg, tokens, frame_feats)
          : forward(tape, params, mcfg, bundle_feats, num_objects, mask, tokens, variant,
                    frame_feats);
  HeadOutputs<S> hd = heads(params, mcfg, fwd.fused);

  std::vector<std::int64_t> lengths;
  for (const auto& s : hd.scores) lengths.push_back(s.val().shape[0]);
  const AssignedTargets targets = assign_targets(gts, lengths, fps, tcfg);
  const S norm =
      static_cast<S>(1.0 / static_cast<double>(std::max<std::int64_t>(1, targets.num_positives)));

  auto focal = ad::make_const(tape, ad::Tensor<S>::scalar(S(0)));
  auto diou = ad::make_const(tape, ad::Tensor<S>::scalar(S(0)));
  for (std::size_t k = 0; k < hd.scores.size(); ++k) {
    ad::Tensor<S> y = ad::Tensor<S>::zeros({lengths[k]});
    for (std::int64_t t = 0; t < lengths[k]; ++t)
      if (targets.levels[k][t].positive) y.data[static_cast<std::size_t>(t)] = S(1);
    auto fl = focal_loss_elements(hd.scores[k], y, static_cast<S>(tcfg.focal_alpha),
                                  static_cast<S>(tcfg.focal_gamma));
    focal = ad::add(focal, ad::sum_all(fl));

    const double delta = level_stride(static_cast<int>(k)) / fps;
    for (std::int64_t t = 0; t < lengths[k]; ++t) {
      const auto& tgt = targets.levels[k][static_cast<std::size_t>(t)];
      if (!tgt.positive) continue;
      auto row = ad::reshape(ad::slice_axis0(hd.offsets[k], t, 1), {2});
      auto ds = ad::slice_axis0(row, 0, 1);
      auto de = ad::slice_axis0(row, 1, 1);
      const double tau = candidate_time(static_cast<int>(k), t, fps);
      auto s_pred = ad::add_const(ad::scale(ds, static_cast<S>(-delta)), static_cast<S>(tau));
      auto e_pred = ad::add_const(ad::scale(de, static_cast<S>(delta)), static_cast<S>(tau));
      diou = ad::add(
          diou, ad::reshape(diou_loss(s_pred, e_pred, gts[static_cast<std::size_t>(tgt.gt_index)]),
                            {}));
    }
  }
  focal = ad::scale(focal, norm);
  diou = ad::scale(diou, norm);
  auto total = ad::add(ad::scale(focal, static_cast<S>(tcfg.focal_weight)),
                       ad::scale(diou, static_cast<S>(tcfg.diou_weight)));
  if (breakdown) {
    breakdown->focal = static_cast<double>(focal.val().data[0]);
    breakdown->diou = static_cast<double>(diou.val().data[0]);
    breakdown->total = static_cast<double>(total.val().data[0]);
    breakdown->num_positives = targets.num_positives;
    breakdown->unassigned = targets.unassigned;
  }
  return total;
}

// One video ready for the model: dense tracklet features, graph mask, query
// tokens, optional frame features, and ground-truth moments.
struct TrainExample {
  std::string video_id;
  ad::Tensor<float> bundle_feats;  // (N, L, d_in)
  std::int64_t num_objects = 0;
  RelationalMask mask;
  ad::Tensor<float> tokens;       // (K, d_t)
  ad::Tensor<float> frame_feats;  // (L, d_frame); empty when d_frame == 0
  std::vector<Moment> gts;
  double fps = 0.0;
};

// Tracks the detection sequence, builds the mask, parses the query, and packs
// frame features when the model has a frame branch.
TrainExample make_train_example(const SyntheticExample& ex, const TrackerConfig& tracker,
                                const ModelConfig& mcfg);

ad::Var<float> example_loss(ad::Tape<float>& tape, const BoundParams<float>& params,
                            const ModelConfig& mcfg, const TrainConfig& tcfg,
                            const TrainExample& ex, Variant variant,
                            LossBreakdown* breakdown = nullptr);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;  // rate used by the epoch's last step
  double focal = 0.0;
  double diou = 0.0;
  double total = 0.0;
  std::int64_t unassigned_gts = 0;
};

// One pass over `data` in a freshly shuffled order. Each batch: mean gradient
// over its examples (workers shard by position, reduced in worker order, so a
// fixed thread count is bit-reproducible), then one SGD step at the scheduled
// rate. Loss fields are per-example means. Throws DivergenceError when a loss
// goes non-finite.
EpochStats train_epoch(ParamStore<float>& params, SgdState& opt,
                       const std::vector<TrainExample>& data, const ModelConfig& mcfg,
                       const TrainConfig& tcfg, Variant variant, int epoch, Rng& order_rng);

// Full schedule: epochs * ceil(n / batch_size) steps with a seed-derived
// shuffle stream; calls on_epoch after each epoch when given.
std::vector<EpochStats> fit(ParamStore<float>& params, const std::vector<TrainExample>& data,
                            const ModelConfig& mcfg, const TrainConfig& tcfg, Variant variant,
                            std::uint64_t seed,
                            const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace tmr

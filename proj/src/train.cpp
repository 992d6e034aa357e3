#include "trackletmr/train.hpp"

#include <cmath>
#include <cstddef>
#include <exception>
#include <numbers>
#include <numeric>
#include <thread>
#include <utility>

#include "trackletmr/errors.hpp"
#include "trackletmr/log.hpp"
#include "trackletmr/query.hpp"

namespace tmr {

void TrainConfig::validate() const {
  if (!(lr_max > 0.0)) throw ConfigError("train: lr_max must be positive");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs)
    throw ConfigError("train: warmup_epochs must lie in [0, epochs)");
  if (!(focal_weight > 0.0) || !(diou_weight > 0.0))
    throw ConfigError("train: loss weights must be positive");
  if (!(focal_alpha > 0.0) || !(focal_alpha < 1.0))
    throw ConfigError("train: focal_alpha must lie in (0, 1)");
  if (focal_gamma < 0.0) throw ConfigError("train: focal_gamma must be nonnegative");
  if (!(center_radius > 0.0)) throw ConfigError("train: center_radius must be positive");
  if (level_ranges.empty()) throw ConfigError("train: level_ranges must not be empty");
  for (std::size_t k = 0; k < level_ranges.size(); ++k) {
    const auto& r = level_ranges[k];
    if (r.lo < 0.0 || !(r.lo < r.hi))
      throw ConfigError("train: each level range needs 0 <= lo < hi");
    if (k > 0 && r.lo < level_ranges[k - 1].lo)
      throw ConfigError("train: level ranges must be ordered by lo");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be nonnegative");
  if (threads < 1) throw ConfigError("train: threads must be at least 1");
}

AssignedTargets assign_targets(const std::vector<Moment>& gts,
                               const std::vector<std::int64_t>& level_lengths, double fps,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (!(fps > 0.0)) throw ConfigError("assign_targets: fps must be positive");
  if (level_lengths.empty()) throw ConfigError("assign_targets: no pyramid levels");
  if (level_lengths.size() > cfg.level_ranges.size())
    throw ConfigError("assign_targets: more pyramid levels than level ranges");

  // The coarsest level in play absorbs everything its range's lo admits.
  std::vector<LevelRange> ranges(cfg.level_ranges.begin(),
                                 cfg.level_ranges.begin() +
                                     static_cast<std::ptrdiff_t>(level_lengths.size()));
  ranges.back().hi = std::numeric_limits<double>::infinity();

  AssignedTargets out;
  out.levels.resize(level_lengths.size());
  std::vector<char> hit(gts.size(), 0);
  for (std::size_t k = 0; k < level_lengths.size(); ++k) {
    if (level_lengths[k] < 0) throw ConfigError("assign_targets: negative level length");
    out.levels[k].resize(static_cast<std::size_t>(level_lengths[k]));
    const double stride_s = level_stride(static_cast<int>(k)) / fps;
    const double radius = cfg.center_radius * stride_s;
    for (std::int64_t t = 0; t < level_lengths[k]; ++t) {
      const double tau = candidate_time(static_cast<int>(k), t, fps);
      int best = -1;
      for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        const Moment& g = gts[gi];
        if (!g.valid()) continue;
        if (tau < g.start || tau > g.end) continue;
        if (std::abs(tau - g.center()) > radius) continue;
        const double extent = std::max(tau - g.start, g.end - tau) * fps;
        if (extent < ranges[k].lo || extent >= ranges[k].hi) continue;
        if (best < 0 || g.length() < gts[static_cast<std::size_t>(best)].length())
          best = static_cast<int>(gi);
      }
      if (best < 0) continue;
      const Moment& g = gts[static_cast<std::size_t>(best)];
      auto& tgt = out.levels[k][static_cast<std::size_t>(t)];
      tgt.positive = true;
      tgt.gt_index = best;
      tgt.d_s = (tau - g.start) / stride_s;
      tgt.d_e = (g.end - tau) / stride_s;
      ++out.num_positives;
      hit[static_cast<std::size_t>(best)] = 1;
    }
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi)
    if (!hit[gi]) out.unassigned.push_back(gi);
  return out;
}

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double lr_max) {
  if (total_steps < 1 || warmup_steps < 0 || warmup_steps > total_steps)
    throw ConfigError("lr_at: bad schedule bounds");
  if (step < 0 || step >= total_steps) throw ConfigError("lr_at: step outside schedule");
  if (step < warmup_steps)
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const auto span = std::max<std::int64_t>(1, total_steps - warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void sgd_step(ParamStore<float>& params, const std::map<std::string, ad::Tensor<float>>& grads,
              SgdState& state, double lr, double momentum, double weight_decay) {
  const float lrf = static_cast<float>(lr);
  const float mu = static_cast<float>(momentum);
  const float wd = static_cast<float>(weight_decay);
  for (auto& [name, theta] : params.tensors) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw DimMismatch("sgd_step: missing gradient for '" + name + "'");
    const auto& g = git->second;
    if (!(g.shape == theta.shape))
      throw ShapeError("sgd_step: gradient shape disagrees for '" + name + "'");
    auto [vit, fresh] = state.velocity.try_emplace(name, ad::Tensor<float>::zeros(theta.shape));
    auto& v = vit->second;
    if (!fresh && !(v.shape == theta.shape))
      throw ShapeError("sgd_step: stale velocity shape for '" + name + "'");
    const bool decay = theta.rank() >= 2;
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      float gi = g.data[i];
      if (decay) gi += wd * theta.data[i];
      v.data[i] = mu * v.data[i] + gi;
      theta.data[i] -= lrf * v.data[i];
    }
  }
}

TrainExample make_train_example(const SyntheticExample& ex, const TrackerConfig& tracker,
                                const ModelConfig& mcfg) {
  mcfg.validate();
  TrainExample out;
  out.video_id = ex.video_id;
  out.fps = ex.seq.timebase.fps;
  out.gts = ex.gt;

  TrackletBundle bundle = track_video(ex.seq, tracker);
  if (bundle.num_objects() < 1)
    throw ShapeError("make_train_example: no object tracklets survive tracking in '" +
                     ex.video_id + "'");
  if (bundle.feat_dim != mcfg.d_in)
    throw DimMismatch("make_train_example: bundle feature dim " + std::to_string(bundle.feat_dim) +
                      " vs model d_in " + std::to_string(mcfg.d_in));
  out.num_objects = bundle.num_objects();
  out.mask = build_relational_mask(bundle);
  out.bundle_feats = std::move(bundle.features);

  out.tokens = query_token_features<float>(parse_query(ex.query), mcfg.d_t);

  if (mcfg.d_frame > 0) {
    const std::int64_t L = out.bundle_feats.shape[1];
    const auto n = static_cast<std::int64_t>(ex.frame_feats.size());
    if (L < 1 || n % L != 0)
      throw DimMismatch("make_train_example: frame feature count not a multiple of L in '" +
                        ex.video_id + "'");
    const std::int64_t df = n / L;
    if (df != mcfg.d_frame)
      throw DimMismatch("make_train_example: frame feature dim " + std::to_string(df) +
                        " vs model d_frame " + std::to_string(mcfg.d_frame));
    out.frame_feats = ad::Tensor<float>({L, df}, ex.frame_feats);
  }
  return out;
}

ad::Var<float> example_loss(ad::Tape<float>& tape, const BoundParams<float>& params,
                            const ModelConfig& mcfg, const TrainConfig& tcfg,
                            const TrainExample& ex, Variant variant, LossBreakdown* breakdown) {
  return example_loss<float>(tape, params, mcfg, tcfg, ex.bundle_feats, ex.num_objects, ex.mask,
                             ex.tokens, ex.frame_feats, ex.gts, ex.fps, variant, breakdown);
}

EpochStats train_epoch(ParamStore<float>& params, SgdState& opt,
                       const std::vector<TrainExample>& data, const ModelConfig& mcfg,
                       const TrainConfig& tcfg, Variant variant, int epoch, Rng& order_rng) {
  mcfg.validate();
  tcfg.validate();
  if (data.empty()) throw ConfigError("train_epoch: empty dataset");
  if (epoch < 0 || epoch >= tcfg.epochs) throw ConfigError("train_epoch: epoch outside schedule");

  const auto n = static_cast<std::int64_t>(data.size());
  const std::int64_t bs = tcfg.batch_size;
  const std::int64_t steps_per_epoch = (n + bs - 1) / bs;
  const std::int64_t total_steps = steps_per_epoch * tcfg.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * tcfg.warmup_epochs;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  order_rng.shuffle(order.begin(), order.end());

  struct WorkerOut {
    std::map<std::string, ad::Tensor<float>> grads;
    double focal = 0.0;
    double diou = 0.0;
    double total = 0.0;
    std::int64_t unassigned = 0;
    std::exception_ptr error;
  };

  EpochStats stats;
  stats.epoch = epoch;
  const int T = tcfg.threads;
  double sum_focal = 0.0, sum_diou = 0.0, sum_total = 0.0;
  std::int64_t unassigned = 0;

  for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
    const std::int64_t step = static_cast<std::int64_t>(epoch) * steps_per_epoch + b;
    const double lr = lr_at(step, total_steps, warmup_steps, tcfg.lr_max);
    stats.lr = lr;
    const std::size_t lo = static_cast<std::size_t>(b * bs);
    const std::size_t hi = std::min(static_cast<std::size_t>(n), lo + static_cast<std::size_t>(bs));

    std::vector<WorkerOut> outs(static_cast<std::size_t>(T));
    auto work = [&](int w) {
      auto& o = outs[static_cast<std::size_t>(w)];
      try {
        for (std::size_t pos = lo + static_cast<std::size_t>(w); pos < hi;
             pos += static_cast<std::size_t>(T)) {
          const TrainExample& ex = data[order[pos]];
          ad::Tape<float> tape;
          const auto bound = bind_params(tape, params, true);
          LossBreakdown bd;
          const auto loss = example_loss(tape, bound, mcfg, tcfg, ex, variant, &bd);
          tape.backward(loss.id);
          for (const auto& [name, var] : bound.vars) {
            ad::Tensor<float> g = tape.grad(var.id);
            const auto it = o.grads.find(name);
            if (it == o.grads.end()) {
              o.grads.emplace(name, std::move(g));
            } else {
              auto& acc = it->second;
              for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
            }
          }
          o.focal += bd.focal;
          o.diou += bd.diou;
          o.total += bd.total;
          o.unassigned += static_cast<std::int64_t>(bd.unassigned.size());
        }
      } catch (const NonFiniteError& e) {
        o.error = std::make_exception_ptr(
            DivergenceError(std::string("loss diverged at step ") + std::to_string(step) + ": " +
                            e.what()));
      } catch (...) {
        o.error = std::current_exception();
      }
    };

    if (T == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(T));
      for (int w = 0; w < T; ++w) pool.emplace_back(work, w);
      for (auto& th : pool) th.join();
    }
    for (const auto& o : outs)
      if (o.error) std::rethrow_exception(o.error);

    // Fixed worker-order reduction keeps batch gradients bit-reproducible.
    std::map<std::string, ad::Tensor<float>> grads;
    for (auto& o : outs) {
      for (auto& [name, g] : o.grads) {
        const auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, std::move(g));
        } else {
          auto& acc = it->second;
          for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
        }
      }
      sum_focal += o.focal;
      sum_diou += o.diou;
      sum_total += o.total;
      unassigned += o.unassigned;
    }
    const float inv = 1.0f / static_cast<float>(hi - lo);
    for (auto& [name, g] : grads)
      for (auto& x : g.data) x *= inv;
    sgd_step(params, grads, opt, lr, tcfg.momentum, tcfg.weight_decay);
  }

  stats.focal = sum_focal / static_cast<double>(n);
  stats.diou = sum_diou / static_cast<double>(n);
  stats.total = sum_total / static_cast<double>(n);
  stats.unassigned_gts = unassigned;
  if (unassigned > 0)
    TMR_LOG_INFO("train epoch " << epoch << ": " << unassigned
                                << " ground truth(s) admitted by no anchor");
  return stats;
}

std::vector<EpochStats> fit(ParamStore<float>& params, const std::vector<TrainExample>& data,
                            const ModelConfig& mcfg, const TrainConfig& tcfg, Variant variant,
                            std::uint64_t seed,
                            const std::function<void(const EpochStats&)>& on_epoch) {
  tcfg.validate();
  SgdState opt;
  Rng order_rng = Rng(seed).fork(fnv1a64("train.order"));
  std::vector<EpochStats> history;
  history.reserve(static_cast<std::size_t>(tcfg.epochs));
  for (int e = 0; e < tcfg.epochs; ++e) {
    history.push_back(train_epoch(params, opt, data, mcfg, tcfg, variant, e, order_rng));
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

}  // namespace tmr

#pragma once

#include <map>
#include <string>
#include <vector>

#include "trackletmr/ops.hpp"
#include "trackletmr/query.hpp"
#include "trackletmr/rng.hpp"
#include "trackletmr/tracking.hpp"
#include "trackletmr/word_embedding.hpp"

namespace tmr {

// Model variants: Temporal skips the spatial sublayer, Unmasked runs it
// densely, Relational restricts it with the graph mask. Frame is the
// frame-branch-only ablation baseline (no tracklet branch at all).
enum class Variant { Temporal, Unmasked, Relational, Frame };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Temporal: return "temporal";
    case Variant::Unmasked: return "unmasked";
    case Variant::Frame: return "frame";
    default: return "relational";
  }
}

inline Variant parse_variant(const std::string& name) {
  if (name == "temporal") return Variant::Temporal;
  if (name == "unmasked") return Variant::Unmasked;
  if (name == "relational") return Variant::Relational;
  if (name == "frame") return Variant::Frame;
  throw ConfigError("unknown variant '" + name + "'");
}

struct ModelConfig {
  int d_model = 256;
  int num_blocks = 7;
  int strided_blocks = 5;
  int heads = 4;
  int mlp_ratio = 4;
  int head_depth = 3;
  double dropout = 0.0;
  // Input plumbing.
  int d_in = 128;    // tracklet feature dim (visual + semantic)
  int d_t = 64;      // text token dim
  int d_frame = 64;  // frame feature dim; 0 disables the frame branch
  int L_max = 64;

  int num_levels() const { return strided_blocks + 1; }

  void validate() const {
    if (d_model < 1 || num_blocks < 1 || heads < 1 || mlp_ratio < 1 || head_depth < 1)
      throw ConfigError("model: counts must be >= 1");
    if (strided_blocks < 0 || strided_blocks >= num_blocks)
      throw ConfigError("model: strided_blocks must be < num_blocks");
    if (d_model % heads != 0) throw ConfigError("model: d_model must be divisible by heads");
    if (dropout != 0.0) throw ConfigError("model: dropout scheduling is unsupported; use 0");
    if (d_in < 1 || d_t < 1 || d_frame < 0 || L_max < 1)
      throw ConfigError("model: invalid input dims");
  }
};

struct RelationalMask {
  std::int64_t n = 0;
  std::vector<std::uint8_t> m;  // n x n, row-major

  std::uint8_t at(std::int64_t i, std::int64_t j) const {
    return m[static_cast<std::size_t>(i * n + j)];
  }
};

// Unit diagonal; object i <-> relation j entries wherever object i is an
// endpoint of relation j; everything else zero. Symmetric by construction.
inline RelationalMask build_relational_mask(const TrackletBundle& bundle) {
  const std::int64_t no = bundle.num_objects();
  const std::int64_t nr = bundle.num_relations();
  RelationalMask mask;
  mask.n = no + nr;
  mask.m.assign(static_cast<std::size_t>(mask.n * mask.n), 0);
  for (std::int64_t i = 0; i < mask.n; ++i) mask.m[static_cast<std::size_t>(i * mask.n + i)] = 1;
  for (std::int64_t i = 0; i < no; ++i)
    for (std::int64_t j = 0; j < nr; ++j)
      if (bundle.adjacency[static_cast<std::size_t>(i * nr + j)]) {
        mask.m[static_cast<std::size_t>(i * mask.n + no + j)] = 1;
        mask.m[static_cast<std::size_t>((no + j) * mask.n + i)] = 1;
      }
  return mask;
}

inline RelationalMask identity_mask(std::int64_t n) {
  RelationalMask mask;
  mask.n = n;
  mask.m.assign(static_cast<std::size_t>(n * n), 0);
  for (std::int64_t i = 0; i < n; ++i) mask.m[static_cast<std::size_t>(i * n + i)] = 1;
  return mask;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
struct ParamStore {
  std::map<std::string, ad::Tensor<S>> tensors;  // sorted name order everywhere

  ad::Tensor<S>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const ad::Tensor<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : tensors) n += t.numel();
    return n;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& [name, tensor] : tensors) out.tensors.emplace(name, tensor.template cast<T>());
    return out;
  }
};

namespace detail {

template <typename S>
ad::Tensor<S> trunc_normal(ad::Shape shape, Rng& rng, double stddev) {
  ad::Tensor<S> t = ad::Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.data) {
    double g = rng.normal();
    while (std::abs(g) > 2.0) g = rng.normal();
    v = static_cast<S>(g * stddev);
  }
  return t;
}

// Strided depthwise convs start as the identity tap, so at initialization the
// query and residual paths are plain subsampling.
template <typename S>
ad::Tensor<S> center_tap(std::int64_t k, std::int64_t channels) {
  ad::Tensor<S> t = ad::Tensor<S>::zeros({k, channels});
  for (std::int64_t c = 0; c < channels; ++c) t.at({k / 2, c}) = S(1);
  return t;
}

}  // namespace detail

// Deterministic initialization: every tensor draws from a substream keyed by
// its own name, so registry layout changes never shift other tensors' values.
template <typename S>
ParamStore<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<S> store;
  const Rng root(seed);
  auto normal = [&](const std::string& name, ad::Shape shape) {
    Rng rng = root.fork(fnv1a64(name));
    store.tensors.emplace(name, detail::trunc_normal<S>(std::move(shape), rng, 0.02));
  };
  auto zeros = [&](const std::string& name, ad::Shape shape) {
    store.tensors.emplace(name, ad::Tensor<S>::zeros(std::move(shape)));
  };
  auto full = [&](const std::string& name, ad::Shape shape, S value) {
    store.tensors.emplace(name, ad::Tensor<S>::full(std::move(shape), value));
  };

  const std::int64_t d = cfg.d_model;
  const std::int64_t dm = static_cast<std::int64_t>(cfg.mlp_ratio) * d;

  normal("text.w", {cfg.d_t, 1});
  normal("text.proj.w", {cfg.d_t, d});
  zeros("text.proj.b", {d});

  auto embed_convs = [&](const std::string& prefix) {
    normal(prefix + "conv1.w", {3, 2 * d, d});
    zeros(prefix + "conv1.b", {d});
    normal(prefix + "conv2.w", {3, d, d});
    zeros(prefix + "conv2.b", {d});
  };
  normal("embed.obj.proj.w", {cfg.d_in, d});
  zeros("embed.obj.proj.b", {d});
  normal("embed.rel.proj.w", {cfg.d_in, d});
  zeros("embed.rel.proj.b", {d});
  embed_convs("embed.");
  normal("pos", {cfg.L_max, d});
  if (cfg.d_frame > 0) {
    normal("frame.proj.w", {cfg.d_frame, d});
    zeros("frame.proj.b", {d});
    embed_convs("frame.");
    normal("frame.pos", {cfg.L_max, d});
  }

  auto attn = [&](const std::string& prefix) {
    for (const char* nm : {"wq", "wk", "wv", "wo"}) normal(prefix + nm, {d, d});
    for (const char* nm : {"bq", "bk", "bv", "bo"}) zeros(prefix + nm, {d});
  };
  auto block = [&](const std::string& prefix, bool strided) {
    full(prefix + "ln1.g", {d}, S(1));
    zeros(prefix + "ln1.b", {d});
    attn(prefix + "tmp.");
    if (strided) {
      store.tensors.emplace(prefix + "qconv.w", detail::center_tap<S>(3, d));
      store.tensors.emplace(prefix + "rconv.w", detail::center_tap<S>(3, d));
    }
    full(prefix + "ln2.g", {d}, S(1));
    zeros(prefix + "ln2.b", {d});
    attn(prefix + "sp.");
    full(prefix + "ln3.g", {d}, S(1));
    zeros(prefix + "ln3.b", {d});
    normal(prefix + "mlp.w1", {d, dm});
    zeros(prefix + "mlp.b1", {dm});
    normal(prefix + "mlp.w2", {dm, d});
    zeros(prefix + "mlp.b2", {d});
  };
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const bool strided = b >= cfg.num_blocks - cfg.strided_blocks;
    block("blk" + std::to_string(b) + ".", strided);
    if (cfg.d_frame > 0) block("fblk" + std::to_string(b) + ".", strided);
  }

  // Trunk norm ahead of the heads, then the two shared conv stacks.
  full("trunk.ln.g", {d}, S(1));
  zeros("trunk.ln.b", {d});
  for (int i = 0; i < cfg.head_depth; ++i) {
    const bool last = i == cfg.head_depth - 1;
    const std::string idx = std::to_string(i);
    normal("cls.conv" + idx + ".w", {3, d, last ? 1 : d});
    if (last)
      full("cls.conv" + idx + ".b", {1}, S(-2));  // initial scores sit near 0.12
    else
      zeros("cls.conv" + idx + ".b", {d});
    normal("reg.conv" + idx + ".w", {3, d, last ? 2 : d});
    zeros("reg.conv" + idx + ".b", {last ? std::int64_t(2) : d});
  }
  return store;
}

// Parameters bound to a tape as leaves.
template <typename S>
struct BoundParams {
  ad::Tape<S>* tape = nullptr;
  std::map<std::string, ad::Var<S>> vars;

  ad::Var<S> operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ConfigError("unbound parameter '" + name + "'");
    return it->second;
  }
};

template <typename S>
BoundParams<S> bind_params(ad::Tape<S>& tape, const ParamStore<S>& store,
                           bool requires_grad = true) {
  BoundParams<S> bound;
  bound.tape = &tape;
  for (const auto& [name, tensor] : store.tensors)
    bound.vars.emplace(name, ad::make_leaf(tape, tensor, requires_grad));
  return bound;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

template <typename S>
struct Pyramid {
  std::vector<ad::Var<S>> levels;  // level k: (ceil(L / 2^k), d_model)
};

template <typename S>
struct ForwardResult {
  Pyramid<S> object_pyramid;
  Pyramid<S> frame_pyramid;  // empty when the frame branch is off
  Pyramid<S> fused;
  ad::Var<S> tracklet_level0;  // (N, L, d_model) before pooling
};

template <typename S>
struct HeadOutputs {
  std::vector<ad::Var<S>> scores;   // level k: (L_k) in (0,1)
  std::vector<ad::Var<S>> offsets;  // level k: (L_k, 2), nonnegative stride units
};

inline std::vector<std::int64_t> pyramid_lengths(const ModelConfig& cfg, std::int64_t L) {
  std::vector<std::int64_t> lengths{L};
  for (int k = 0; k < cfg.strided_blocks; ++k) lengths.push_back((lengths.back() + 1) / 2);
  return lengths;
}

// Frames covered by one anchor cell at pyramid level k.
inline double level_stride(int level) {
  return static_cast<double>(std::int64_t{1} << level);
}

// Center of anchor cell `index` at level k, in seconds.
inline double candidate_time(int level, std::int64_t index, double fps) {
  return (static_cast<double>(index) + 0.5) * level_stride(level) / fps;
}

// Start/end implied by an anchor and its (d_s, d_e) regression in stride units.
inline Moment decode_offsets(int level, std::int64_t index, double fps, double d_s, double d_e) {
  const double t = candidate_time(level, index, fps);
  const double delta = level_stride(level) / fps;
  return Moment{t - d_s * delta, t + d_e * delta};
}

// Token feature matrix (K, d_t) for a parsed query, canonical order: bare
// objects first, then subject/predicate/object of each edge.
template <typename S>
ad::Tensor<S> query_token_features(const QueryGraph& graph, int d_t) {
  std::vector<std::string> tokens;
  for (const auto& obj : graph.objects) tokens.push_back(obj);
  for (const auto& edge : graph.edges) {
    tokens.push_back(graph.objects[edge.subject]);
    tokens.push_back(edge.predicate);
    tokens.push_back(graph.objects[edge.object]);
  }
  if (tokens.empty()) throw ShapeError("query_token_features: empty query");
  ad::Tensor<S> out = ad::Tensor<S>::zeros({static_cast<std::int64_t>(tokens.size()), d_t});
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto emb = token_embedding(tokens[k], d_t);
    for (int i = 0; i < d_t; ++i)
      out.data[k * static_cast<std::size_t>(d_t) + static_cast<std::size_t>(i)] =
          static_cast<S>(emb[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Softmax-weighted convex combination of token features. tokens: (K, d_t),
// result: (1, d_t).
template <typename S>
ad::Var<S> aggregate_text(ad::Tape<S>& tape, const BoundParams<S>& params,
                          const ad::Tensor<S>& tokens) {
  if (tokens.rank() != 2 || tokens.shape[0] < 1)
    throw ShapeError("aggregate_text: tokens must be (K, d_t) with K >= 1");
  auto T = ad::make_const(tape, tokens);
  auto scores = ad::matmul(T, params["text.w"]);         // (K, 1)
  auto row = ad::reshape(scores, {1, tokens.shape[0]});  // (1, K)
  auto attn = ad::softmax(row);
  return ad::matmul(attn, T);  // (1, d_t)
}

namespace detail {

// Multi-head attention. q: (B, Lq, d), kv: (B, Lk, d). A non-null mask
// (shaped (B, H, Lq, Lk)) restricts the softmax support.
template <typename S>
ad::Var<S> mha(const BoundParams<S>& params, const std::string& prefix, ad::Var<S> q_in,
               ad::Var<S> kv_in, int heads, const ad::Tensor<S>* mask) {
  const auto& qs = q_in.val().shape;
  const auto& ks = kv_in.val().shape;
  const std::int64_t B = qs[0], Lq = qs[1], d = qs[2], Lk = ks[1];
  const std::int64_t H = heads, dh = d / H;

  auto split = [&](ad::Var<S> x, std::int64_t Lx) {
    return ad::permute(ad::reshape(x, {B, Lx, H, dh}), {0, 2, 1, 3});  // (B,H,Lx,dh)
  };
  auto q = split(ad::linear(q_in, params[prefix + "wq"], params[prefix + "bq"]), Lq);
  auto k = split(ad::linear(kv_in, params[prefix + "wk"], params[prefix + "bk"]), Lk);
  auto v = split(ad::linear(kv_in, params[prefix + "wv"], params[prefix + "bv"]), Lk);

  auto scores = ad::scale(ad::matmul(q, ad::permute(k, {0, 1, 3, 2})),
                          static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto attn = mask ? ad::masked_softmax(scores, *mask) : ad::softmax(scores);
  auto ctx = ad::matmul(attn, v);  // (B,H,Lq,dh)
  auto merged = ad::reshape(ad::permute(ctx, {0, 2, 1, 3}), {B, Lq, d});
  return ad::linear(merged, params[prefix + "wo"], params[prefix + "bo"]);
}

template <typename S>
ad::Var<S> layer_norm_p(const BoundParams<S>& params, const std::string& prefix, ad::Var<S> x) {
  return ad::layer_norm(x, params[prefix + "g"], params[prefix + "b"]);
}

// Tiles an n x n binary mask to (L, H, n, n).
template <typename S>
ad::Tensor<S> tile_mask(const RelationalMask& mask, std::int64_t L, std::int64_t H) {
  const std::int64_t n = mask.n;
  ad::Tensor<S> out = ad::Tensor<S>::zeros({L, H, n, n});
  std::vector<S> base(static_cast<std::size_t>(n * n));
  for (std::size_t i = 0; i < base.size(); ++i) base[i] = static_cast<S>(mask.m[i]);
  for (std::int64_t r = 0; r < L * H; ++r)
    std::copy(base.begin(), base.end(), out.data.begin() + r * n * n);
  return out;
}

// One transformer block: pre-norm temporal attention (downsampled query and
// residual paths when stride = 2), optional pre-norm spatial attention across
// tracklets, pre-norm MLP. x: (N, L, d) -> (N, ceil(L/stride), d).
template <typename S>
ad::Var<S> relational_block(const BoundParams<S>& params, const std::string& prefix,
                            ad::Var<S> x, const ModelConfig& cfg, std::int64_t stride,
                            Variant variant, const RelationalMask& mask) {
  const std::int64_t N = x.val().shape[0];
  const std::int64_t H = cfg.heads;

  // (1) temporal attention within each tracklet.
  auto h = layer_norm_p(params, prefix + "ln1.", x);
  ad::Var<S> y;
  if (stride == 1) {
    y = ad::add(x, mha<S>(params, prefix + "tmp.", h, h, cfg.heads, nullptr));
  } else {
    auto hq = ad::depthwise_conv1d(h, params[prefix + "qconv.w"], stride);
    auto res = ad::depthwise_conv1d(x, params[prefix + "rconv.w"], stride);
    y = ad::add(res, mha<S>(params, prefix + "tmp.", hq, h, cfg.heads, nullptr));
  }

  // (2) spatial attention across tracklets at each timestep.
  if (variant != Variant::Temporal) {
    const std::int64_t Lc = y.val().shape[1];
    auto hs = layer_norm_p(params, prefix + "ln2.", y);
    auto sp_in = ad::permute(hs, {1, 0, 2});  // (Lc, N, d)
    ad::Var<S> sp;
    if (variant == Variant::Relational && N > 1) {
      ad::Tensor<S> tiled = tile_mask<S>(mask, Lc, H);
      sp = mha<S>(params, prefix + "sp.", sp_in, sp_in, cfg.heads, &tiled);
    } else {
      sp = mha<S>(params, prefix + "sp.", sp_in, sp_in, cfg.heads, nullptr);
    }
    y = ad::add(y, ad::permute(sp, {1, 0, 2}));
  }

  // (3) position-wise MLP.
  auto m = layer_norm_p(params, prefix + "ln3.", y);
  auto mid = ad::gelu(ad::linear(m, params[prefix + "mlp.w1"], params[prefix + "mlp.b1"]));
  auto out = ad::linear(mid, params[prefix + "mlp.w2"], params[prefix + "mlp.b2"]);
  return ad::add(y, out);
}

// Embedding tail shared by both branches: concat the text channel, two k=3
// convs with an activation between, add positional embeddings.
// projected: (N, L, d) -> (N, L, d).
template <typename S>
ad::Var<S> embed_tail(const BoundParams<S>& params, const ModelConfig& cfg,
                      const std::string& conv_prefix, const std::string& pos_name,
                      ad::Var<S> projected, ad::Var<S> tproj) {
  const std::int64_t N = projected.val().shape[0];
  const std::int64_t L = projected.val().shape[1];
  auto ttile = ad::broadcast_to(ad::reshape(tproj, {cfg.d_model}), {N, L});
  auto cat = ad::concat<S>({projected, ttile}, 2);  // (N, L, 2d)
  auto c1 = ad::gelu(
      ad::conv1d(cat, params[conv_prefix + "conv1.w"], params[conv_prefix + "conv1.b"]));
  auto emb = ad::conv1d(c1, params[conv_prefix + "conv2.w"], params[conv_prefix + "conv2.b"]);
  auto pos = ad::broadcast_to(ad::slice_axis0(params[pos_name], 0, L), {N});
  return ad::add(emb, pos);
}

template <typename S>
struct StackOut {
  Pyramid<S> pyramid;
  ad::Var<S> level0;  // (N, L, d) before pooling
};

// Runs the block stack: the first num_blocks - strided_blocks blocks at
// stride 1, the rest at stride 2. Level 0 is the last stride-1 output; each
// strided block adds one level. Levels are max-pooled over tracklets.
template <typename S>
StackOut<S> run_stack(const BoundParams<S>& params, const ModelConfig& cfg,
                      const std::string& blk_prefix, ad::Var<S> x, Variant variant,
                      const RelationalMask& mask) {
  StackOut<S> out;
  const int first_strided = cfg.num_blocks - cfg.strided_blocks;
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const std::int64_t stride = b >= first_strided ? 2 : 1;
    x = relational_block(params, blk_prefix + std::to_string(b) + ".", x, cfg, stride,
                         variant, mask);
    if (b == first_strided - 1) {
      out.level0 = x;
      out.pyramid.levels.push_back(ad::max_over_axis(x, 0));
    } else if (b >= first_strided) {
      out.pyramid.levels.push_back(ad::max_over_axis(x, 0));
    }
  }
  return out;
}

template <typename S>
StackOut<S> frame_stack(ad::Tape<S>& tape, const BoundParams<S>& params,
                        const ModelConfig& cfg, const ad::Tensor<S>& frame_feats,
                        ad::Var<S> tproj) {
  const std::int64_t L = frame_feats.shape.empty() ? 0 : frame_feats.shape[0];
  if (frame_feats.rank() != 2 || frame_feats.shape[1] != cfg.d_frame)
    throw ShapeError("forward: frame feats must be (L, d_frame)");
  if (L > cfg.L_max) throw ShapeError("forward: L exceeds L_max");
  auto ff = ad::reshape(ad::make_const(tape, frame_feats), {1, L, cfg.d_frame});
  auto fp = ad::linear(ff, params["frame.proj.w"], params["frame.proj.b"]);
  auto fx = embed_tail(params, cfg, "frame.", "frame.pos", fp, tproj);
  const RelationalMask fmask = identity_mask(1);
  return run_stack(params, cfg, "fblk", fx, Variant::Relational, fmask);
}

}  // namespace detail

// Full forward: tracklet branch plus (when d_frame > 0 and frame_feats is
// non-empty) the frame branch, fused level-wise by addition. bundle_feats is
// the dense (N, L, d_in) tensor, objects before relations.
template <typename S>
ForwardResult<S> forward(ad::Tape<S>& tape, const BoundParams<S>& params,
                         const ModelConfig& cfg, const ad::Tensor<S>& bundle_feats,
                         std::int64_t num_objects, const RelationalMask& mask,
                         const ad::Tensor<S>& tokens, Variant variant,
                         const ad::Tensor<S>& frame_feats = {}) {
  cfg.validate();
  if (variant == Variant::Frame)
    throw ConfigError("forward: the frame baseline has no tracklet branch; use forward_frame_only");
  if (bundle_feats.rank() != 3 || bundle_feats.shape[2] != cfg.d_in)
    throw ShapeError("forward: bundle feats must be (N, L, d_in)");
  const std::int64_t N = bundle_feats.shape[0];
  const std::int64_t L = bundle_feats.shape[1];
  const std::int64_t NR = N - num_objects;
  if (num_objects < 1 || NR < 0) throw ShapeError("forward: bad object count");
  if (mask.n != N) throw ShapeError("forward: mask size disagrees with tracklet count");
  if (L > cfg.L_max) throw ShapeError("forward: L exceeds L_max");

  auto tbar = aggregate_text(tape, params, tokens);                             // (1, d_t)
  auto tproj = ad::linear(tbar, params["text.proj.w"], params["text.proj.b"]);  // (1, d)

  auto feats = ad::make_const(tape, bundle_feats);
  auto obj = ad::slice_axis0(feats, 0, num_objects);
  auto obj_p = ad::linear(obj, params["embed.obj.proj.w"], params["embed.obj.proj.b"]);
  ad::Var<S> projected = obj_p;
  if (NR > 0) {
    auto rel = ad::slice_axis0(feats, num_objects, NR);
    auto rel_p = ad::linear(rel, params["embed.rel.proj.w"], params["embed.rel.proj.b"]);
    projected = ad::concat<S>({obj_p, rel_p}, 0);
  }
  auto x = detail::embed_tail(params, cfg, "embed.", "pos", projected, tproj);

  ForwardResult<S> result;
  auto stack = detail::run_stack(params, cfg, "blk", x, variant, mask);
  result.object_pyramid = stack.pyramid;
  result.tracklet_level0 = stack.level0;

  const bool has_frame = cfg.d_frame > 0 && !frame_feats.data.empty();
  if (has_frame)
    result.frame_pyramid = detail::frame_stack(tape, params, cfg, frame_feats, tproj).pyramid;

  for (std::size_t k = 0; k < result.object_pyramid.levels.size(); ++k) {
    auto level = result.object_pyramid.levels[k];
    if (has_frame) level = ad::add(level, result.frame_pyramid.levels[k]);
    result.fused.levels.push_back(level);
  }
  return result;
}

// Frame-only forward, the ablation baseline: the frame branch alone feeds the
// heads. frame_feats: (L, d_frame).
template <typename S>
ForwardResult<S> forward_frame_only(ad::Tape<S>& tape, const BoundParams<S>& params,
                                    const ModelConfig& cfg, const ad::Tensor<S>& tokens,
                                    const ad::Tensor<S>& frame_feats) {
  cfg.validate();
  if (cfg.d_frame < 1) throw ConfigError("frame-only forward needs d_frame > 0");
  auto tbar = aggregate_text(tape, params, tokens);
  auto tproj = ad::linear(tbar, params["text.proj.w"], params["text.proj.b"]);
  auto stack = detail::frame_stack(tape, params, cfg, frame_feats, tproj);
  ForwardResult<S> result;
  result.frame_pyramid = stack.pyramid;
  result.fused = stack.pyramid;
  result.tracklet_level0 = stack.level0;
  return result;
}

// Shared classification/localization conv stacks over every pyramid level,
// behind a final trunk norm.
template <typename S>
HeadOutputs<S> heads(const BoundParams<S>& params, const ModelConfig& cfg,
                     const Pyramid<S>& pyramid) {
  HeadOutputs<S> out;
  for (const auto& level : pyramid.levels) {
    auto h = ad::layer_norm(level, params["trunk.ln.g"], params["trunk.ln.b"]);
    auto c = h;
    auto r = h;
    for (int i = 0; i < cfg.head_depth; ++i) {
      const std::string idx = std::to_string(i);
      c = ad::conv1d(c, params["cls.conv" + idx + ".w"], params["cls.conv" + idx + ".b"]);
      r = ad::conv1d(r, params["reg.conv" + idx + ".w"], params["reg.conv" + idx + ".b"]);
      if (i + 1 < cfg.head_depth) {
        c = ad::gelu(c);
        r = ad::gelu(r);
      }
    }
    const std::int64_t Lk = level.val().shape[0];
    out.scores.push_back(ad::sigmoid(ad::reshape(c, {Lk})));
    out.offsets.push_back(ad::softplus(r));
  }
  return out;
}

// Mean over d_model of the level-0 tracklet features: one curve of length L
// per tracklet row.
template <typename S>
std::vector<std::vector<double>> activation_curves(const ForwardResult<S>& result) {
  const auto& t = result.tracklet_level0.val();
  const std::int64_t N = t.shape[0], L = t.shape[1], d = t.shape[2];
  std::vector<std::vector<double>> curves(
      static_cast<std::size_t>(N), std::vector<double>(static_cast<std::size_t>(L), 0.0));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t l = 0; l < L; ++l) {
      double sum = 0.0;
      for (std::int64_t k = 0; k < d; ++k)
        sum += static_cast<double>(t.data[static_cast<std::size_t>((n * L + l) * d + k)]);
      curves[static_cast<std::size_t>(n)][static_cast<std::size_t>(l)] =
          sum / static_cast<double>(d);
    }
  return curves;
}

}  // namespace tmr

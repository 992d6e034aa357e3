#include "trackletmr/gradcheck_suite.hpp"

#include <cmath>
#include <utility>

#include "trackletmr/gradcheck.hpp"
#include "trackletmr/model.hpp"
#include "trackletmr/query.hpp"
#include "trackletmr/rng.hpp"
#include "trackletmr/tracking.hpp"
#include "trackletmr/train.hpp"

namespace tmr {

namespace {

using ad::Shape;
using ad::Tensor;
using ad::Var;
using Tape = ad::Tape<double>;
using DVar = Var<double>;

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (auto& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

// Keeps |x| >= margin so kinked ops (relu, clamp, min/max) see stable signs
// under the finite-difference step.
Tensor<double> rand_away_from_zero(Rng& rng, Shape shape, double margin) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (auto& x : t.data) {
    const double mag = rng.uniform(margin, 1.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

using Build = std::function<DVar(Tape&, const std::vector<DVar>&)>;

}  // namespace

std::vector<NamedCheck> op_gradient_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NamedCheck> out;

  auto check = [&](const std::string& name, const Build& build,
                   std::vector<Tensor<double>> inputs) {
    const auto rep = ad::grad_check(build, inputs);
    out.push_back({name, rep.max_rel_err});
  };
  auto scalarize = [](DVar v) { return ad::sum_all(ad::mul(v, ad::add_const(v, 0.25))); };

  const Shape s23{2, 3};
  auto a = rand_tensor(rng, s23, -1.0, 1.0);
  auto b = rand_tensor(rng, s23, 0.5, 1.5);  // positive: safe divisor/log input

  check("add", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::add(v[0], v[1])); },
        {a, b});
  check("sub", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::sub(v[0], v[1])); },
        {a, b});
  check("mul", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::mul(v[0], v[1])); },
        {a, b});
  check("div", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::div(v[0], v[1])); },
        {a, b});
  {
    auto m1 = rand_away_from_zero(rng, s23, 0.3);
    auto m2 = rand_away_from_zero(rng, s23, 0.3);
    // Guarantee elementwise separation so min/max branches are FD-stable.
    for (std::size_t i = 0; i < m1.data.size(); ++i)
      if (std::abs(m1.data[i] - m2.data[i]) < 0.2) m2.data[i] += 0.5;
    check("minimum",
          [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::minimum(v[0], v[1])); },
          {m1, m2});
    check("maximum",
          [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::maximum(v[0], v[1])); },
          {m1, m2});
    check("relu", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::relu(v[0])); },
          {m1});
    check("clamp",
          [&](Tape&, const std::vector<DVar>& v) {
            return scalarize(ad::clamp(v[0], -0.55, 0.55));
          },
          {m1});
  }
  check("neg", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::neg(v[0])); }, {a});
  check("scale", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::scale(v[0], 1.7)); },
        {a});
  check("add_const",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::add_const(v[0], 0.9)); },
        {a});
  check("pow_const",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::pow_const(v[0], 2.5)); },
        {b});
  check("exp", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::exp(v[0])); }, {a});
  check("log", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::log(v[0])); }, {b});
  check("sigmoid",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::sigmoid(v[0])); }, {a});
  check("softplus",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::softplus(v[0])); }, {a});
  check("gelu", [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::gelu(v[0])); }, {a});

  check("reshape",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::reshape(v[0], {3, 2})); },
        {a});
  check("permute",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::permute(v[0], {2, 0, 1}));
        },
        {rand_tensor(rng, {2, 3, 4}, -1.0, 1.0)});
  check("broadcast_to",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::broadcast_to(v[0], {4}));
        },
        {a});
  check("concat",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::concat(std::vector<DVar>{v[0], v[1]}, 1));
        },
        {a, rand_tensor(rng, {2, 2}, -1.0, 1.0)});
  check("slice_axis0",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::slice_axis0(v[0], 1, 2));
        },
        {rand_tensor(rng, {4, 3}, -1.0, 1.0)});

  check("sum_all", [&](Tape&, const std::vector<DVar>& v) { return ad::sum_all(v[0]); }, {a});
  check("sum_over_axis",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::sum_over_axis(v[0], 1));
        },
        {rand_tensor(rng, {2, 3, 2}, -1.0, 1.0)});
  check("mean_over_axis",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::mean_over_axis(v[0], 0));
        },
        {rand_tensor(rng, {3, 2}, -1.0, 1.0)});
  {
    // Separated entries keep the argmax stable under differencing.
    Tensor<double> mx({2, 4}, {0.1, 0.9, -0.4, 0.35, -0.8, -0.1, 0.6, -0.3});
    check("max_over_axis",
          [&](Tape&, const std::vector<DVar>& v) {
            return scalarize(ad::max_over_axis(v[0], 1));
          },
          {mx});
  }

  check("matmul",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::matmul(v[0], v[1])); },
        {rand_tensor(rng, {2, 4}, -1.0, 1.0), rand_tensor(rng, {4, 3}, -1.0, 1.0)});
  check("linear",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::linear(v[0], v[1], v[2]));
        },
        {rand_tensor(rng, {2, 3, 4}, -1.0, 1.0), rand_tensor(rng, {4, 3}, -1.0, 1.0),
         rand_tensor(rng, {3}, -0.5, 0.5)});
  check("softmax",
        [&](Tape&, const std::vector<DVar>& v) { return scalarize(ad::softmax(v[0])); },
        {rand_tensor(rng, {3, 4}, -1.5, 1.5)});
  {
    Tensor<double> mask = Tensor<double>::zeros({3, 4});
    const double pattern[12] = {1, 1, 0, 1, 0, 1, 1, 0, 1, 1, 1, 1};
    for (std::size_t i = 0; i < 12; ++i) mask.data[i] = pattern[i];
    check("masked_softmax",
          [&, mask](Tape&, const std::vector<DVar>& v) {
            return scalarize(ad::masked_softmax(v[0], mask));
          },
          {rand_tensor(rng, {3, 4}, -1.5, 1.5)});
  }
  check("layer_norm",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::layer_norm(v[0], v[1], v[2]));
        },
        {rand_tensor(rng, {2, 5}, -1.0, 1.0), rand_tensor(rng, {5}, 0.5, 1.5),
         rand_tensor(rng, {5}, -0.5, 0.5)});
  check("conv1d",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::conv1d(v[0], v[1], v[2], 2));
        },
        {rand_tensor(rng, {2, 6, 3}, -1.0, 1.0), rand_tensor(rng, {3, 3, 4}, -0.7, 0.7),
         rand_tensor(rng, {4}, -0.3, 0.3)});
  check("depthwise_conv1d",
        [&](Tape&, const std::vector<DVar>& v) {
          return scalarize(ad::depthwise_conv1d(v[0], v[1], 2));
        },
        {rand_tensor(rng, {2, 6, 3}, -1.0, 1.0), rand_tensor(rng, {3, 3}, -0.7, 0.7)});

  return out;
}

NamedCheck end_to_end_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig mcfg;
  mcfg.d_model = 16;
  mcfg.num_blocks = 2;
  mcfg.strided_blocks = 1;
  mcfg.heads = 2;
  mcfg.mlp_ratio = 2;
  mcfg.head_depth = 2;
  mcfg.d_in = 16;
  mcfg.d_t = 8;
  mcfg.d_frame = 8;
  mcfg.L_max = 8;

  const std::int64_t L = 8;
  auto make_slots = [&](int dim) {
    std::vector<TrackSlot> slots(static_cast<std::size_t>(L));
    for (auto& s : slots) {
      s.visual.resize(static_cast<std::size_t>(dim));
      s.semantic.resize(static_cast<std::size_t>(dim));
      for (auto& x : s.visual) x = static_cast<float>(rng.uniform(-1.0, 1.0));
      for (auto& x : s.semantic) x = static_cast<float>(rng.uniform(-1.0, 1.0));
      s.conf = 1.0f;
    }
    return slots;
  };
  std::vector<std::uint8_t> all(static_cast<std::size_t>(L), 1);
  ObjectTracklet person{0, "person", all, make_slots(8)};
  ObjectTracklet laptop{1, "laptop", all, make_slots(8)};
  RelationshipTracklet opens{0, 1, "opens", all, make_slots(8)};
  TrackletBundle bundle = build_bundle({person, laptop}, {opens}, L, 16);
  const RelationalMask mask = build_relational_mask(bundle);

  Tensor<double> feats = Tensor<double>::zeros(bundle.features.shape);
  for (std::size_t i = 0; i < feats.data.size(); ++i)
    feats.data[i] = static_cast<double>(bundle.features.data[i]);
  const Tensor<double> tokens =
      query_token_features<double>(parse_query("person opens laptop"), mcfg.d_t);
  const Tensor<double> frames = rand_tensor(rng, {L, mcfg.d_frame}, -1.0, 1.0);
  const std::vector<Moment> gts{Moment{1.0, 3.0}};

  ParamStore<double> store = init_params<double>(mcfg, seed);
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs;
  for (const auto& [name, tensor] : store.tensors) {
    names.push_back(name);
    inputs.push_back(tensor);
  }

  TrainConfig tcfg;
  auto build = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& vars) {
    BoundParams<double> bound;
    bound.tape = &tape;
    for (std::size_t i = 0; i < names.size(); ++i) bound.vars.emplace(names[i], vars[i]);
    return example_loss<double>(tape, bound, mcfg, tcfg, feats, bundle.num_objects(), mask,
                                tokens, frames, gts, 1.0, Variant::Relational);
  };
  const auto rep = ad::grad_check(build, inputs);
  return {"end_to_end_loss", rep.max_rel_err};
}

}  // namespace tmr

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "trackletmr/gradcheck.hpp"
#include "trackletmr/ops.hpp"
#include "trackletmr/rng.hpp"

using namespace tmr::ad;
using tmr::Rng;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(s), rng, stddev);
}

// Random values bounded away from zero, for ops with a kink at 0.
Tensor<double> randn_away_from(Shape s, std::uint64_t seed, double gap) {
  Tensor<double> t = randn(std::move(s), seed);
  for (auto& v : t.data)
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  return t;
}

double check1(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
              const Tensor<double>& x) {
  return grad_check(
             [&](Tape<double>& t, const std::vector<Var<double>>& xs) { return f(t, xs[0]); },
             {x})
      .max_rel_err;
}

double check2(const std::function<Var<double>(Tape<double>&, Var<double>, Var<double>)>& f,
              const Tensor<double>& a, const Tensor<double>& b) {
  return grad_check(
             [&](Tape<double>& t, const std::vector<Var<double>>& xs) {
               return f(t, xs[0], xs[1]);
             },
             {a, b})
      .max_rel_err;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("matmul worked examples") {
  Tape<double> t;
  auto eye = make_leaf(t, Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  auto x = make_leaf(t, randn({3, 4}, 9));
  auto y = matmul(eye, x);
  for (std::size_t i = 0; i < x.val().data.size(); ++i)
    CHECK(y.val().data[i] == doctest::Approx(x.val().data[i]).epsilon(1e-14));

  auto a = make_leaf(t, Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = make_leaf(t, Tensor<double>({2, 1}, {1, 1}));
  auto c = matmul(a, b);
  CHECK(c.val().data[0] == 3.0);
  CHECK(c.val().data[1] == 7.0);
}

TEST_CASE("matmul matches naive triple-loop oracle within 1e-12") {
  const auto A = randn({4, 5}, 11);
  const auto B = randn({5, 3}, 12);
  std::vector<double> want(4 * 3, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 5; ++k)
        want[static_cast<std::size_t>(i * 3 + j)] +=
            A.data[static_cast<std::size_t>(i * 5 + k)] * B.data[static_cast<std::size_t>(k * 3 + j)];

  Tape<double> t;
  auto c = matmul(make_leaf(t, A), make_leaf(t, B));
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(std::abs(c.val().data[i] - want[i]) < 1e-12);
}

TEST_CASE("batched matmul with shared right operand") {
  const auto A = randn({2, 3, 4}, 21);
  const auto B = randn({4, 2}, 22);
  Tape<double> t;
  auto c = matmul(make_leaf(t, A), make_leaf(t, B));
  CHECK(c.val().shape == Shape{2, 3, 2});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) {
        double want = 0.0;
        for (int k = 0; k < 4; ++k)
          want += A.at({n, i, k}) * B.at({k, j});
        CHECK(c.val().at({n, i, j}) == doctest::Approx(want).epsilon(1e-12));
      }
}

TEST_CASE("matmul shape errors") {
  Tape<double> t;
  auto a = make_leaf(t, randn({2, 3}, 1));
  auto b = make_leaf(t, randn({4, 2}, 2));
  CHECK_THROWS_AS((void)matmul(a, b), tmr::ShapeError);
}

TEST_CASE("masked_softmax worked examples") {
  Tape<double> t;
  auto x1 = make_leaf(t, Tensor<double>({2}, {0, 0}));
  auto y1 = masked_softmax(x1, Tensor<double>({2}, {1, 1}));
  CHECK(y1.val().data[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y1.val().data[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto x2 = make_leaf(t, Tensor<double>({2}, {5, -3}));
  auto y2 = masked_softmax(x2, Tensor<double>({2}, {1, 0}));
  CHECK(y2.val().data[0] == 1.0);
  CHECK(y2.val().data[1] == 0.0);

  auto x3 = make_leaf(t, Tensor<double>({3}, {1, 2, 3}));
  auto y3 = masked_softmax(x3, Tensor<double>({3}, {1, 0, 1}));
  const double e1 = std::exp(1.0), e3 = std::exp(3.0);
  CHECK(y3.val().data[0] == doctest::Approx(e1 / (e1 + e3)).epsilon(1e-12));
  CHECK(y3.val().data[1] == 0.0);
  CHECK(y3.val().data[2] == doctest::Approx(e3 / (e1 + e3)).epsilon(1e-12));
  CHECK(y3.val().data[0] == doctest::Approx(0.1192).epsilon(1e-3));
  CHECK(y3.val().data[2] == doctest::Approx(0.8808).epsilon(1e-3));
}

TEST_CASE("masked_softmax fully masked row throws") {
  Tape<double> t;
  auto x = make_leaf(t, Tensor<double>({2, 2}, {1, 2, 3, 4}));
  CHECK_THROWS_AS((void)masked_softmax(x, Tensor<double>({2, 2}, {1, 1, 0, 0})),
                  tmr::EmptyRowError);
}

TEST_CASE("masked_softmax shift invariance on unmasked entries") {
  const auto x = randn({4, 6}, 31);
  Tensor<double> mask = Tensor<double>::zeros({4, 6});
  Rng rng(32);
  for (int r = 0; r < 4; ++r) {
    mask.at({r, static_cast<std::int64_t>(rng.uniform_int(0, 5))}) = 1.0;
    mask.at({r, static_cast<std::int64_t>(rng.uniform_int(0, 5))}) = 1.0;
    mask.at({r, static_cast<std::int64_t>(rng.uniform_int(0, 5))}) = 1.0;
  }
  Tensor<double> shifted = x;
  for (std::size_t i = 0; i < shifted.data.size(); ++i) shifted.data[i] += 17.25;

  Tape<double> t;
  auto y1 = masked_softmax(make_leaf(t, x), mask);
  auto y2 = masked_softmax(make_leaf(t, shifted), mask);
  for (std::size_t i = 0; i < y1.val().data.size(); ++i)
    CHECK(y1.val().data[i] == doctest::Approx(y2.val().data[i]).epsilon(1e-12));
}

TEST_CASE("conv1d output lengths follow the ceil rule") {
  Tape<double> t;
  auto w = make_leaf(t, randn({3, 2, 5}, 41, 0.3));
  auto b = make_leaf(t, randn({5}, 42, 0.1));
  auto x8 = make_leaf(t, randn({8, 2}, 43));
  CHECK(conv1d(x8, w, b, 2).val().shape == Shape{4, 5});
  CHECK(conv1d(x8, w, b, 1).val().shape == Shape{8, 5});
  auto x7 = make_leaf(t, randn({7, 2}, 44));
  CHECK(conv1d(x7, w, b, 2).val().shape == Shape{4, 5});
  CHECK(conv1d(x7, w, b, 1).val().shape == Shape{7, 5});
}

TEST_CASE("conv1d matches naive oracle (stride 1 and 2)") {
  const std::int64_t L = 9, Cin = 3, Cout = 2, K = 3;
  const auto X = randn({L, Cin}, 51);
  const auto W = randn({K, Cin, Cout}, 52);
  const auto B = randn({Cout}, 53);
  for (std::int64_t stride : {std::int64_t(1), std::int64_t(2)}) {
    const std::int64_t out_len = (L + stride - 1) / stride;
    const std::int64_t pad_total = std::max<std::int64_t>((out_len - 1) * stride + K - L, 0);
    const std::int64_t pad_left = pad_total / 2;
    Tape<double> t;
    auto y = conv1d(make_leaf(t, X), make_leaf(t, W), make_leaf(t, B), stride);
    for (std::int64_t o = 0; o < out_len; ++o)
      for (std::int64_t co = 0; co < Cout; ++co) {
        double want = B.at({co});
        for (std::int64_t k = 0; k < K; ++k) {
          const std::int64_t src = o * stride + k - pad_left;
          if (src < 0 || src >= L) continue;
          for (std::int64_t ci = 0; ci < Cin; ++ci)
            want += X.at({src, ci}) * W.at({k, ci, co});
        }
        CHECK(y.val().at({o, co}) == doctest::Approx(want).epsilon(1e-12));
      }
  }
}

TEST_CASE("relu and layer_norm examples") {
  Tape<double> t;
  auto x = make_leaf(t, Tensor<double>({3}, {-1, 0, 2}));
  auto y = relu(x);
  CHECK(y.val().data[0] == 0.0);
  CHECK(y.val().data[1] == 0.0);
  CHECK(y.val().data[2] == 2.0);

  auto c = make_leaf(t, Tensor<double>::full({4}, 3.7));
  auto g = make_leaf(t, Tensor<double>::full({4}, 1.0));
  auto b = make_leaf(t, Tensor<double>::zeros({4}));
  auto ln = layer_norm(c, g, b);
  for (double v : ln.val().data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("layer_norm normalizes rows") {
  Tape<double> t;
  auto x = make_leaf(t, randn({5, 8}, 61));
  auto g = make_leaf(t, Tensor<double>::full({8}, 1.0));
  auto b = make_leaf(t, Tensor<double>::zeros({8}));
  auto y = layer_norm(x, g, b);
  for (int r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (int j = 0; j < 8; ++j) mean += y.val().at({r, j});
    mean /= 8;
    for (int j = 0; j < 8; ++j) {
      const double d = y.val().at({r, j}) - mean;
      var += d * d;
    }
    var /= 8;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("non-finite op outputs are rejected") {
  Tape<double> t;
  auto x = make_leaf(t, Tensor<double>({2}, {-1.0, 2.0}));
  CHECK_THROWS_AS((void)tmr::ad::log(x), tmr::NonFiniteError);
}

TEST_CASE("x squared at 3 differentiates to 6") {
  Tape<double> t;
  auto x = make_leaf(t, Tensor<double>::scalar(3.0));
  auto y = mul(x, x);
  t.backward(y.id);
  CHECK(x.grad().data[0] == doctest::Approx(6.0).epsilon(1e-12));

  const double rel = check1([](Tape<double>&, Var<double> v) { return mul(v, v); },
                            Tensor<double>::scalar(3.0));
  CHECK(rel < 1e-9);
}

TEST_CASE("unused parameter receives exactly zero gradient") {
  Tape<double> t;
  auto a = make_leaf(t, randn({3, 2}, 71));
  auto b = make_leaf(t, randn({3, 2}, 72));
  auto y = sum_all(mul(a, a));
  t.backward(y.id);
  for (double v : b.grad().data) CHECK(v == 0.0);
  CHECK(b.grad().shape == b.val().shape);
}

TEST_CASE("grad: elementwise binary ops") {
  const auto a = randn({3, 4}, 81);
  const auto bdiv = randn_away_from({3, 4}, 82, 0.5);
  auto sum_of = [](Tape<double>&, Var<double> v) { return sum_all(v); };
  (void)sum_of;

  CHECK(check2([](Tape<double>&, Var<double> x, Var<double> y) { return sum_all(mul(add(x, y), y)); }, a, bdiv) < kTol);
  CHECK(check2([](Tape<double>&, Var<double> x, Var<double> y) { return sum_all(mul(sub(x, y), x)); }, a, bdiv) < kTol);
  CHECK(check2([](Tape<double>&, Var<double> x, Var<double> y) { return sum_all(div(x, y)); }, a, bdiv) < kTol);

  // Keep min/max inputs separated so finite differences do not cross a tie.
  auto b2 = bdiv;
  for (std::size_t i = 0; i < b2.data.size(); ++i)
    if (std::abs(a.data[i] - b2.data[i]) < 0.1) b2.data[i] += 0.5;
  CHECK(check2([](Tape<double>&, Var<double> x, Var<double> y) { return sum_all(mul(minimum(x, y), maximum(x, y))); }, a, b2) < kTol);
}

TEST_CASE("grad: elementwise unary ops") {
  const auto x = randn_away_from({4, 3}, 91, 0.15);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(neg(v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(scale(v, 2.5)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(mul(add_const(v, 1.5), v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(mul(relu(v), v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(gelu(v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(sigmoid(v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(softplus(v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(tmr::ad::exp(scale(v, 0.5))); }, x) < kTol);

  // log and pow need positive inputs.
  Tensor<double> pos = x;
  for (auto& v : pos.data) v = std::abs(v) + 0.5;
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(tmr::ad::log(v)); }, pos) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(pow_const(v, 2.0)); }, pos) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(pow_const(v, 0.5)); }, pos) < kTol);

  // clamp: keep samples away from the clamp boundaries.
  Tensor<double> cx = randn({5, 5}, 92);
  for (auto& v : cx.data)
    if (std::abs(std::abs(v) - 1.0) < 0.2) v *= 1.5;
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(mul(clamp(v, -1.0, 1.0), v)); }, cx) < kTol);
}

TEST_CASE("grad: shape ops") {
  const auto x = randn({2, 3, 4}, 101);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          return sum_all(mul(reshape(v, {6, 4}), reshape(v, {6, 4})));
        }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto p = permute(v, {2, 0, 1});
          return sum_all(mul(p, p));
        }, x) < kTol);
  const auto small = randn({3}, 102);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto b = broadcast_to(v, {4, 2});
          return sum_all(mul(b, b));
        }, small) < kTol);
  CHECK(check2([](Tape<double>&, Var<double> a, Var<double> b) {
          auto c = concat<double>({a, b}, 1);
          return sum_all(mul(c, c));
        }, randn({2, 3}, 103), randn({2, 5}, 104)) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto s = slice_axis0(v, 1, 2);
          return sum_all(mul(s, s));
        }, randn({5, 3}, 105)) < kTol);
}

TEST_CASE("concat values are laid out along the axis") {
  Tape<double> t;
  auto a = make_leaf(t, Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = make_leaf(t, Tensor<double>({2, 1}, {9, 8}));
  auto c = concat<double>({a, b}, 1);
  CHECK(c.val().shape == Shape{2, 3});
  CHECK(c.val().data == AlignedVec<double>{1, 2, 9, 3, 4, 8});

  auto d = concat<double>({a, a}, 0);
  CHECK(d.val().shape == Shape{4, 2});
  CHECK(d.val().data == AlignedVec<double>{1, 2, 3, 4, 1, 2, 3, 4});
}

TEST_CASE("grad: reductions") {
  const auto x = randn({3, 4, 2}, 111);
  CHECK(check1([](Tape<double>&, Var<double> v) { return sum_all(mul(v, v)); }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto s = sum_over_axis(v, 1);
          return sum_all(mul(s, s));
        }, x) < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto m = mean_over_axis(v, 0);
          return sum_all(mul(m, m));
        }, x) < kTol);
  // max: perturb so no two entries along the axis are within fd range of a tie
  Tensor<double> mx = randn({3, 5}, 112);
  for (std::size_t i = 0; i < mx.data.size(); ++i) mx.data[i] += 0.25 * static_cast<double>(i);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto m = max_over_axis(v, 1);
          return sum_all(mul(m, m));
        }, mx) < kTol);
}

TEST_CASE("max_over_axis picks first maximal element on ties") {
  Tape<double> t;
  auto x = make_leaf(t, Tensor<double>({1, 3}, {2.0, 5.0, 5.0}));
  auto y = sum_all(max_over_axis(x, 1));
  t.backward(y.id);
  CHECK(x.grad().data == AlignedVec<double>{0.0, 1.0, 0.0});
}

TEST_CASE("grad: linear algebra ops") {
  CHECK(check2([](Tape<double>&, Var<double> a, Var<double> b) { return sum_all(mul(matmul(a, b), matmul(a, b))); },
               randn({4, 5}, 121), randn({5, 3}, 122)) < kTol);
  CHECK(check2([](Tape<double>&, Var<double> a, Var<double> b) { return sum_all(matmul(a, b)); },
               randn({2, 3, 4}, 123), randn({2, 4, 2}, 124)) < kTol);
  CHECK(check2([](Tape<double>&, Var<double> a, Var<double> b) { return sum_all(matmul(a, b)); },
               randn({3, 2, 4}, 125), randn({4, 2}, 126)) < kTol);
  CHECK(grad_check(
            [](Tape<double>& t, const std::vector<Var<double>>& xs) {
              (void)t;
              auto y = linear(xs[0], xs[1], xs[2]);
              return sum_all(mul(y, y));
            },
            {randn({3, 4}, 127), randn({4, 2}, 128), randn({2}, 129)})
            .max_rel_err < kTol);
}

TEST_CASE("grad: softmax and layer_norm") {
  Tensor<double> mask = Tensor<double>({2, 4}, {1, 0, 1, 1, 1, 1, 0, 1});
  CHECK(grad_check(
            [&](Tape<double>& t, const std::vector<Var<double>>& xs) {
              (void)t;
              auto y = masked_softmax(xs[0], mask);
              return sum_all(mul(y, y));
            },
            {randn({2, 4}, 131)})
            .max_rel_err < kTol);
  CHECK(check1([](Tape<double>&, Var<double> v) {
          auto y = softmax(v);
          return sum_all(mul(y, y));
        }, randn({3, 5}, 132)) < kTol);
  CHECK(grad_check(
            [](Tape<double>& t, const std::vector<Var<double>>& xs) {
              (void)t;
              auto y = layer_norm(xs[0], xs[1], xs[2]);
              return sum_all(mul(y, y));
            },
            {randn({4, 6}, 133), randn({6}, 134), randn({6}, 135)})
            .max_rel_err < kTol);
}

TEST_CASE("grad: full masked_softmax-matmul chain on random 3x4") {
  Tensor<double> mask = Tensor<double>({3, 4}, {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 1});
  const double rel = grad_check(
                         [&](Tape<double>& t, const std::vector<Var<double>>& xs) {
                           (void)t;
                           auto attn = masked_softmax(xs[0], mask);
                           auto y = matmul(attn, xs[1]);
                           return sum_all(mul(y, y));
                         },
                         {randn({3, 4}, 141), randn({4, 2}, 142)})
                         .max_rel_err;
  CHECK(rel < 1e-6);
}

TEST_CASE("grad: convolutions") {
  CHECK(grad_check(
            [](Tape<double>& t, const std::vector<Var<double>>& xs) {
              (void)t;
              auto y = conv1d(xs[0], xs[1], xs[2], 1);
              return sum_all(mul(y, y));
            },
            {randn({2, 7, 3}, 151), randn({3, 3, 2}, 152), randn({2}, 153)})
            .max_rel_err < kTol);
  CHECK(grad_check(
            [](Tape<double>& t, const std::vector<Var<double>>& xs) {
              (void)t;
              auto y = conv1d(xs[0], xs[1], xs[2], 2);
              return sum_all(mul(y, y));
            },
            {randn({2, 8, 3}, 154), randn({3, 3, 2}, 155), randn({2}, 156)})
            .max_rel_err < kTol);
  CHECK(check2([](Tape<double>&, Var<double> x, Var<double> w) {
          auto y = depthwise_conv1d(x, w, 1);
          return sum_all(mul(y, y));
        }, randn({2, 6, 4}, 157), randn({3, 4}, 158)) < kTol);
  CHECK(check2([](Tape<double>&, Var<double> x, Var<double> w) {
          auto y = depthwise_conv1d(x, w, 2);
          return sum_all(mul(y, y));
        }, randn({2, 6, 4}, 159), randn({3, 4}, 160)) < kTol);
}

TEST_CASE("backward requires a scalar root") {
  Tape<double> t;
  auto x = make_leaf(t, randn({2, 2}, 161));
  auto y = mul(x, x);
  CHECK_THROWS_AS(t.backward(y.id), tmr::ShapeError);
}

TEST_CASE("float and double tapes agree on a small chain") {
  const auto xd = randn({3, 4}, 171);
  Tensor<float> xf = xd.cast<float>();

  Tape<double> td;
  auto vd = make_leaf(td, xd);
  auto yd = sum_all(gelu(scale(vd, 0.5)));

  Tape<float> tf;
  auto vf = make_leaf(tf, xf);
  auto yf = sum_all(gelu(scale(vf, 0.5f)));

  CHECK(static_cast<double>(yf.val().data[0]) ==
        doctest::Approx(yd.val().data[0]).epsilon(1e-5));
}

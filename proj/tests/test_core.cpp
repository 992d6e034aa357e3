#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "trackletmr/core.hpp"
#include "trackletmr/rng.hpp"

using tmr::Moment;
using tmr::Rng;

TEST_CASE("temporal_iou worked examples") {
  CHECK(tmr::temporal_iou({0, 10}, {0, 10}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(tmr::temporal_iou({0, 5}, {5, 10}) == 0.0);
  CHECK(tmr::temporal_iou({0, 10}, {5, 15}) == doctest::Approx(5.0 / 15.0).epsilon(1e-12));
  CHECK(tmr::temporal_iou({3, 4}, {0, 10}) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("temporal_iou symmetry and bounds") {
  Rng rng(1234);
  for (int i = 0; i < 1000; ++i) {
    const double s1 = rng.uniform(0.0, 50.0);
    const double s2 = rng.uniform(0.0, 50.0);
    Moment a{s1, s1 + rng.uniform(0.1, 30.0)};
    Moment b{s2, s2 + rng.uniform(0.1, 30.0)};
    const double ab = tmr::temporal_iou(a, b);
    const double ba = tmr::temporal_iou(b, a);
    CHECK(ab == ba);
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    const double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
    if (inter <= 0.0) CHECK(ab == 0.0);
    if (ab == 1.0) {
      CHECK(a.start == b.start);
      CHECK(a.end == b.end);
    }
  }
}

TEST_CASE("enclosing_span worked examples and containment") {
  auto s1 = tmr::enclosing_span({0, 5}, {3, 8});
  CHECK(s1.start == 0.0);
  CHECK(s1.end == 8.0);
  auto s2 = tmr::enclosing_span({0, 5}, {0, 5});
  CHECK(s2.start == 0.0);
  CHECK(s2.end == 5.0);
  auto s3 = tmr::enclosing_span({0, 2}, {6, 9});
  CHECK(s3.start == 0.0);
  CHECK(s3.end == 9.0);

  Rng rng(77);
  for (int i = 0; i < 500; ++i) {
    const double s1v = rng.uniform(0.0, 50.0);
    const double s2v = rng.uniform(0.0, 50.0);
    Moment a{s1v, s1v + rng.uniform(0.1, 30.0)};
    Moment b{s2v, s2v + rng.uniform(0.1, 30.0)};
    auto s = tmr::enclosing_span(a, b);
    CHECK(s.start <= a.start);
    CHECK(s.start <= b.start);
    CHECK(s.end >= a.end);
    CHECK(s.end >= b.end);
    CHECK(s.length() >= std::max(a.length(), b.length()));
  }
}

TEST_CASE("time base conversions") {
  tmr::TimeBase tb{2.0, 64};
  CHECK(tb.duration() == doctest::Approx(32.0));
  CHECK(tb.frame_to_seconds(3.0) == doctest::Approx(1.5));
  CHECK(tb.valid());
  CHECK_FALSE(tmr::TimeBase{0.0, 10}.valid());
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(42);
  Rng f1 = base.fork(1);
  Rng f2 = base.fork(2);
  bool differ = false;
  for (int i = 0; i < 16; ++i) differ = differ || (f1.next_u64() != f2.next_u64());
  CHECK(differ);
}

TEST_CASE("rng uniform_int bounds and shuffle permutation") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const std::int64_t v = rng.uniform_int(3, 9);
    CHECK(v >= 3);
    CHECK(v <= 9);
  }
  std::vector<int> xs{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(xs.begin(), xs.end());
  std::vector<int> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 8; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);

  // Identical seed gives an identical permutation.
  Rng r1(99), r2(99);
  std::vector<int> a{1, 2, 3, 4, 5}, b{1, 2, 3, 4, 5};
  r1.shuffle(a.begin(), a.end());
  r2.shuffle(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("rng normal has plausible first moments") {
  Rng rng(2024);
  double sum = 0.0, sumsq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("uniform stays in [0,1)") {
  Rng rng(5);
  for (int i = 0; i < 5000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "trackletmr/tape.hpp"

namespace tmr::ad {

namespace detail {

template <typename S>
Var<S> push_op(const char* name, Tape<S>& tape, Tensor<S> value, std::vector<int> parents,
               std::function<void(Tape<S>&, const Tensor<S>&, int)> vjp) {
  const int id = tape.push(name, std::move(value), std::move(parents), nullptr);
  if (tape.needs_grad(id) && vjp) {
    tape.set_backward(id, [vjp, id](Tape<S>& t, const Tensor<S>& g) { vjp(t, g, id); });
  }
  return Var<S>{&tape, id};
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

// y_i = f(x_i), dx_i = df(x_i) * g_i.
template <typename S, typename F, typename DF>
Var<S> unary_ew(const char* name, Var<S> a, F f, DF df) {
  Tensor<S> out = a.val();
  for (auto& v : out.data) v = f(v);
  const int a_id = a.id;
  return push_op<S>(name, *a.tape, std::move(out), {a.id},
                    [a_id, df](Tape<S>& t, const Tensor<S>& g, int) {
                      const auto& x = t.val(a_id);
                      Tensor<S> dx = Tensor<S>::zeros(x.shape);
                      for (std::size_t i = 0; i < dx.data.size(); ++i)
                        dx.data[i] = df(x.data[i]) * g.data[i];
                      t.accumulate(a_id, dx);
                    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_shape("add", a.val(), b.val());
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>("add", *a.tape, std::move(out), {a.id, b.id},
                            [a_id, b_id](Tape<S>& t, const Tensor<S>& g, int) {
                              t.accumulate(a_id, g);
                              t.accumulate(b_id, g);
                            });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_shape("sub", a.val(), b.val());
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.val().data[i];
  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>("sub", *a.tape, std::move(out), {a.id, b.id},
                            [a_id, b_id](Tape<S>& t, const Tensor<S>& g, int) {
                              t.accumulate(a_id, g);
                              Tensor<S> db = g;
                              for (auto& v : db.data) v = -v;
                              t.accumulate(b_id, db);
                            });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require_same_shape("mul", a.val(), b.val());
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.val().data[i];
  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>("mul", *a.tape, std::move(out), {a.id, b.id},
                            [a_id, b_id](Tape<S>& t, const Tensor<S>& g, int) {
                              const auto& av = t.val(a_id);
                              const auto& bv = t.val(b_id);
                              Tensor<S> da = Tensor<S>::zeros(av.shape);
                              Tensor<S> db = Tensor<S>::zeros(bv.shape);
                              for (std::size_t i = 0; i < g.data.size(); ++i) {
                                da.data[i] = g.data[i] * bv.data[i];
                                db.data[i] = g.data[i] * av.data[i];
                              }
                              t.accumulate(a_id, da);
                              t.accumulate(b_id, db);
                            });
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  detail::require_same_shape("div", a.val(), b.val());
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= b.val().data[i];
  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>("div", *a.tape, std::move(out), {a.id, b.id},
                            [a_id, b_id](Tape<S>& t, const Tensor<S>& g, int) {
                              const auto& av = t.val(a_id);
                              const auto& bv = t.val(b_id);
                              Tensor<S> da = Tensor<S>::zeros(av.shape);
                              Tensor<S> db = Tensor<S>::zeros(bv.shape);
                              for (std::size_t i = 0; i < g.data.size(); ++i) {
                                const S inv = S(1) / bv.data[i];
                                da.data[i] = g.data[i] * inv;
                                db.data[i] = -g.data[i] * av.data[i] * inv * inv;
                              }
                              t.accumulate(a_id, da);
                              t.accumulate(b_id, db);
                            });
}

// Ties route the gradient to `a`.
template <typename S>
Var<S> minimum(Var<S> a, Var<S> b) {
  detail::require_same_shape("minimum", a.val(), b.val());
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::min(out.data[i], b.val().data[i]);
  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>("minimum", *a.tape, std::move(out), {a.id, b.id},
                            [a_id, b_id](Tape<S>& t, const Tensor<S>& g, int) {
                              const auto& av = t.val(a_id);
                              const auto& bv = t.val(b_id);
                              Tensor<S> da = Tensor<S>::zeros(av.shape);
                              Tensor<S> db = Tensor<S>::zeros(bv.shape);
                              for (std::size_t i = 0; i < g.data.size(); ++i) {
                                if (av.data[i] <= bv.data[i]) da.data[i] = g.data[i];
                                else db.data[i] = g.data[i];
                              }
                              t.accumulate(a_id, da);
                              t.accumulate(b_id, db);
                            });
}

template <typename S>
Var<S> maximum(Var<S> a, Var<S> b) {
  detail::require_same_shape("maximum", a.val(), b.val());
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::max(out.data[i], b.val().data[i]);
  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>("maximum", *a.tape, std::move(out), {a.id, b.id},
                            [a_id, b_id](Tape<S>& t, const Tensor<S>& g, int) {
                              const auto& av = t.val(a_id);
                              const auto& bv = t.val(b_id);
                              Tensor<S> da = Tensor<S>::zeros(av.shape);
                              Tensor<S> db = Tensor<S>::zeros(bv.shape);
                              for (std::size_t i = 0; i < g.data.size(); ++i) {
                                if (av.data[i] >= bv.data[i]) da.data[i] = g.data[i];
                                else db.data[i] = g.data[i];
                              }
                              t.accumulate(a_id, da);
                              t.accumulate(b_id, db);
                            });
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

template <typename S>
Var<S> neg(Var<S> a) {
  return detail::unary_ew<S>("neg", a, [](S x) { return -x; }, [](S) { return S(-1); });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  return detail::unary_ew<S>("scale", a, [c](S x) { return c * x; }, [c](S) { return c; });
}

template <typename S>
Var<S> add_const(Var<S> a, S c) {
  return detail::unary_ew<S>("add_const", a, [c](S x) { return x + c; }, [](S) { return S(1); });
}

template <typename S>
Var<S> relu(Var<S> a) {
  return detail::unary_ew<S>("relu", a, [](S x) { return x > S(0) ? x : S(0); },
                             [](S x) { return x > S(0) ? S(1) : S(0); });
}

// Exact (erf-based) GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_ew<S>(
      "gelu", a,
      [](S x) {
        const double xd = static_cast<double>(x);
        return static_cast<S>(xd * 0.5 * (1.0 + std::erf(xd * inv_sqrt2)));
      },
      [](S x) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
        return static_cast<S>(cdf + xd * pdf);
      });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  auto sig = [](S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
  };
  return detail::unary_ew<S>("sigmoid", a, sig, [sig](S x) {
    const S y = sig(x);
    return y * (S(1) - y);
  });
}

template <typename S>
Var<S> softplus(Var<S> a) {
  auto sig = [](S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
  };
  return detail::unary_ew<S>(
      "softplus", a,
      [](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); },
      sig);
}

template <typename S>
Var<S> log(Var<S> a) {
  return detail::unary_ew<S>("log", a, [](S x) { return std::log(x); },
                             [](S x) { return S(1) / x; });
}

template <typename S>
Var<S> exp(Var<S> a) {
  return detail::unary_ew<S>("exp", a, [](S x) { return std::exp(x); },
                             [](S x) { return std::exp(x); });
}

template <typename S>
Var<S> pow_const(Var<S> a, S exponent) {
  return detail::unary_ew<S>(
      "pow_const", a, [exponent](S x) { return std::pow(x, exponent); },
      [exponent](S x) { return exponent * std::pow(x, exponent - S(1)); });
}

// Pass-through gradient inside [lo, hi], zero outside.
template <typename S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  return detail::unary_ew<S>(
      "clamp", a, [lo, hi](S x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](S x) { return (x >= lo && x <= hi) ? S(1) : S(0); });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S>
Var<S> operator/(Var<S> a, Var<S> b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  if (shape_numel(shape) != a.val().numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(a.val().shape) + " -> " +
                     shape_str(shape));
  Tensor<S> out(shape, a.val().data);
  const int a_id = a.id;
  const Shape in_shape = a.val().shape;
  return detail::push_op<S>("reshape", *a.tape, std::move(out), {a.id},
                            [a_id, in_shape](Tape<S>& t, const Tensor<S>& g, int) {
                              t.accumulate(a_id, Tensor<S>(in_shape, g.data));
                            });
}

namespace detail {

template <typename S>
Tensor<S> permute_data(const Tensor<S>& in, const std::vector<int>& axes) {
  const int r = in.rank();
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = in.shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * in.shape[static_cast<std::size_t>(i + 1)];

  // stride of output axis i in the input layout
  std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t src = 0;
  const std::int64_t n = in.numel();
  for (std::int64_t flat = 0; flat < n; ++flat) {
    out.data[static_cast<std::size_t>(flat)] = in.data[static_cast<std::size_t>(src)];
    for (int ax = r - 1; ax >= 0; --ax) {
      auto& i = idx[static_cast<std::size_t>(ax)];
      src += strides[static_cast<std::size_t>(ax)];
      if (++i < out_shape[static_cast<std::size_t>(ax)]) break;
      src -= strides[static_cast<std::size_t>(ax)] * out_shape[static_cast<std::size_t>(ax)];
      i = 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename S>
Var<S> permute(Var<S> a, std::vector<int> axes) {
  const int r = a.val().rank();
  if (static_cast<int>(axes.size()) != r)
    throw ShapeError("permute: axes size must match rank");
  Tensor<S> out = detail::permute_data(a.val(), axes);
  std::vector<int> inverse(axes.size());
  for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
  const int a_id = a.id;
  return detail::push_op<S>("permute", *a.tape, std::move(out), {a.id},
                            [a_id, inverse](Tape<S>& t, const Tensor<S>& g, int) {
                              t.accumulate(a_id, detail::permute_data(g, inverse));
                            });
}

// Replicates `a` along new leading axes; the only broadcasting the tape
// supports. Gradient sums over the added axes.
template <typename S>
Var<S> broadcast_to(Var<S> a, const Shape& leading) {
  const auto& in = a.val();
  Shape out_shape = leading;
  out_shape.insert(out_shape.end(), in.shape.begin(), in.shape.end());
  const std::int64_t reps = shape_numel(leading);
  const std::int64_t block = in.numel();
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  for (std::int64_t r = 0; r < reps; ++r)
    std::copy(in.data.begin(), in.data.end(), out.data.begin() + r * block);
  const int a_id = a.id;
  const Shape in_shape = in.shape;
  return detail::push_op<S>("broadcast_to", *a.tape, std::move(out), {a.id},
                            [a_id, in_shape, reps, block](Tape<S>& t, const Tensor<S>& g, int) {
                              Tensor<S> da = Tensor<S>::zeros(in_shape);
                              for (std::int64_t r = 0; r < reps; ++r)
                                for (std::int64_t i = 0; i < block; ++i)
                                  da.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(r * block + i)];
                              t.accumulate(a_id, da);
                            });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape<S>& tape = *parts[0].tape;
  const int r = parts[0].val().rank();
  if (axis < 0) axis += r;
  Shape out_shape = parts[0].val().shape;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.val().shape;
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && s[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shape mismatch on non-concat axis");
    total += s[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total;

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

  Tensor<S> out = Tensor<S>::zeros(out_shape);
  std::vector<std::int64_t> sizes;
  std::vector<int> parent_ids;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t ax = p.val().dim(axis);
    const std::int64_t row = ax * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(p.val().data.begin() + o * row, p.val().data.begin() + (o + 1) * row,
                out.data.begin() + o * total * inner + offset * inner);
    sizes.push_back(ax);
    parent_ids.push_back(p.id);
    offset += ax;
  }

  std::vector<Shape> part_shapes;
  for (const auto& p : parts) part_shapes.push_back(p.val().shape);
  return detail::push_op<S>(
      "concat", tape, std::move(out), parent_ids,
      [parent_ids, part_shapes, sizes, outer, inner, total](Tape<S>& t, const Tensor<S>& g, int) {
        std::int64_t offset = 0;
        for (std::size_t pi = 0; pi < parent_ids.size(); ++pi) {
          Tensor<S> dp = Tensor<S>::zeros(part_shapes[pi]);
          const std::int64_t row = sizes[pi] * inner;
          for (std::int64_t o = 0; o < outer; ++o)
            std::copy(g.data.begin() + o * total * inner + offset * inner,
                      g.data.begin() + o * total * inner + offset * inner + row,
                      dp.data.begin() + o * row);
          t.accumulate(parent_ids[pi], dp);
          offset += sizes[pi];
        }
      });
}

template <typename S>
Var<S> slice_axis0(Var<S> a, std::int64_t start, std::int64_t len) {
  const auto& in = a.val();
  if (in.rank() < 1 || start < 0 || start + len > in.shape[0])
    throw ShapeError("slice_axis0: out of range");
  Shape out_shape = in.shape;
  out_shape[0] = len;
  std::int64_t inner = 1;
  for (int i = 1; i < in.rank(); ++i) inner *= in.shape[static_cast<std::size_t>(i)];
  Tensor<S> out(out_shape, typename Tensor<S>::Storage(in.data.begin() + start * inner,
                                                       in.data.begin() + (start + len) * inner));
  const int a_id = a.id;
  const Shape in_shape = in.shape;
  return detail::push_op<S>("slice_axis0", *a.tape, std::move(out), {a.id},
                            [a_id, in_shape, start, inner](Tape<S>& t, const Tensor<S>& g, int) {
                              Tensor<S> da = Tensor<S>::zeros(in_shape);
                              std::copy(g.data.begin(), g.data.end(),
                                        da.data.begin() + start * inner);
                              t.accumulate(a_id, da);
                            });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(Var<S> a) {
  S total = S(0);
  for (const S v : a.val().data) total += v;
  const int a_id = a.id;
  const Shape in_shape = a.val().shape;
  return detail::push_op<S>("sum_all", *a.tape, Tensor<S>::scalar(total), {a.id},
                            [a_id, in_shape](Tape<S>& t, const Tensor<S>& g, int) {
                              t.accumulate(a_id, Tensor<S>::full(in_shape, g.data[0]));
                            });
}

namespace detail {

template <typename S>
void reduce_extents(const Tensor<S>& in, int& axis, std::int64_t& outer, std::int64_t& n,
                    std::int64_t& inner) {
  if (axis < 0) axis += in.rank();
  if (axis < 0 || axis >= in.rank()) throw ShapeError("reduction axis out of range");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= in.shape[static_cast<std::size_t>(i)];
  n = in.shape[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < in.rank(); ++i) inner *= in.shape[static_cast<std::size_t>(i)];
}

inline Shape drop_axis(const Shape& s, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(s.size()); ++i)
    if (i != axis) out.push_back(s[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace detail

template <typename S>
Var<S> sum_over_axis(Var<S> a, int axis) {
  const auto& in = a.val();
  std::int64_t outer, n, inner;
  detail::reduce_extents(in, axis, outer, n, inner);
  Tensor<S> out = Tensor<S>::zeros(detail::drop_axis(in.shape, axis));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i)
        out.data[static_cast<std::size_t>(o * inner + i)] +=
            in.data[static_cast<std::size_t>((o * n + k) * inner + i)];
  const int a_id = a.id;
  const Shape in_shape = in.shape;
  return detail::push_op<S>("sum_over_axis", *a.tape, std::move(out), {a.id},
                            [a_id, in_shape, outer, n, inner](Tape<S>& t, const Tensor<S>& g, int) {
                              Tensor<S> da = Tensor<S>::zeros(in_shape);
                              for (std::int64_t o = 0; o < outer; ++o)
                                for (std::int64_t k = 0; k < n; ++k)
                                  for (std::int64_t i = 0; i < inner; ++i)
                                    da.data[static_cast<std::size_t>((o * n + k) * inner + i)] =
                                        g.data[static_cast<std::size_t>(o * inner + i)];
                              t.accumulate(a_id, da);
                            });
}

template <typename S>
Var<S> mean_over_axis(Var<S> a, int axis) {
  const std::int64_t n = a.val().dim(axis);
  return scale(sum_over_axis(a, axis), S(1) / static_cast<S>(n));
}

// Ties route the gradient to the first maximal element along the axis.
template <typename S>
Var<S> max_over_axis(Var<S> a, int axis) {
  const auto& in = a.val();
  std::int64_t outer, n, inner;
  detail::reduce_extents(in, axis, outer, n, inner);
  Tensor<S> out = Tensor<S>::zeros(detail::drop_axis(in.shape, axis));
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(outer * inner), 0);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      S best = in.data[static_cast<std::size_t>(o * n * inner + i)];
      std::int64_t best_k = 0;
      for (std::int64_t k = 1; k < n; ++k) {
        const S v = in.data[static_cast<std::size_t>((o * n + k) * inner + i)];
        if (v > best) {
          best = v;
          best_k = k;
        }
      }
      out.data[static_cast<std::size_t>(o * inner + i)] = best;
      argmax[static_cast<std::size_t>(o * inner + i)] = best_k;
    }
  const int a_id = a.id;
  const Shape in_shape = in.shape;
  return detail::push_op<S>(
      "max_over_axis", *a.tape, std::move(out), {a.id},
      [a_id, in_shape, argmax, outer, n, inner](Tape<S>& t, const Tensor<S>& g, int) {
        Tensor<S> da = Tensor<S>::zeros(in_shape);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t k = argmax[static_cast<std::size_t>(o * inner + i)];
            da.data[static_cast<std::size_t>((o * n + k) * inner + i)] =
                g.data[static_cast<std::size_t>(o * inner + i)];
          }
        t.accumulate(a_id, da);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

struct MatmulDims {
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool a_batched = false, b_batched = false;
};

template <typename S>
MatmulDims matmul_dims(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2");
  MatmulDims d;
  d.m = a.shape[static_cast<std::size_t>(a.rank() - 2)];
  d.k = a.shape[static_cast<std::size_t>(a.rank() - 1)];
  const std::int64_t bk = b.shape[static_cast<std::size_t>(b.rank() - 2)];
  d.n = b.shape[static_cast<std::size_t>(b.rank() - 1)];
  if (d.k != bk)
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  Shape a_batch(a.shape.begin(), a.shape.end() - 2);
  Shape b_batch(b.shape.begin(), b.shape.end() - 2);
  if (!a_batch.empty() && !b_batch.empty() && a_batch != b_batch)
    throw ShapeError("matmul: batch dims disagree " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  d.a_batched = !a_batch.empty();
  d.b_batched = !b_batch.empty();
  d.batch = std::max(shape_numel(a_batch), shape_numel(b_batch));
  return d;
}

}  // namespace detail

// C[..., m, n] = A[..., m, k] . B[..., k, n]. Leading batch dims must match
// exactly, or be absent on one side (that side is reused for every batch).
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  const auto& av = a.val();
  const auto& bv = b.val();
  const auto d = detail::matmul_dims(av, bv);

  Shape out_shape((d.a_batched ? av.shape : bv.shape));
  out_shape[out_shape.size() - 2] = d.m;
  out_shape[out_shape.size() - 1] = d.n;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  for (std::int64_t i = 0; i < d.batch; ++i) {
    auto A = as_matrix(av, d.m, d.k, d.a_batched ? i * d.m * d.k : 0);
    auto B = as_matrix(bv, d.k, d.n, d.b_batched ? i * d.k * d.n : 0);
    as_matrix(out, d.m, d.n, i * d.m * d.n).noalias() = A * B;
  }

  const int a_id = a.id, b_id = b.id;
  return detail::push_op<S>(
      "matmul", *a.tape, std::move(out), {a.id, b.id},
      [a_id, b_id, d](Tape<S>& t, const Tensor<S>& g, int) {
        const auto& av = t.val(a_id);
        const auto& bv = t.val(b_id);
        Tensor<S> da = Tensor<S>::zeros(av.shape);
        Tensor<S> db = Tensor<S>::zeros(bv.shape);
        for (std::int64_t i = 0; i < d.batch; ++i) {
          auto A = as_matrix(av, d.m, d.k, d.a_batched ? i * d.m * d.k : 0);
          auto B = as_matrix(bv, d.k, d.n, d.b_batched ? i * d.k * d.n : 0);
          auto G = as_matrix(g, d.m, d.n, i * d.m * d.n);
          as_matrix(da, d.m, d.k, d.a_batched ? i * d.m * d.k : 0).noalias() += G * B.transpose();
          as_matrix(db, d.k, d.n, d.b_batched ? i * d.k * d.n : 0).noalias() += A.transpose() * G;
        }
        t.accumulate(a_id, da);
        t.accumulate(b_id, db);
      });
}

// y[..., n] = x[..., k] . w[k, n] + b[n]
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  const auto& bv = b.val();
  if (wv.rank() != 2 || bv.rank() != 1 || bv.shape[0] != wv.shape[1])
    throw ShapeError("linear: weight must be [k,n], bias [n]");
  const std::int64_t k = wv.shape[0];
  const std::int64_t n = wv.shape[1];
  if (xv.rank() < 1 || xv.shape[static_cast<std::size_t>(xv.rank() - 1)] != k)
    throw ShapeError("linear: input last dim " + shape_str(xv.shape) + " vs weight " +
                     shape_str(wv.shape));
  const std::int64_t rows = xv.numel() / k;

  Shape out_shape = xv.shape;
  out_shape[out_shape.size() - 1] = n;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  auto X = as_matrix(xv, rows, k);
  auto W = as_matrix(wv, k, n);
  auto Y = as_matrix(out, rows, n);
  Y.noalias() = X * W;
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bv.data.data(), n);

  const int x_id = x.id, w_id = w.id, b_id = b.id;
  return detail::push_op<S>(
      "linear", *x.tape, std::move(out), {x.id, w.id, b.id},
      [x_id, w_id, b_id, rows, k, n](Tape<S>& t, const Tensor<S>& g, int) {
        const auto& xv = t.val(x_id);
        const auto& wv = t.val(w_id);
        auto X = as_matrix(xv, rows, k);
        auto W = as_matrix(wv, k, n);
        auto G = as_matrix(g, rows, n);
        Tensor<S> dx = Tensor<S>::zeros(xv.shape);
        Tensor<S> dw = Tensor<S>::zeros(wv.shape);
        Tensor<S> db = Tensor<S>::zeros({n});
        as_matrix(dx, rows, k).noalias() = G * W.transpose();
        as_matrix(dw, k, n).noalias() = X.transpose() * G;
        // Bias gradient summed in fixed row order; a vectorized redux would
        // pick its split from buffer addresses and break bit-reproducibility.
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* gr = g.data.data() + r * n;
          for (std::int64_t j = 0; j < n; ++j) db.data[static_cast<std::size_t>(j)] += gr[j];
        }
        t.accumulate(x_id, dx);
        t.accumulate(w_id, dw);
        t.accumulate(b_id, db);
      });
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

// Softmax over the last axis restricted to entries whose mask is > 0.5; masked
// entries output exactly 0. The mask is a plain tensor, not a differentiable
// input. Throws EmptyRowError when a row is fully masked.
template <typename S>
Var<S> masked_softmax(Var<S> x, const Tensor<S>& mask) {
  const auto& xv = x.val();
  detail::require_same_shape("masked_softmax", xv, mask);
  const std::int64_t n = xv.shape[static_cast<std::size_t>(xv.rank() - 1)];
  const std::int64_t rows = xv.numel() / n;

  Tensor<S> out = Tensor<S>::zeros(xv.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xi = xv.data.data() + r * n;
    const S* mi = mask.data.data() + r * n;
    S* yi = out.data.data() + r * n;
    S max_val = std::numeric_limits<S>::lowest();
    bool any = false;
    for (std::int64_t j = 0; j < n; ++j)
      if (mi[j] > S(0.5)) {
        any = true;
        max_val = std::max(max_val, xi[j]);
      }
    if (!any) throw EmptyRowError("masked_softmax: fully masked row " + std::to_string(r));
    S denom = S(0);
    for (std::int64_t j = 0; j < n; ++j)
      if (mi[j] > S(0.5)) {
        yi[j] = std::exp(xi[j] - max_val);
        denom += yi[j];
      }
    for (std::int64_t j = 0; j < n; ++j)
      if (mi[j] > S(0.5)) yi[j] /= denom;
  }

  const int x_id = x.id;
  return detail::push_op<S>(
      "masked_softmax", *x.tape, std::move(out), {x.id},
      [x_id, rows, n](Tape<S>& t, const Tensor<S>& g, int self) {
        const auto& y = t.val(self);
        Tensor<S> dx = Tensor<S>::zeros(y.shape);
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* yi = y.data.data() + r * n;
          const S* gi = g.data.data() + r * n;
          S dot = S(0);
          for (std::int64_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
          S* di = dx.data.data() + r * n;
          for (std::int64_t j = 0; j < n; ++j) di[j] = yi[j] * (gi[j] - dot);
        }
        t.accumulate(x_id, dx);
      });
}

template <typename S>
Var<S> softmax(Var<S> x) {
  return masked_softmax(x, Tensor<S>::full(x.val().shape, S(1)));
}

// Normalizes over the last axis, then applies the affine (gamma, beta).
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const auto& xv = x.val();
  const std::int64_t n = xv.shape[static_cast<std::size_t>(xv.rank() - 1)];
  if (gamma.val().shape != Shape{n} || beta.val().shape != Shape{n})
    throw ShapeError("layer_norm: gamma/beta must be [last_dim]");
  const std::int64_t rows = xv.numel() / n;

  Tensor<S> out = Tensor<S>::zeros(xv.shape);
  std::vector<S> inv_sigma(static_cast<std::size_t>(rows));
  std::vector<S> means(static_cast<std::size_t>(rows));
  const auto& gv = gamma.val();
  const auto& bv = beta.val();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xi = xv.data.data() + r * n;
    S mean = S(0);
    for (std::int64_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<S>(n);
    S var = S(0);
    for (std::int64_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<S>(n);
    const S inv = S(1) / std::sqrt(var + eps);
    means[static_cast<std::size_t>(r)] = mean;
    inv_sigma[static_cast<std::size_t>(r)] = inv;
    S* yi = out.data.data() + r * n;
    for (std::int64_t j = 0; j < n; ++j)
      yi[j] = (xi[j] - mean) * inv * gv.data[static_cast<std::size_t>(j)] + bv.data[static_cast<std::size_t>(j)];
  }

  const int x_id = x.id, g_id = gamma.id, b_id = beta.id;
  return detail::push_op<S>(
      "layer_norm", *x.tape, std::move(out), {x.id, gamma.id, beta.id},
      [x_id, g_id, b_id, rows, n, means, inv_sigma](Tape<S>& t, const Tensor<S>& g, int) {
        const auto& xv = t.val(x_id);
        const auto& gv = t.val(g_id);
        Tensor<S> dx = Tensor<S>::zeros(xv.shape);
        Tensor<S> dgamma = Tensor<S>::zeros({n});
        Tensor<S> dbeta = Tensor<S>::zeros({n});
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* xi = xv.data.data() + r * n;
          const S* gi = g.data.data() + r * n;
          const S mean = means[static_cast<std::size_t>(r)];
          const S inv = inv_sigma[static_cast<std::size_t>(r)];
          S sum_dyg = S(0), sum_dyg_xhat = S(0);
          for (std::int64_t j = 0; j < n; ++j) {
            const S xhat = (xi[j] - mean) * inv;
            const S dyg = gi[j] * gv.data[static_cast<std::size_t>(j)];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            dgamma.data[static_cast<std::size_t>(j)] += gi[j] * xhat;
            dbeta.data[static_cast<std::size_t>(j)] += gi[j];
          }
          const S inv_n = S(1) / static_cast<S>(n);
          S* di = dx.data.data() + r * n;
          for (std::int64_t j = 0; j < n; ++j) {
            const S xhat = (xi[j] - mean) * inv;
            const S dyg = gi[j] * gv.data[static_cast<std::size_t>(j)];
            di[j] = inv * (dyg - inv_n * sum_dyg - xhat * inv_n * sum_dyg_xhat);
          }
        }
        t.accumulate(x_id, dx);
        t.accumulate(g_id, dgamma);
        t.accumulate(b_id, dbeta);
      });
}

// ---------------------------------------------------------------------------
// Convolutions (1-D, same padding)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  std::int64_t batch, in_len, channels, out_len, kernel, stride, pad_left;
};

template <typename S>
ConvGeom conv_geometry(const Tensor<S>& x, std::int64_t kernel, std::int64_t stride,
                       std::int64_t channels_axis_size) {
  if (x.rank() < 2) throw ShapeError("conv1d: input must be [..., L, C]");
  ConvGeom geo{};
  geo.in_len = x.shape[static_cast<std::size_t>(x.rank() - 2)];
  geo.channels = x.shape[static_cast<std::size_t>(x.rank() - 1)];
  if (geo.channels != channels_axis_size)
    throw ShapeError("conv1d: channel mismatch");
  geo.batch = x.numel() / (geo.in_len * geo.channels);
  geo.kernel = kernel;
  geo.stride = stride;
  geo.out_len = (geo.in_len + stride - 1) / stride;  // ceil
  const std::int64_t span = (geo.out_len - 1) * stride + kernel;
  const std::int64_t pad_total = std::max<std::int64_t>(span - geo.in_len, 0);
  geo.pad_left = pad_total / 2;
  return geo;
}

// Gathers x[b] into [out_len, K*C] with zero padding outside the sequence.
template <typename S>
void im2col(const S* x, const ConvGeom& geo, S* col) {
  const std::int64_t kc = geo.kernel * geo.channels;
  for (std::int64_t t = 0; t < geo.out_len; ++t) {
    for (std::int64_t k = 0; k < geo.kernel; ++k) {
      const std::int64_t src = t * geo.stride + k - geo.pad_left;
      S* dst = col + t * kc + k * geo.channels;
      if (src < 0 || src >= geo.in_len) {
        std::fill(dst, dst + geo.channels, S(0));
      } else {
        const S* from = x + src * geo.channels;
        std::copy(from, from + geo.channels, dst);
      }
    }
  }
}

template <typename S>
void col2im_add(const S* col, const ConvGeom& geo, S* dx) {
  const std::int64_t kc = geo.kernel * geo.channels;
  for (std::int64_t t = 0; t < geo.out_len; ++t) {
    for (std::int64_t k = 0; k < geo.kernel; ++k) {
      const std::int64_t dst = t * geo.stride + k - geo.pad_left;
      if (dst < 0 || dst >= geo.in_len) continue;
      const S* from = col + t * kc + k * geo.channels;
      S* to = dx + dst * geo.channels;
      for (std::int64_t c = 0; c < geo.channels; ++c) to[c] += from[c];
    }
  }
}

}  // namespace detail

// x: [..., L, Cin], w: [K, Cin, Cout], b: [Cout]. Zero same-padding; output
// length ceil(L / stride).
template <typename S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> b, std::int64_t stride = 1) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  const auto& bv = b.val();
  if (wv.rank() != 3) throw ShapeError("conv1d: weight must be [K, Cin, Cout]");
  const std::int64_t kernel = wv.shape[0];
  const std::int64_t cin = wv.shape[1];
  const std::int64_t cout = wv.shape[2];
  if (bv.shape != Shape{cout}) throw ShapeError("conv1d: bias must be [Cout]");
  const auto geo = detail::conv_geometry(xv, kernel, stride, cin);

  Shape out_shape = xv.shape;
  out_shape[out_shape.size() - 2] = geo.out_len;
  out_shape[out_shape.size() - 1] = cout;
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  const std::int64_t kc = kernel * cin;
  AlignedVec<S> col(static_cast<std::size_t>(geo.out_len * kc));
  auto W2 = as_matrix(wv, kc, cout);
  for (std::int64_t n = 0; n < geo.batch; ++n) {
    detail::im2col(xv.data.data() + n * geo.in_len * cin, geo, col.data());
    auto C = ConstMatMap<S>(col.data(), geo.out_len, kc);
    auto Y = as_matrix(out, geo.out_len, cout, n * geo.out_len * cout);
    Y.noalias() = C * W2;
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bv.data.data(), cout);
  }

  const int x_id = x.id, w_id = w.id, b_id = b.id;
  return detail::push_op<S>(
      "conv1d", *x.tape, std::move(out), {x.id, w.id, b.id},
      [x_id, w_id, b_id, geo, kc, cout](Tape<S>& t, const Tensor<S>& g, int) {
        const auto& xv = t.val(x_id);
        const auto& wv = t.val(w_id);
        const std::int64_t cin = geo.channels;
        Tensor<S> dx = Tensor<S>::zeros(xv.shape);
        Tensor<S> dw = Tensor<S>::zeros(wv.shape);
        Tensor<S> db = Tensor<S>::zeros({cout});
        AlignedVec<S> col(static_cast<std::size_t>(geo.out_len * kc));
        AlignedVec<S> dcol(static_cast<std::size_t>(geo.out_len * kc));
        auto W2 = as_matrix(wv, kc, cout);
        auto dW2 = as_matrix(dw, kc, cout);
        for (std::int64_t n = 0; n < geo.batch; ++n) {
          detail::im2col(xv.data.data() + n * geo.in_len * cin, geo, col.data());
          auto C = ConstMatMap<S>(col.data(), geo.out_len, kc);
          auto G = as_matrix(g, geo.out_len, cout, n * geo.out_len * cout);
          dW2.noalias() += C.transpose() * G;
          // Fixed row order for the bias sum; see linear().
          const S* gn = g.data.data() + n * geo.out_len * cout;
          for (std::int64_t t2 = 0; t2 < geo.out_len; ++t2)
            for (std::int64_t c = 0; c < cout; ++c)
              db.data[static_cast<std::size_t>(c)] += gn[t2 * cout + c];
          MatMap<S>(dcol.data(), geo.out_len, kc).noalias() = G * W2.transpose();
          detail::col2im_add(dcol.data(), geo, dx.data.data() + n * geo.in_len * cin);
        }
        t.accumulate(x_id, dx);
        t.accumulate(w_id, dw);
        t.accumulate(b_id, db);
      });
}

// Per-channel convolution used by the strided query/residual paths.
// x: [..., L, C], w: [K, C].
template <typename S>
Var<S> depthwise_conv1d(Var<S> x, Var<S> w, std::int64_t stride = 1) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  if (wv.rank() != 2) throw ShapeError("depthwise_conv1d: weight must be [K, C]");
  const std::int64_t kernel = wv.shape[0];
  const std::int64_t channels = wv.shape[1];
  const auto geo = detail::conv_geometry(xv, kernel, stride, channels);

  Shape out_shape = xv.shape;
  out_shape[out_shape.size() - 2] = geo.out_len;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  for (std::int64_t n = 0; n < geo.batch; ++n) {
    const S* xn = xv.data.data() + n * geo.in_len * channels;
    S* yn = out.data.data() + n * geo.out_len * channels;
    for (std::int64_t t = 0; t < geo.out_len; ++t)
      for (std::int64_t k = 0; k < kernel; ++k) {
        const std::int64_t src = t * geo.stride + k - geo.pad_left;
        if (src < 0 || src >= geo.in_len) continue;
        const S* xr = xn + src * channels;
        const S* wr = wv.data.data() + k * channels;
        S* yr = yn + t * channels;
        for (std::int64_t c = 0; c < channels; ++c) yr[c] += wr[c] * xr[c];
      }
  }

  const int x_id = x.id, w_id = w.id;
  return detail::push_op<S>(
      "depthwise_conv1d", *x.tape, std::move(out), {x.id, w.id},
      [x_id, w_id, geo, kernel](Tape<S>& t, const Tensor<S>& g, int) {
        const auto& xv = t.val(x_id);
        const auto& wv = t.val(w_id);
        const std::int64_t channels = geo.channels;
        Tensor<S> dx = Tensor<S>::zeros(xv.shape);
        Tensor<S> dw = Tensor<S>::zeros(wv.shape);
        for (std::int64_t n = 0; n < geo.batch; ++n) {
          const S* xn = xv.data.data() + n * geo.in_len * channels;
          const S* gn = g.data.data() + n * geo.out_len * channels;
          S* dxn = dx.data.data() + n * geo.in_len * channels;
          for (std::int64_t t2 = 0; t2 < geo.out_len; ++t2)
            for (std::int64_t k = 0; k < kernel; ++k) {
              const std::int64_t src = t2 * geo.stride + k - geo.pad_left;
              if (src < 0 || src >= geo.in_len) continue;
              const S* gr = gn + t2 * channels;
              const S* xr = xn + src * channels;
              const S* wr = wv.data.data() + k * channels;
              S* dxr = dxn + src * channels;
              S* dwr = dw.data.data() + k * channels;
              for (std::int64_t c = 0; c < channels; ++c) {
                dxr[c] += wr[c] * gr[c];
                dwr[c] += xr[c] * gr[c];
              }
            }
        }
        t.accumulate(x_id, dx);
        t.accumulate(w_id, dw);
      });
}

}  // namespace tmr::ad

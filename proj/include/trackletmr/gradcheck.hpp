#pragma once

#include <functional>
#include <string>
#include <vector>

#include "trackletmr/ops.hpp"
#include "trackletmr/rng.hpp"

namespace tmr::ad {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_coord;  // "input i, flat j"
};

// Central-difference check of a scalar-valued function built on a fresh tape
// from the given inputs. `build` must be deterministic in its inputs.
// Relative error per coordinate: |a - n| / max(1, |a|, |n|).
inline GradCheckReport grad_check(
    const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& build,
    const std::vector<Tensor<double>>& inputs, double eps = 1e-5) {
  auto eval = [&](const std::vector<Tensor<double>>& xs) -> double {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(make_leaf(tape, x));
    Var<double> y = build(tape, vars);
    if (y.val().numel() != 1)
      throw ShapeError("grad_check: function must return a scalar");
    return y.val().data[0];
  };

  // Analytic gradients once.
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(make_leaf(tape, x));
  Var<double> y = build(tape, vars);
  if (y.val().numel() != 1) throw ShapeError("grad_check: function must return a scalar");
  tape.backward(y.id);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(vars.size());
  for (const auto& v : vars) analytic.push_back(v.grad());

  GradCheckReport report;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t i = 0; i < work.size(); ++i) {
    for (std::size_t j = 0; j < work[i].data.size(); ++j) {
      const double saved = work[i].data[j];
      work[i].data[j] = saved + eps;
      const double fp = eval(work);
      work[i].data[j] = saved - eps;
      const double fm = eval(work);
      work[i].data[j] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i].data[j];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_coord = "input " + std::to_string(i) + ", flat " + std::to_string(j);
      }
    }
  }
  return report;
}

// Same check probing at most `coords_per_input` randomly chosen coordinates
// of each input; every input is touched at least once. For functions with
// many parameters where the full sweep is too slow.
inline GradCheckReport grad_check_sampled(
    const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& build,
    const std::vector<Tensor<double>>& inputs, std::size_t coords_per_input, Rng& rng,
    double eps = 1e-5) {
  auto eval = [&](const std::vector<Tensor<double>>& xs) -> double {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(make_leaf(tape, x));
    Var<double> y = build(tape, vars);
    if (y.val().numel() != 1) throw ShapeError("grad_check: function must return a scalar");
    return y.val().data[0];
  };

  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(make_leaf(tape, x));
  Var<double> y = build(tape, vars);
  if (y.val().numel() != 1) throw ShapeError("grad_check: function must return a scalar");
  tape.backward(y.id);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(vars.size());
  for (const auto& v : vars) analytic.push_back(v.grad());

  GradCheckReport report;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t i = 0; i < work.size(); ++i) {
    const std::size_t n = work[i].data.size();
    std::vector<std::size_t> coords;
    if (n <= coords_per_input) {
      coords.resize(n);
      for (std::size_t j = 0; j < n; ++j) coords[j] = j;
    } else {
      for (std::size_t k = 0; k < coords_per_input; ++k)
        coords.push_back(static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
    }
    for (const std::size_t j : coords) {
      const double saved = work[i].data[j];
      work[i].data[j] = saved + eps;
      const double fp = eval(work);
      work[i].data[j] = saved - eps;
      const double fm = eval(work);
      work[i].data[j] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i].data[j];
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_coord = "input " + std::to_string(i) + ", flat " + std::to_string(j);
      }
    }
  }
  return report;
}

}  // namespace tmr::ad

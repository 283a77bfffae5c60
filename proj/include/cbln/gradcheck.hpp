#pragma once

// Central-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cbln/errors.hpp"
#include "cbln/params.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error; below it the comparison is
  // effectively absolute.
  double floor = 1e-6;
  // Coordinates checked per input/parameter; 0 means all of them.
  std::size_t max_coords = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

namespace detail {

inline void validate(const GradCheckOptions& opt) {
  if (!(opt.h > 0.0) || !std::isfinite(opt.h)) throw ConfigError("finite-difference step h must be > 0");
  if (!(opt.tol > 0.0)) throw ConfigError("gradient-check tolerance must be > 0");
}

inline std::vector<std::size_t> coords_to_check(std::size_t n, std::size_t max_coords) {
  std::vector<std::size_t> out;
  if (max_coords == 0 || max_coords >= n) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  // Evenly strided, always including the first and last coordinate.
  for (std::size_t k = 0; k < max_coords; ++k) {
    out.push_back(max_coords == 1 ? 0 : k * (n - 1) / (max_coords - 1));
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline void record(GradCheckReport& rep, const GradCheckOptions& opt, const std::string& name, std::size_t index,
                   double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
  const double rel = std::abs(analytic - numeric) / denom;
  ++rep.checked;
  if (rep.checked == 1 || !(rel <= rep.max_rel_error)) {
    rep.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
    rep.worst_input = name;
    rep.worst_index = index;
    rep.analytic = analytic;
    rep.numeric = numeric;
  }
}

}  // namespace detail

using MultiInputFn = std::function<Tensor(Tape&, std::span<const Tensor>)>;

// Compares d f / d inputs from the tape against central differences.
inline GradCheckReport finite_diff_check(const MultiInputFn& f, const std::vector<Matrix>& inputs,
                                         const GradCheckOptions& opt = {}) {
  detail::validate(opt);
  auto evaluate = [&](const std::vector<Matrix>& xs) {
    Tape tape;
    std::vector<Tensor> ts;
    for (const Matrix& m : xs) ts.push_back(tape.constant(m));
    return f(tape, ts).item();
  };

  Tape tape;
  std::vector<Tensor> ts;
  for (const Matrix& m : inputs) ts.push_back(tape.variable(m));
  Tensor loss = f(tape, ts);
  tape.backward(loss);

  GradCheckReport rep;
  std::vector<Matrix> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix& analytic = ts[k].grad();
    for (std::size_t i : detail::coords_to_check(inputs[k].size(), opt.max_coords)) {
      const double orig = probe[k].data[i];
      probe[k].data[i] = orig + opt.h;
      const double up = evaluate(probe);
      probe[k].data[i] = orig - opt.h;
      const double down = evaluate(probe);
      probe[k].data[i] = orig;
      detail::record(rep, opt, "input" + std::to_string(k), i, analytic.data[i], (up - down) / (2.0 * opt.h));
    }
  }
  rep.passed = rep.max_rel_error < opt.tol;
  return rep;
}

inline GradCheckReport finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Matrix& x,
                                         const GradCheckOptions& opt = {}) {
  return finite_diff_check([&](Tape& tape, std::span<const Tensor> ts) { return f(tape, ts[0]); },
                           std::vector<Matrix>{x}, opt);
}

using StoreFn = std::function<Tensor(ParamBinder&)>;

// Same check with respect to every parameter of `store`. Parameters are
// perturbed in place and restored.
inline GradCheckReport finite_diff_check(const StoreFn& f, ParameterStore& store, const GradCheckOptions& opt = {}) {
  detail::validate(opt);
  auto evaluate = [&]() {
    Tape tape;
    ParamBinder binder(tape, store, false);
    return f(binder).item();
  };

  Tape tape;
  ParamBinder binder(tape, store, true);
  Tensor loss = f(binder);
  tape.backward(loss);
  std::vector<Matrix> grads = store.zero_grads();
  binder.accumulate_grads(grads);

  GradCheckReport rep;
  for (std::size_t k = 0; k < store.size(); ++k) {
    Matrix& value = store[k].value;
    for (std::size_t i : detail::coords_to_check(value.size(), opt.max_coords)) {
      const double orig = value.data[i];
      value.data[i] = orig + opt.h;
      const double up = evaluate();
      value.data[i] = orig - opt.h;
      const double down = evaluate();
      value.data[i] = orig;
      detail::record(rep, opt, store[k].name, i, grads[k].data[i], (up - down) / (2.0 * opt.h));
    }
  }
  rep.passed = rep.max_rel_error < opt.tol;
  return rep;
}

}  // namespace cbln

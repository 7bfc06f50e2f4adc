#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "gravityflow/errors.hpp"
#include "gravityflow/params.hpp"
#include "gravityflow/tape.hpp"

namespace gravityflow {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  std::string worst_parameter;
  double tolerance = 0;
  bool passed = false;
};

// Builds a scalar loss on the given tape. Parameters must be bound through
// `params.bind(tape, name)` so that the checker can perturb them.
template <class T>
using LossBuilder = std::function<Var<T>(Tape<T>&, const ParameterSet<T>&)>;

// Optional hook applied to analytic gradients before comparison; the CLI uses
// it for the sign-flip negative control.
template <class T>
using GradientTamper = std::function<void(const std::string&, Array<T>&)>;

// Compares reverse-mode gradients against central differences
// (f(x+h) - f(x-h)) / 2h, entry by entry. The relative error of an entry is
// |a - n| / max(|a|, |n|, abs_floor); abs_floor keeps entries whose true
// gradient is ~0 from dividing FD noise by ~0.
template <class T>
GradCheckReport grad_check(ParameterSet<T> params, const LossBuilder<T>& builder, T step, T tolerance,
                           T abs_floor = T{1e-6}, const GradientTamper<T>& tamper = {}) {
  auto evaluate = [&](const ParameterSet<T>& p, const std::string& probe) -> T {
    Tape<T> tape(false);
    const T v = builder(tape, p).value()[0];
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite loss while probing parameter '" + probe + "'");
    return v;
  };

  Tape<T> tape;
  Var<T> loss = builder(tape, params);
  if (!std::isfinite(static_cast<double>(loss.value()[0]))) throw NumericError("non-finite loss at the base point");
  tape.backward(loss);
  auto grads = tape.parameter_grads();

  GradCheckReport report;
  report.tolerance = static_cast<double>(tolerance);
  for (auto& entry : params.entries()) {
    const std::string& name = entry.name;
    Array<T> analytic = grads.count(name) ? grads.at(name) : Array<T>::zeros(entry.value.shape());
    if (tamper) tamper(name, analytic);
    GradCheckEntry e;
    e.name = name;
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      const T saved = entry.value[i];
      entry.value[i] = saved + step;
      const T up = evaluate(params, name);
      entry.value[i] = saved - step;
      const T down = evaluate(params, name);
      entry.value[i] = saved;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[i]);
      if (!std::isfinite(a) || !std::isfinite(numeric))
        throw NumericError("non-finite gradient for parameter '" + name + "' entry " + std::to_string(i));
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), static_cast<double>(abs_floor)});
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      if (i == 0 || rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = i;
        e.analytic_at_worst = a;
        e.numeric_at_worst = numeric;
      }
    }
    if (e.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = e.max_rel_error;
      report.worst_parameter = name;
    }
    report.entries.push_back(e);
  }
  report.passed = report.max_rel_error < report.tolerance;
  return report;
}

}  // namespace gravityflow

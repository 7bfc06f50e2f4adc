#pragma once

// Test-only central-difference oracle. Deliberately independent of
// gravityflow::grad_check so the two can check each other.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gravityflow/array.hpp"

namespace fd {

using gravityflow::Array;

// d f / d inputs[k][i] by (f(x+h) - f(x-h)) / 2h for every entry.
inline std::vector<Array<double>> central_differences(const std::function<double(const std::vector<Array<double>>&)>& f,
                                                      std::vector<Array<double>> inputs, double h) {
  std::vector<Array<double>> out;
  for (auto& in : inputs) {
    Array<double> g(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double saved = in[i];
      in[i] = saved + h;
      const double up = f(inputs);
      in[i] = saved - h;
      const double down = f(inputs);
      in[i] = saved;
      g[i] = (up - down) / (2 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_rel_error(const Array<double>& analytic, const Array<double>& numeric, double floor) {
  double worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

}  // namespace fd

#pragma once

#include <cmath>
#include <random>

#include "gravityflow/gradcheck.hpp"
#include "gravityflow/model.hpp"

namespace gravityflow {

// Small end-to-end configuration for finite-difference checks.
inline ModelConfig toy_config(std::size_t n = 4, std::size_t q = 8, std::size_t p = 2) {
  ModelConfig c;
  c.num_nodes = n;
  c.input_steps = q;
  c.horizon = p;
  c.steps_per_day = 6;
  c.hidden = 8;
  c.squeezed = 4;
  c.skip = 6;
  c.time_embed = 2;
  c.adaptive_embed = 2;
  c.feature_embed = 2;
  c.node_embed = 3;
  c.layers = 2;
  c.seed = 1;
  return c;
}

// Euclidean distances between n uniform points in a 10 x 10 square.
inline Array<double> random_distances(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = 10.0 * uniform01(rng);
    y[i] = 10.0 * uniform01(rng);
  }
  Array<double> d({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = i == j ? 0.0 : std::hypot(x[i] - x[j], y[i] - y[j]);
  return d;
}

template <class T>
Array<T> random_array(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  Array<T> a(s);
  for (auto& v : a.storage()) v = static_cast<T>(scale * (2.0 * uniform01(rng) - 1.0));
  return a;
}

template <class T>
ModelBatch<T> random_batch(const ModelConfig& c, std::size_t b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelBatch<T> mb;
  const Shape s{b, c.num_nodes, c.input_steps, 1};
  mb.x_h = random_array<T>(s, rng);
  mb.x_in = random_array<T>(s, rng);
  mb.x_out = random_array<T>(s, rng);
  mb.calendar.batch = b;
  mb.calendar.steps = c.input_steps;
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t t = 0; t < c.input_steps; ++t) {
      const std::size_t g = 3 * k + t;
      mb.calendar.time_of_day.push_back(static_cast<std::int64_t>(g % c.steps_per_day));
      mb.calendar.day_of_week.push_back(static_cast<std::int64_t>((g / c.steps_per_day) % 7));
      mb.calendar.holiday.push_back(static_cast<std::int64_t>((g / c.steps_per_day) % 2));
    }
  return mb;
}

struct ModelGradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-3;
  double abs_floor = 1e-6;
  std::size_t batch = 2;
  bool sign_flip = false;  // negate every analytic gradient (negative control)
};

// L1 loss of the full model against random targets, all in 64-bit. The seed
// drives parameters, distances, inputs and targets.
inline GradCheckReport model_grad_check(ModelConfig c, std::uint64_t seed, const ModelGradCheckOptions& o = {}) {
  c.seed = seed;
  const Gravityformer<double> model(c, random_distances(c.num_nodes, seed + 1));
  const auto batch = random_batch<double>(c, o.batch, seed + 2);
  std::mt19937_64 rng(seed + 3);
  const auto y = random_array<double>({o.batch, c.num_nodes, c.horizon, 1}, rng, 3.0);
  LossBuilder<double> builder = [&](Tape<double>& t, const ParameterSet<double>& p) {
    return l1_loss(t.constant(y), gravityformer_forward(t, p, c, model.distance_kernel(), batch));
  };
  GradientTamper<double> flip;
  if (o.sign_flip)
    flip = [](const std::string&, Array<double>& g) {
      for (auto& v : g.storage()) v = -v;
    };
  return grad_check(model.params(), builder, o.step, o.tolerance, o.abs_floor, flip);
}

}  // namespace gravityflow

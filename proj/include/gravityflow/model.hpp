#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gravityflow/adagravity.hpp"
#include "gravityflow/config.hpp"
#include "gravityflow/embedding.hpp"
#include "gravityflow/gc2former.hpp"
#include "gravityflow/ops.hpp"
#include "gravityflow/params.hpp"

namespace gravityflow {

// Normalised Sylvester construction: H_0 = [1],
// H_k = [[H, H], [H, -H]] / sqrt(2).
template <class T = double>
Array<T> hadamard_matrix(std::size_t k) {
  Array<double> h = Array<double>::from({1, 1}, {1.0});
  const double s = 1.0 / std::sqrt(2.0);
  for (std::size_t level = 0; level < k; ++level) {
    const std::size_t m = h.shape()[0];
    Array<double> next({2 * m, 2 * m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double v = h[i * m + j] * s;
        next[i * 2 * m + j] = v;
        next[i * 2 * m + j + m] = v;
        next[(i + m) * 2 * m + j] = v;
        next[(i + m) * 2 * m + j + m] = -v;
      }
    h = std::move(next);
  }
  return h.cast<T>();
}

inline std::size_t log2_exact(std::size_t n) {
  if (!is_power_of_two(n)) throw ConfigError("Hadamard mapper needs a power-of-two width, got " + std::to_string(n));
  std::size_t k = 0;
  while ((std::size_t{1} << k) < n) ++k;
  return k;
}

// z' = ((z H) W_H) H^T over the channel axis.
template <class T>
Var<T> hadamard_map(const Var<T>& z, const Var<T>& w_h, const Var<T>& h) {
  const std::size_t c = z.shape().back();
  log2_exact(c);
  if (w_h.shape() != Shape{c, c} || h.shape() != Shape{c, c})
    throw DimensionError("hadamard_map: W_H " + shape_str(w_h.shape()) + " must be [" + std::to_string(c) + "," + std::to_string(c) + "]");
  return matmul(matmul(matmul(z, h), w_h), transpose(h));
}

// Mean absolute deviation over all elements.
template <class T>
Var<T> l1_loss(const Var<T>& y, const Var<T>& y_hat) {
  if (y.shape() != y_hat.shape())
    throw DimensionError("l1_loss: shapes " + shape_str(y.shape()) + " and " + shape_str(y_hat.shape()) + " differ");
  return mean(abs(sub(y_hat, y)));
}

// One batch of model inputs, already z-scored. Every array is [B, N, q, 1].
template <class T>
struct ModelBatch {
  Array<T> x_h;
  Array<T> x_in;
  Array<T> x_out;
  CalendarBatch calendar;
};

template <class T>
struct LayerTrace {
  BlockKind kind = BlockKind::parallel;
  Array<T> gravity;  // A_ag [B, N, N]; empty when the layer has no gravity gate
  Array<T> output;   // Z^(l)
  BlockTrace<T> block;
};

template <class T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layers;
  Array<T> skip_sum;  // decoder input [B, N, q, C_skip]
};

inline BlockKind block_kind(const ModelConfig& c, std::size_t layer) {
  if (!c.ablation.sequential_st) return BlockKind::parallel;
  return layer < c.layers / 2 ? BlockKind::temporal_only : BlockKind::spatial_only;
}

inline std::string block_prefix(std::size_t layer) { return "block" + std::to_string(layer) + "."; }
inline std::string skip_prefix(std::size_t layer) { return "skip" + std::to_string(layer) + "."; }

// Deterministic initialisation from c.seed. Insertion order (and therefore the
// checkpoint layout) is embed, mapper, gravity, per-layer block + skip, decoder.
template <class T>
ParameterSet<T> init_parameters(const ModelConfig& c) {
  validate(c);
  std::mt19937_64 rng(c.seed);
  ParameterSet<T> ps;
  init_embedding(ps, c, rng);
  if (!c.ablation.no_hadamard_mapper) ps.add("mapper.W_H", xavier_uniform<T>({c.hidden, c.hidden}, rng));
  init_adagravity(ps, c, rng);
  for (std::size_t l = 0; l < c.layers; ++l) {
    init_block(ps, block_prefix(l), c, block_kind(c, l), rng);
    ps.add(skip_prefix(l) + "W", xavier_uniform<T>({c.hidden, c.skip}, rng));
    ps.add(skip_prefix(l) + "b", Array<T>::zeros({c.skip}));
  }
  ps.add("decoder.W1", xavier_uniform<T>({c.skip, c.squeezed}, rng));
  ps.add("decoder.b1", Array<T>::zeros({c.squeezed}));
  ps.add("decoder.W2", xavier_uniform<T>({c.squeezed, 1}, rng));
  ps.add("decoder.b2", Array<T>::zeros({1}));
  ps.add("decoder.W_time", xavier_uniform<T>({c.input_steps, c.horizon}, rng));
  ps.add("decoder.b_time", Array<T>::zeros({c.horizon}));
  return ps;
}

template <class T>
void check_batch(const ModelConfig& c, const ModelBatch<T>& batch) {
  const Shape& s = batch.x_h.shape();
  if (s.size() != 4 || s[1] != c.num_nodes || s[2] != c.input_steps || s[3] != c.raw_channels)
    throw ConfigError("input " + shape_str(s) + " does not match config [B," + std::to_string(c.num_nodes) + "," +
                      std::to_string(c.input_steps) + "," + std::to_string(c.raw_channels) + "]");
  if (batch.x_in.shape() != s || batch.x_out.shape() != s)
    throw ConfigError("inflow/outflow inputs must match the activity input " + shape_str(s));
  if (batch.calendar.batch != s[0] || batch.calendar.steps != s[2]) throw ConfigError("calendar batch does not match inputs");
}

// Full forward pass in normalised units: [B, N, q, 1] inputs -> [B, N, p, 1].
template <class T>
Var<T> gravityformer_forward(Tape<T>& tape, const ParameterSet<T>& ps, const ModelConfig& c, const Array<T>& a_d,
                             const ModelBatch<T>& batch, ForwardTrace<T>* trace = nullptr) {
  check_batch(c, batch);
  if (a_d.shape() != Shape{c.num_nodes, c.num_nodes})
    throw ConfigError("distance kernel " + shape_str(a_d.shape()) + " does not match N = " + std::to_string(c.num_nodes));
  auto p = [&](const std::string& n) { return ps.bind(tape, n); };
  const std::size_t b = batch.x_h.shape()[0];

  Var<T> z = embed(tape, ps, tape.constant(batch.x_h), batch.calendar);
  Var<T> zl = z;
  if (!c.ablation.no_hadamard_mapper)
    zl = hadamard_map(z, p("mapper.W_H"), tape.constant(hadamard_matrix<T>(log2_exact(c.hidden))));

  Var<T> base, e_in, e_out;
  if (!c.ablation.no_adagravity) {
    base = c.ablation.adaptive_adjacency ? adaptive_adjacency(p("gravity.adj1"), p("gravity.adj2")) : tape.constant(a_d);
    if (!c.ablation.no_adaptive_scaling)
      base = hadamard(base, adaptive_scaling(p("gravity.S1"), p("gravity.S2"), static_cast<T>(c.kappa)));
    if (!c.ablation.no_flows) {
      e_in = add_bias(matmul(tape.constant(batch.x_in), p("gravity.W_in")), p("gravity.b_in"));
      e_out = add_bias(matmul(tape.constant(batch.x_out), p("gravity.W_out")), p("gravity.b_out"));
    }
  }

  std::vector<Var<T>> outs, skip_w;
  Var<T> skip_b;
  if (trace) trace->layers.clear();
  for (std::size_t l = 0; l < c.layers; ++l) {
    const BlockKind kind = block_kind(c, l);
    Var<T> a_ag;
    if (!c.ablation.no_adagravity && has_spatial(kind)) {
      auto [m_i, m_j] = compute_masses(e_in, e_out, z, zl);
      a_ag = gravity_matrix(m_i, m_j, base, p("gravity.G_raw"), p("gravity.alpha1_raw"), p("gravity.alpha2_raw"),
                            p("gravity.beta_raw"));
    }
    LayerTrace<T> lt;
    lt.kind = kind;
    zl = block_forward(tape, ps, block_prefix(l), zl, a_ag, trace ? &lt.block : nullptr);
    if (trace) {
      if (a_ag.valid()) lt.gravity = a_ag.value();
      lt.output = zl.value();
      trace->layers.push_back(std::move(lt));
    }
    outs.push_back(zl);
    skip_w.push_back(p(skip_prefix(l) + "W"));
    Var<T> b_l = p(skip_prefix(l) + "b");
    skip_b = skip_b.valid() ? add(skip_b, b_l) : b_l;
  }

  // sum_l (Z^(l) W_l + b_l) as a single product [Z^(1) .. Z^(L)] [W_1; ..; W_L]
  auto stack = [](const std::vector<Var<T>>& v, std::size_t axis) { return v.size() == 1 ? v[0] : concat(v, axis); };
  Var<T> skip_sum = add_bias(matmul(stack(outs, 3), stack(skip_w, 0)), skip_b);

  if (trace) trace->skip_sum = skip_sum.value();
  Var<T> hidden = relu(add_bias(matmul(skip_sum, p("decoder.W1")), p("decoder.b1")));
  Var<T> per_step = add_bias(matmul(hidden, p("decoder.W2")), p("decoder.b2"));  // [B,N,q,1]
  Var<T> flat = reshape(per_step, {b, c.num_nodes, c.input_steps});
  Var<T> out = add_bias(matmul(flat, p("decoder.W_time")), p("decoder.b_time"));  // [B,N,p]
  return reshape(out, {b, c.num_nodes, c.horizon, 1});
}

// Parameters plus the fixed distance kernel of one dataset.
template <class T>
class Gravityformer {
 public:
  Gravityformer(const ModelConfig& c, const Array<double>& distances)
      : Gravityformer(c, distances, init_parameters<T>(c)) {}

  Gravityformer(const ModelConfig& c, const Array<double>& distances, ParameterSet<T> params)
      : config_(c), kernel_(build_distance_kernel(distances, c.sigma_d)), params_(std::move(params)) {
    validate(config_);
    if (distances.shape() != Shape{c.num_nodes, c.num_nodes})
      throw ConfigError("config N = " + std::to_string(c.num_nodes) + " but distances are " + shape_str(distances.shape()));
    a_d_ = kernel_.a_d.cast<T>();
  }

  const ModelConfig& config() const { return config_; }
  const DistanceKernel& kernel() const { return kernel_; }
  const Array<T>& distance_kernel() const { return a_d_; }
  const ParameterSet<T>& params() const { return params_; }
  ParameterSet<T>& params() { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  Var<T> forward(Tape<T>& tape, const ModelBatch<T>& batch, ForwardTrace<T>* trace = nullptr) const {
    return gravityformer_forward(tape, params_, config_, a_d_, batch, trace);
  }

 private:
  ModelConfig config_;
  DistanceKernel kernel_;
  ParameterSet<T> params_;
  Array<T> a_d_;
};

}  // namespace gravityflow

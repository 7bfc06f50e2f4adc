#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gravityflow/config.hpp"
#include "gravityflow/ops.hpp"
#include "gravityflow/params.hpp"

namespace gravityflow {

inline constexpr double kMassFloor = 1e-6;

// T_ij = G * P_i^a1 * P_j^a2 / d_ij^beta with a zero diagonal.
inline Array<double> classic_gravity(const Array<double>& p_i, const Array<double>& p_j, const Array<double>& d, double g,
                                     double a1, double a2, double beta) {
  const std::size_t n = p_i.size();
  if (p_j.size() != n || d.shape() != Shape{n, n})
    throw DimensionError("classic_gravity: masses " + shape_str(p_i.shape()) + "/" + shape_str(p_j.shape()) +
                         " and distances " + shape_str(d.shape()) + " disagree");
  for (std::size_t i = 0; i < n; ++i)
    if (!(p_i[i] > 0) || !(p_j[i] > 0)) throw DomainError("classic_gravity: masses must be positive");
  Array<double> t({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dij = d[i * n + j];
      if (!(dij > 0)) throw DomainError("classic_gravity: off-diagonal distance must be positive");
      t[i * n + j] = g * std::pow(p_i[i], a1) * std::pow(p_j[j], a2) / std::pow(dij, beta);
    }
  return t;
}

struct DistanceKernel {
  Array<double> d;    // [N, N]
  Array<double> a_d;  // [N, N]
  double sigma_d = 1.0;
};

// Population standard deviation of the off-diagonal distances. Falls back to
// their mean when all of them coincide (e.g. N = 2), and to 1 when N < 2.
inline double auto_sigma(const Array<double>& d) {
  const std::size_t n = d.shape().at(0);
  if (n < 2) return 1.0;
  double s = 0, s2 = 0;
  const double cnt = static_cast<double>(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        s += d[i * n + j];
        s2 += d[i * n + j] * d[i * n + j];
      }
  const double mean = s / cnt;
  const double var = std::max(0.0, s2 / cnt - mean * mean);
  if (var > 1e-12 * mean * mean) return std::sqrt(var);
  return mean > 0 ? mean : 1.0;
}

inline DistanceKernel build_distance_kernel(const Array<double>& d, std::optional<double> sigma_d = std::nullopt) {
  if (d.rank() != 2 || d.shape()[0] != d.shape()[1]) throw DimensionError("distance matrix must be square, got " + shape_str(d.shape()));
  const std::size_t n = d.shape()[0];
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i * n + i] != 0) throw DomainError("distance matrix must have a zero diagonal");
    for (std::size_t j = 0; j < n; ++j) {
      if (d[i * n + j] < 0) throw DomainError("distances must be non-negative");
      if (d[i * n + j] != d[j * n + i]) throw DomainError("distance matrix must be symmetric");
    }
  }
  if (sigma_d && !(*sigma_d > 0)) throw ConfigError("sigma_d must be > 0, got " + std::to_string(*sigma_d));
  DistanceKernel k;
  k.d = d;
  k.sigma_d = sigma_d ? *sigma_d : auto_sigma(d);
  k.a_d = Array<double>(d.shape());
  for (std::size_t i = 0; i < d.size(); ++i) k.a_d[i] = std::exp(-d[i] * d[i] / (2.0 * k.sigma_d * k.sigma_d));
  return k;
}

// Parameters shared by every layer's gravity evaluation.
template <class T>
void init_adagravity(ParameterSet<T>& ps, const ModelConfig& c, std::mt19937_64& rng) {
  if (c.ablation.no_adagravity) return;
  ps.add("gravity.G_raw", Array<T>::scalar(T{0}));
  ps.add("gravity.alpha1_raw", Array<T>::scalar(T{0}));
  ps.add("gravity.alpha2_raw", Array<T>::scalar(T{0}));
  ps.add("gravity.beta_raw", Array<T>::scalar(T{0}));
  if (!c.ablation.no_adaptive_scaling) {
    ps.add("gravity.S1", xavier_uniform<T>({c.num_nodes, c.node_embed}, rng));
    ps.add("gravity.S2", xavier_uniform<T>({c.num_nodes, c.node_embed}, rng));
  }
  if (!c.ablation.no_flows) {
    ps.add("gravity.W_in", xavier_uniform<T>({1, c.feature_embed}, rng));
    ps.add("gravity.b_in", Array<T>::zeros({c.feature_embed}));
    ps.add("gravity.W_out", xavier_uniform<T>({1, c.feature_embed}, rng));
    ps.add("gravity.b_out", Array<T>::zeros({c.feature_embed}));
  }
  if (c.ablation.adaptive_adjacency) {
    ps.add("gravity.adj1", xavier_uniform<T>({c.num_nodes, c.node_embed}, rng));
    ps.add("gravity.adj2", xavier_uniform<T>({c.num_nodes, c.node_embed}, rng));
  }
}

// relu(tanh(kappa (E1 E2^T - E2 E1^T))), E_k = tanh(kappa S_k).
template <class T>
Var<T> adaptive_scaling(const Var<T>& s1, const Var<T>& s2, T kappa) {
  Var<T> e1 = tanh(mul_const(s1, kappa));
  Var<T> e2 = tanh(mul_const(s2, kappa));
  Var<T> arg = sub(matmul(e1, transpose(e2)), matmul(e2, transpose(e1)));
  return relu(tanh(mul_const(arg, kappa)));
}

// Learned replacement for A_d: sigmoid(U1 U2^T).
template <class T>
Var<T> adaptive_adjacency(const Var<T>& u1, const Var<T>& u2) {
  return sigmoid(matmul(u1, transpose(u2)));
}

// Pools the concatenated features over time and channels, then maps the
// pooled value to a positive mass with softplus + kMassFloor.
//   features: list of [B, N, q, *] arrays -> [B, N]
template <class T>
Var<T> pooled_mass(const std::vector<Var<T>>& features) {
  Var<T> cat = features.size() == 1 ? features[0] : concat(features, 3);
  return add_const(softplus(reduce_mean(cat, {2, 3})), static_cast<T>(kMassFloor));
}

// M_i from the inflow branch, M_j from the outflow branch. Without flows
// (e_in / e_out invalid) both reduce to the pooled hidden states.
template <class T>
std::pair<Var<T>, Var<T>> compute_masses(const Var<T>& e_in, const Var<T>& e_out, const Var<T>& z, const Var<T>& z_layer) {
  if (!e_in.valid() || !e_out.valid()) {
    Var<T> m = pooled_mass<T>({z, z_layer});
    return {m, m};
  }
  return {pooled_mass<T>({e_in, z, z_layer}), pooled_mass<T>({e_out, z, z_layer})};
}

struct GravityScalars {
  double g = 0, alpha1 = 0, alpha2 = 0, beta = 0;  // effective (post-softplus)
};

// A_ag[b,i,j] = sp(G) * M_i[b,i]^sp(a1) * M_j[b,j]^sp(a2) * max(A_d A_s, eps)^sp(beta)
//   base: [N, N] (A_d, or A_d * A_s), m_i / m_j: [B, N] -> [B, N, N]
template <class T>
Var<T> gravity_matrix(const Var<T>& m_i, const Var<T>& m_j, const Var<T>& base, const Var<T>& g_raw, const Var<T>& a1_raw,
                      const Var<T>& a2_raw, const Var<T>& beta_raw) {
  const Shape& ms = m_i.shape();
  if (ms.size() != 2 || m_j.shape() != ms) throw DimensionError("gravity_matrix: masses must both be [B,N], got " + shape_str(ms) + " and " + shape_str(m_j.shape()));
  const std::size_t b = ms[0], n = ms[1];
  if (base.shape() != Shape{n, n}) throw DimensionError("gravity_matrix: base " + shape_str(base.shape()) + " is not [N,N]");
  Var<T> decay = elementwise_pow(base, softplus(beta_raw));                    // [N,N]
  Var<T> pi = reshape(elementwise_pow(m_i, softplus(a1_raw)), {b, n, 1});
  Var<T> pj = reshape(elementwise_pow(m_j, softplus(a2_raw)), {b, 1, n});
  Var<T> outer = matmul(pi, pj);                                               // [B,N,N]
  Var<T> out = scale(hadamard(outer, broadcast_to(reshape(decay, {1, n, n}), {b, n, n})), softplus(g_raw));
  for (auto v : out.value().storage())
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("gravity_matrix: non-finite entry");
  return out;
}

template <class T>
GravityScalars effective_gravity_scalars(const ParameterSet<T>& ps) {
  auto sp = [&](const char* name) { return detail::softplus(static_cast<double>(ps.at(name)[0])); };
  return {sp("gravity.G_raw"), sp("gravity.alpha1_raw"), sp("gravity.alpha2_raw"), sp("gravity.beta_raw")};
}

}  // namespace gravityflow

#pragma once

#include <cmath>
#include <random>
#include <string>

#include "gravityflow/config.hpp"
#include "gravityflow/ops.hpp"
#include "gravityflow/params.hpp"

namespace gravityflow {

enum class BlockKind { parallel, temporal_only, spatial_only };

inline bool has_temporal(BlockKind k) { return k != BlockKind::spatial_only; }
inline bool has_spatial(BlockKind k) { return k != BlockKind::temporal_only; }

template <class T>
void init_block(ParameterSet<T>& ps, const std::string& prefix, const ModelConfig& c, BlockKind kind, std::mt19937_64& rng) {
  const std::size_t ci = c.hidden, cd = c.squeezed;
  auto w = [&](const std::string& name, Shape s) { ps.add(prefix + name, xavier_uniform<T>(s, rng)); };
  auto zeros = [&](const std::string& name, std::size_t k) { ps.add(prefix + name, Array<T>::zeros({k})); };
  auto ones = [&](const std::string& name, std::size_t k) { ps.add(prefix + name, Array<T>::ones({k})); };
  std::size_t branches = 0;
  if (has_temporal(kind)) {
    w("W_Qt", {ci, cd});
    w("W_Kt", {ci, cd});
    if (!c.ablation.no_conv2former) w("W_Vt", {ci, cd});
    w("W_T", {ci, cd});
    zeros("b_T", cd);
    ++branches;
  }
  if (has_spatial(kind)) {
    w("W_Qs", {ci, cd});
    w("W_Ks", {ci, cd});
    if (!c.ablation.no_conv2former) w("W_Vs", {ci, cd});
    w("W_S", {ci, cd});
    zeros("b_S", cd);
    ++branches;
  }
  w("W_Proj", {branches * cd, ci});
  zeros("b_Proj", ci);
  ones("ln1_g", ci);
  zeros("ln1_b", ci);
  w("ffn_W1", {ci, cd});
  zeros("ffn_b1", cd);
  w("ffn_W2", {ci, cd});
  zeros("ffn_b2", cd);
  w("ffn_W3", {cd, ci});
  zeros("ffn_b3", ci);
  ones("ln2_g", ci);
  zeros("ln2_b", ci);
}

namespace detail {

template <class T>
void require_finite(const Var<T>& v, const std::string& where) {
  for (auto x : v.value().storage())
    if (!std::isfinite(static_cast<double>(x))) throw NumericError("non-finite activation in " + where);
}

}  // namespace detail

// Q K^T / sqrt(C_d) over the second-to-last axis of x ([..., m, C_in]).
template <class T>
Var<T> scaled_scores(const Var<T>& x, const Var<T>& w_q, const Var<T>& w_k) {
  const T inv = T{1} / std::sqrt(static_cast<T>(w_q.shape().back()));
  return mul_const(matmul(matmul(x, w_q), transpose(matmul(x, w_k))), inv);
}

template <class T>
struct AttentionPair {
  Var<T> temporal;  // [B, N, q, q]
  Var<T> spatial;   // [B, q, N, N]
};

// z: [B, N, q, C_in]. Temporal scores are batched per node, spatial scores per
// time step.
template <class T>
AttentionPair<T> attention_scores(Tape<T>& tape, const ParameterSet<T>& ps, const std::string& prefix, const Var<T>& z) {
  AttentionPair<T> out;
  if (ps.contains(prefix + "W_Qt")) out.temporal = scaled_scores(z, ps.bind(tape, prefix + "W_Qt"), ps.bind(tape, prefix + "W_Kt"));
  if (ps.contains(prefix + "W_Qs"))
    out.spatial = scaled_scores(permute(z, {0, 2, 1, 3}), ps.bind(tape, prefix + "W_Qs"), ps.bind(tape, prefix + "W_Ks"));
  return out;
}

// relu(mix) aggregates x along the matching axis, then affine to C_d, then an
// entrywise product with v when v is valid.
//   mix: [..., m, m], x: [..., m, C_in] -> [..., m, C_d]
template <class T>
Var<T> branch_mix(const Var<T>& mix, const Var<T>& x, const Var<T>& w, const Var<T>& b, const Var<T>& v, bool apply_relu = true) {
  Var<T> agg = matmul(apply_relu ? relu(mix) : mix, matmul(x, w));
  Var<T> out = add_bias(agg, b);
  return v.valid() ? hadamard(out, v) : out;
}

// relu(A_S * A_ag) with A_ag replicated over the time axis.
//   a_s: [B, q, N, N], a_ag: [B, N, N]
template <class T>
Var<T> gravity_inform(const Var<T>& a_s, const Var<T>& a_ag) {
  const Shape& s = a_s.shape();
  if (s.size() != 4 || a_ag.shape() != Shape{s[0], s[2], s[3]})
    throw DimensionError("gravity_inform: A_S " + shape_str(s) + " and A_ag " + shape_str(a_ag.shape()) + " disagree");
  return relu(hadamard(a_s, broadcast_to(reshape(a_ag, {s[0], 1, s[2], s[3]}), s)));
}

// gelu(x W1 + b1) * (x W2 + b2), projected back to C_in by W3.
template <class T>
Var<T> glu_ffn(Tape<T>& tape, const ParameterSet<T>& ps, const std::string& prefix, const Var<T>& x) {
  auto p = [&](const char* n) { return ps.bind(tape, prefix + n); };
  Var<T> gate = gelu(add_bias(matmul(x, p("ffn_W1")), p("ffn_b1")));
  Var<T> lin = add_bias(matmul(x, p("ffn_W2")), p("ffn_b2"));
  return add_bias(matmul(hadamard(gate, lin), p("ffn_W3")), p("ffn_b3"));
}

template <class T>
struct BlockTrace {
  Array<T> spatial_scores;  // A_S, [B, q, N, N]
  Array<T> spatial_mix;     // matrix that aggregates the spatial branch
};

// One block: parallel temporal / gravity-informed spatial branches, concat,
// projection, residual + LayerNorm, GLU-FFN, residual + LayerNorm.
//   z_prev: [B, N, q, C_in]; a_ag: [B, N, N] or invalid (ungated spatial branch)
template <class T>
Var<T> block_forward(Tape<T>& tape, const ParameterSet<T>& ps, const std::string& prefix, const Var<T>& z_prev,
                     const Var<T>& a_ag, BlockTrace<T>* trace = nullptr) {
  auto p = [&](const char* n) { return ps.bind(tape, prefix + n); };
  auto opt = [&](const char* n) { return ps.contains(prefix + n) ? p(n) : Var<T>(); };
  const AttentionPair<T> att = attention_scores(tape, ps, prefix, z_prev);
  std::vector<Var<T>> branches;
  if (att.temporal.valid()) {
    detail::require_finite(att.temporal, prefix + "temporal_scores");
    Var<T> v = opt("W_Vt");
    if (v.valid()) v = matmul(z_prev, v);
    branches.push_back(branch_mix(att.temporal, z_prev, p("W_T"), p("b_T"), v));
  }
  if (att.spatial.valid()) {
    detail::require_finite(att.spatial, prefix + "spatial_scores");
    Var<T> zs = permute(z_prev, {0, 2, 1, 3});  // [B, q, N, C_in]
    Var<T> mix = a_ag.valid() ? gravity_inform(att.spatial, a_ag) : relu(att.spatial);
    Var<T> v = opt("W_Vs");
    if (v.valid()) v = matmul(zs, v);
    branches.push_back(permute(branch_mix(mix, zs, p("W_S"), p("b_S"), v, false), {0, 2, 1, 3}));
    if (trace) {
      trace->spatial_scores = att.spatial.value();
      trace->spatial_mix = mix.value();
    }
  }
  Var<T> cat = branches.size() == 1 ? branches[0] : concat(branches, 3);
  Var<T> proj = add_bias(matmul(cat, p("W_Proj")), p("b_Proj"));
  Var<T> h = layer_norm(add(proj, z_prev), p("ln1_g"), p("ln1_b"));
  detail::require_finite(h, prefix + "attention_residual");
  Var<T> out = layer_norm(add(glu_ffn(tape, ps, prefix, h), h), p("ln2_g"), p("ln2_b"));
  detail::require_finite(out, prefix + "ffn_residual");
  return out;
}

}  // namespace gravityflow

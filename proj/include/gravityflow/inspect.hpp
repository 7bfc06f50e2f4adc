#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gravityflow/diagnostics.hpp"
#include "gravityflow/model.hpp"
#include "gravityflow/training.hpp"

namespace gravityflow {

// Spatial matrices of one layer, averaged over a set of windows.
struct AttentionSnapshot {
  std::size_t layer = 0;   // 1-based
  std::size_t samples = 0;
  Array<double> attention;          // relu(A_S), mean over samples and time steps [N, N]
  Array<double> gravity_attention;  // matrix that actually aggregates the spatial branch, same averaging
  std::optional<Array<double>> gravity;  // A_ag mean over samples [N, N]; absent for ungated layers
  // Statistics over every per-(sample, time step) row, not over the means.
  double attention_sparsity = 0;
  double gravity_attention_sparsity = 0;
  double attention_entropy = 0;
  double gravity_attention_entropy = 0;
};

namespace detail {

template <class T>
void accumulate_time_mean(Array<double>& acc, const Array<T>& m) {
  // m: [B, q, N, N] -> sum over B and q
  const std::size_t n = m.shape()[3], blocks = m.size() / (n * n);
  for (std::size_t k = 0; k < blocks; ++k)
    for (std::size_t i = 0; i < n * n; ++i) acc[i] += static_cast<double>(m[k * n * n + i]);
}

template <class T>
Array<T> relu_copy(Array<T> a) {
  for (auto& v : a.storage()) v = v > T{0} ? v : T{0};
  return a;
}

}  // namespace detail

template <class T>
AttentionSnapshot attention_snapshot(const Gravityformer<T>& model, const DataPipeline& pl, const std::vector<std::size_t>& windows,
                                     std::size_t layer, std::size_t batch_size = 16) {
  const ModelConfig& c = model.config();
  if (layer < 1 || layer > c.layers)
    throw RangeError("layer " + std::to_string(layer) + " is outside 1.." + std::to_string(c.layers));
  if (!has_spatial(block_kind(c, layer - 1)))
    throw ConfigError("layer " + std::to_string(layer) + " has no spatial branch (sequential_st temporal block)");
  if (windows.empty()) throw RangeError("attention_snapshot needs at least one window");
  const std::size_t n = c.num_nodes;
  AttentionSnapshot s;
  s.layer = layer;
  s.attention = Array<double>::zeros({n, n});
  s.gravity_attention = Array<double>::zeros({n, n});
  Array<double> grav = Array<double>::zeros({n, n});
  bool gated = false;
  double sp_a = 0, sp_g = 0, en_a = 0, en_g = 0;
  std::size_t time_slices = 0;
  for (std::size_t b = 0; b < windows.size(); b += batch_size) {
    const std::vector<std::size_t> idx(windows.begin() + static_cast<long>(b),
                                       windows.begin() + static_cast<long>(std::min(windows.size(), b + batch_size)));
    auto [mb, y] = pl.batch<T>(idx);
    Tape<T> tape(false);
    ForwardTrace<T> trace;
    model.forward(tape, mb, &trace);
    const LayerTrace<T>& lt = trace.layers.at(layer - 1);
    const Array<T> att = detail::relu_copy(lt.block.spatial_scores);
    const Array<T>& mix = lt.block.spatial_mix;
    const std::size_t slices = att.size() / (n * n);
    // sparsity / entropy are row means, so weight each batch by its slices
    sp_a += sparsity(att) * static_cast<double>(slices);
    sp_g += sparsity(mix) * static_cast<double>(slices);
    en_a += row_entropy(att) * static_cast<double>(slices);
    en_g += row_entropy(mix) * static_cast<double>(slices);
    time_slices += slices;
    detail::accumulate_time_mean(s.attention, att);
    detail::accumulate_time_mean(s.gravity_attention, mix);
    if (lt.gravity.size() > 0) {
      gated = true;
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t i = 0; i < n * n; ++i) grav[i] += static_cast<double>(lt.gravity[k * n * n + i]);
    }
  }
  const double ts = static_cast<double>(time_slices);
  for (auto& v : s.attention.storage()) v /= ts;
  for (auto& v : s.gravity_attention.storage()) v /= ts;
  if (gated) {
    for (auto& v : grav.storage()) v /= static_cast<double>(windows.size());
    s.gravity = std::move(grav);
  }
  s.samples = windows.size();
  s.attention_sparsity = sp_a / ts;
  s.gravity_attention_sparsity = sp_g / ts;
  s.attention_entropy = en_a / ts;
  s.gravity_attention_entropy = en_g / ts;
  return s;
}

inline std::vector<std::size_t> range_indices(IndexRange r, std::size_t limit = SIZE_MAX) {
  std::vector<std::size_t> v;
  for (std::size_t w = r.begin; w < r.end && v.size() < limit; ++w) v.push_back(w);
  return v;
}

}  // namespace gravityflow

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gravityflow/config.hpp"
#include "gravityflow/dataset.hpp"
#include "gravityflow/ops.hpp"
#include "gravityflow/params.hpp"

namespace gravityflow {

// Calendar indices for a batch of windows, flattened row-major as [B, q].
struct CalendarBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::int64_t> time_of_day;
  std::vector<std::int64_t> day_of_week;
  std::vector<std::int64_t> holiday;
};

inline CalendarBatch stack_timestamps(const std::vector<TimestampFeatures>& windows) {
  CalendarBatch cb;
  cb.batch = windows.size();
  cb.steps = windows.empty() ? 0 : windows.front().length();
  for (const auto& w : windows) {
    if (w.length() != cb.steps) throw DimensionError("timestamp windows differ in length");
    cb.time_of_day.insert(cb.time_of_day.end(), w.time_of_day.begin(), w.time_of_day.end());
    cb.day_of_week.insert(cb.day_of_week.end(), w.day_of_week.begin(), w.day_of_week.end());
    cb.holiday.insert(cb.holiday.end(), w.holiday.begin(), w.holiday.end());
  }
  return cb;
}

inline std::size_t embedding_concat_width(const ModelConfig& c) {
  return 3 * c.time_embed + c.adaptive_embed + c.feature_embed;
}

template <class T>
void init_embedding(ParameterSet<T>& ps, const ModelConfig& c, std::mt19937_64& rng) {
  ps.add("embed.E_d", xavier_uniform<T>({c.steps_per_day, c.time_embed}, rng));
  ps.add("embed.E_w", xavier_uniform<T>({7, c.time_embed}, rng));
  ps.add("embed.E_h", xavier_uniform<T>({2, c.time_embed}, rng));
  ps.add("embed.E_a", xavier_uniform<T>({c.num_nodes, c.input_steps, c.adaptive_embed}, rng));
  ps.add("embed.W_f", xavier_uniform<T>({c.raw_channels, c.feature_embed}, rng));
  ps.add("embed.b_f", Array<T>::zeros({c.feature_embed}));
  ps.add("embed.W_o", xavier_uniform<T>({embedding_concat_width(c), c.hidden}, rng));
  ps.add("embed.b_o", Array<T>::zeros({c.hidden}));
}

// x_h: [B, N, q, C] -> Z: [B, N, q, C_in].
// Calendar rows are looked up per (sample, step) and shared by all nodes;
// E_a is indexed by node and within-window position.
template <class T>
Var<T> embed(Tape<T>& tape, const ParameterSet<T>& ps, const Var<T>& x_h, const CalendarBatch& ts) {
  const Shape& xs = x_h.shape();
  if (xs.size() != 4) throw DimensionError("embed: x_h must be [B,N,q,C], got " + shape_str(xs));
  const std::size_t b = xs[0], n = xs[1], q = xs[2];
  if (ts.batch != b || ts.steps != q)
    throw DimensionError("embed: calendar batch [" + std::to_string(ts.batch) + "," + std::to_string(ts.steps) +
                         "] does not match x_h " + shape_str(xs));
  const Shape index_shape{b, 1, q};
  auto calendar = [&](const char* name, const std::vector<std::int64_t>& idx) {
    Var<T> rows = gather_rows(ps.bind(tape, name), idx, index_shape);  // [B,1,q,C_t]
    return broadcast_to(rows, {b, n, q, rows.shape().back()});
  };
  Var<T> e_f = add_bias(matmul(x_h, ps.bind(tape, "embed.W_f")), ps.bind(tape, "embed.b_f"));
  Var<T> e_d = calendar("embed.E_d", ts.time_of_day);
  Var<T> e_w = calendar("embed.E_w", ts.day_of_week);
  Var<T> e_h = calendar("embed.E_h", ts.holiday);
  Var<T> e_a = ps.bind(tape, "embed.E_a");
  if (e_a.shape()[0] != n || e_a.shape()[1] != q)
    throw DimensionError("embed: E_a " + shape_str(e_a.shape()) + " does not cover x_h " + shape_str(xs));
  e_a = broadcast_to(reshape(e_a, {1, n, q, e_a.shape()[2]}), {b, n, q, e_a.shape()[2]});
  Var<T> cat = concat<T>({e_d, e_w, e_h, e_a, e_f}, 3);
  return add_bias(matmul(cat, ps.bind(tape, "embed.W_o")), ps.bind(tape, "embed.b_o"));
}

}  // namespace gravityflow

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "gravityflow/config.hpp"
#include "gravityflow/dataset.hpp"
#include "gravityflow/model.hpp"

namespace gravityflow {

inline constexpr double kMapeFloor = 1.0;

// ------------------------------------------------------------------- scaler

struct ZScoreScaler {
  double mean = 0;
  double std = 1;

  // Population statistics. A constant sample gets std = 1 so that the
  // transform stays invertible.
  static ZScoreScaler fit(const std::vector<double>& values) {
    if (values.empty()) throw RangeError("cannot fit a scaler on an empty sample");
    ZScoreScaler s;
    double sum = 0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    var /= static_cast<double>(values.size());
    s.std = var > 0 ? std::sqrt(var) : 1.0;
    return s;
  }

  double apply(double x) const { return (x - mean) / std; }
  double invert(double z) const { return z * std + mean; }
  bool operator==(const ZScoreScaler&) const = default;
};

// ------------------------------------------------------------------ windows

struct Window {
  std::size_t start = 0;         // first input step
  std::size_t target_start = 0;  // = start + q
};

inline std::size_t window_count(std::size_t steps, std::size_t q, std::size_t p) {
  if (steps < q + p)
    throw RangeError("panel of " + std::to_string(steps) + " steps is shorter than q + p = " + std::to_string(q + p));
  return steps - q - p + 1;
}

inline std::vector<Window> make_windows(const PanelDataset& ds, std::size_t q, std::size_t p) {
  std::vector<Window> w(window_count(ds.num_steps(), q, p));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = {i, i + q};
  return w;
}

struct IndexRange {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

// Contiguous chronological 7:1:2 split over window indices.
struct WindowSplit {
  IndexRange train, val, test;
  bool operator==(const WindowSplit&) const = default;
};

inline WindowSplit split_windows(std::size_t windows) {
  const std::size_t n_train = windows * 7 / 10;
  const std::size_t n_val = windows / 10;
  if (n_train == 0 || n_val == 0 || windows - n_train - n_val == 0)
    throw RangeError("too few windows (" + std::to_string(windows) + ") for a 7:1:2 split");
  return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, windows}};
}

inline IndexRange split_range(const WindowSplit& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

// ----------------------------------------------------------------- pipeline

// Windows, split and scalers for one dataset. Scalers see only the steps that
// training windows touch (inputs and targets).
class DataPipeline {
 public:
  DataPipeline(const PanelDataset& ds, std::size_t q, std::size_t p) : ds_(&ds), q_(q), p_(p) {
    windows_ = make_windows(ds, q, p);
    split_ = split_windows(windows_.size());
    const std::size_t last_step = windows_[split_.train.end - 1].target_start + p;  // exclusive
    const std::size_t n = ds.num_nodes();
    std::vector<double> act, flow;
    for (std::size_t t = 0; t < last_step; ++t)
      for (std::size_t j = 0; j < n; ++j) {
        act.push_back(ds.activity[t * n + j]);
        flow.push_back(ds.inflow[t * n + j]);
        flow.push_back(ds.outflow[t * n + j]);
      }
    activity_scaler_ = ZScoreScaler::fit(act);
    flow_scaler_ = ZScoreScaler::fit(flow);
  }

  DataPipeline(const PanelDataset& ds, std::size_t q, std::size_t p, ZScoreScaler activity, ZScoreScaler flow)
      : DataPipeline(ds, q, p) {
    activity_scaler_ = activity;
    flow_scaler_ = flow;
  }

  const PanelDataset& dataset() const { return *ds_; }
  const std::vector<Window>& windows() const { return windows_; }
  const WindowSplit& split() const { return split_; }
  const ZScoreScaler& activity_scaler() const { return activity_scaler_; }
  const ZScoreScaler& flow_scaler() const { return flow_scaler_; }
  std::size_t input_steps() const { return q_; }
  std::size_t horizon() const { return p_; }

  // Normalised inputs for the given window indices plus raw targets [B,N,p,1].
  template <class T>
  std::pair<ModelBatch<T>, Array<T>> batch(const std::vector<std::size_t>& idx) const {
    const std::size_t b = idx.size(), n = ds_->num_nodes();
    ModelBatch<T> mb;
    mb.x_h = Array<T>({b, n, q_, 1});
    mb.x_in = Array<T>({b, n, q_, 1});
    mb.x_out = Array<T>({b, n, q_, 1});
    Array<T> y({b, n, p_, 1});
    std::vector<TimestampFeatures> cal;
    for (std::size_t k = 0; k < b; ++k) {
      const Window& w = windows_.at(idx[k]);
      cal.push_back(extract_timestamps(w.start, q_, ds_->meta));
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t s = 0; s < q_; ++s) {
          const std::size_t src = (w.start + s) * n + j, dst = (k * n + j) * q_ + s;
          mb.x_h[dst] = static_cast<T>(activity_scaler_.apply(ds_->activity[src]));
          mb.x_in[dst] = static_cast<T>(flow_scaler_.apply(ds_->inflow[src]));
          mb.x_out[dst] = static_cast<T>(flow_scaler_.apply(ds_->outflow[src]));
        }
        for (std::size_t s = 0; s < p_; ++s) y[(k * n + j) * p_ + s] = static_cast<T>(ds_->activity[(w.target_start + s) * n + j]);
      }
    }
    mb.calendar = stack_timestamps(cal);
    return {std::move(mb), std::move(y)};
  }

 private:
  const PanelDataset* ds_;
  std::size_t q_, p_;
  std::vector<Window> windows_;
  WindowSplit split_;
  ZScoreScaler activity_scaler_, flow_scaler_;
};

// Model output in raw activity units.
template <class T>
Var<T> denormalize(const Var<T>& y_norm, const ZScoreScaler& s) {
  return add_const(mul_const(y_norm, static_cast<T>(s.std)), static_cast<T>(s.mean));
}

// --------------------------------------------------------------------- adam

template <class T>
struct AdamState {
  double lr = 0.002, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0005;
  std::size_t step = 0;
  std::map<std::string, Array<T>> m, v;

  static AdamState from(const TrainConfig& t) {
    AdamState s;
    s.lr = t.learning_rate;
    s.beta1 = t.beta1;
    s.beta2 = t.beta2;
    s.eps = t.adam_eps;
    s.weight_decay = t.weight_decay;
    return s;
  }
};

// theta <- theta (1 - lr wd), then the bias-corrected Adam delta. Parameters
// without a gradient entry are treated as having a zero gradient.
template <class T>
void adam_step(ParameterSet<T>& params, const std::map<std::string, Array<T>>& grads, AdamState<T>& st) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) continue;
    if (g.shape() != params.at(name).shape())
      throw DimensionError("adam_step: gradient " + shape_str(g.shape()) + " for '" + name + "' does not match " +
                           shape_str(params.at(name).shape()));
    for (auto x : g.storage())
      if (!std::isfinite(static_cast<double>(x))) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const double decay = 1.0 - st.lr * st.weight_decay;
  for (auto& e : params.entries()) {
    auto& m = st.m.try_emplace(e.name, Array<T>::zeros(e.value.shape())).first->second;
    auto& v = st.v.try_emplace(e.name, Array<T>::zeros(e.value.shape())).first->second;
    const auto it = grads.find(e.name);
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = it == grads.end() ? 0.0 : static_cast<double>(it->second[i]);
      const double mi = st.beta1 * static_cast<double>(m[i]) + (1 - st.beta1) * g;
      const double vi = st.beta2 * static_cast<double>(v[i]) + (1 - st.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double delta = st.lr * (mi / bc1) / (std::sqrt(vi / bc2) + st.eps);
      e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) * decay - delta);
    }
  }
}

// ------------------------------------------------------------------ metrics

struct MetricLine {
  double rmse = 0, mae = 0;
  std::optional<double> mape;  // percent; absent when every target is below the floor
  std::size_t mape_excluded = 0;
  std::size_t count = 0;
};

struct MetricsReport : MetricLine {
  std::vector<MetricLine> per_horizon;
  std::vector<MetricLine> per_node;
};

namespace detail {

struct MetricAccumulator {
  double se = 0, ae = 0, ape = 0;
  std::size_t n = 0, included = 0, excluded = 0;

  void add(double y, double yh, double floor) {
    const double e = yh - y;
    se += e * e;
    ae += std::abs(e);
    ++n;
    if (std::abs(y) >= floor) {
      ape += std::abs(e) / std::abs(y);
      ++included;
    } else {
      ++excluded;
    }
  }

  MetricLine line() const {
    MetricLine m;
    m.count = n;
    if (n == 0) return m;
    m.rmse = std::sqrt(se / static_cast<double>(n));
    m.mae = ae / static_cast<double>(n);
    if (included > 0) m.mape = 100.0 * ape / static_cast<double>(included);
    m.mape_excluded = excluded;
    return m;
  }
};

}  // namespace detail

// RMSE / MAE over all elements, MAPE over |y| >= mape_floor. When both arrays
// are [W, N, p] (or [W, N, p, 1]) the per-horizon and per-node breakdowns are
// filled as well.
template <class A, class B>
MetricsReport evaluate(const Array<A>& y, const Array<B>& y_hat, double mape_floor = kMapeFloor) {
  if (y.shape() != y_hat.shape())
    throw DimensionError("evaluate: shapes " + shape_str(y.shape()) + " and " + shape_str(y_hat.shape()) + " differ");
  detail::MetricAccumulator all;
  const auto& s = y.shape();
  const bool grid = s.size() >= 3;
  const std::size_t n = grid ? s[1] : 0, p = grid ? s[2] : 0;
  std::vector<detail::MetricAccumulator> hz(p), nd(n);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = static_cast<double>(y[i]), b = static_cast<double>(y_hat[i]);
    all.add(a, b, mape_floor);
    if (grid) {
      const std::size_t h = (i / (y.size() / (s[0] * n * p))) % p;
      const std::size_t node = (i / (y.size() / (s[0] * n))) % n;
      hz[h].add(a, b, mape_floor);
      nd[node].add(a, b, mape_floor);
    }
  }
  MetricsReport r;
  static_cast<MetricLine&>(r) = all.line();
  for (const auto& acc : hz) r.per_horizon.push_back(acc.line());
  for (const auto& acc : nd) r.per_node.push_back(acc.line());
  return r;
}

// ------------------------------------------------------------------ HA

// Per-node mean of training activity for every (time-of-day, day-of-week)
// slot; slots never seen in training fall back to the node's overall mean.
class HistoricalAverage {
 public:
  HistoricalAverage(const PanelDataset& ds, std::size_t train_steps) : ds_(&ds) {
    const std::size_t n = ds.num_nodes(), d = ds.meta.steps_per_day;
    if (train_steps == 0) throw RangeError("historical average needs a non-empty training range");
    sums_.assign(d * 7 * n, 0.0);
    counts_.assign(d * 7, 0);
    node_mean_.assign(n, 0.0);
    const auto ts = extract_timestamps(0, train_steps, ds.meta);
    for (std::size_t t = 0; t < train_steps; ++t) {
      const std::size_t slot = static_cast<std::size_t>(ts.day_of_week[t]) * d + static_cast<std::size_t>(ts.time_of_day[t]);
      ++counts_[slot];
      for (std::size_t j = 0; j < n; ++j) {
        sums_[slot * n + j] += ds.activity[t * n + j];
        node_mean_[j] += ds.activity[t * n + j];
      }
    }
    for (auto& m : node_mean_) m /= static_cast<double>(train_steps);
  }

  double predict(std::size_t step, std::size_t node) const {
    const std::size_t n = ds_->num_nodes(), d = ds_->meta.steps_per_day;
    const auto ts = extract_timestamps(step, 1, ds_->meta);
    const std::size_t slot = static_cast<std::size_t>(ts.day_of_week[0]) * d + static_cast<std::size_t>(ts.time_of_day[0]);
    return counts_[slot] ? sums_[slot * n + node] / static_cast<double>(counts_[slot]) : node_mean_[node];
  }

  // [W, N, p] predictions for a window range.
  Array<double> predict_windows(const std::vector<Window>& windows, IndexRange r, std::size_t p) const {
    const std::size_t n = ds_->num_nodes();
    Array<double> out({r.size(), n, p});
    for (std::size_t w = r.begin; w < r.end; ++w)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t s = 0; s < p; ++s) out[((w - r.begin) * n + j) * p + s] = predict(windows[w].target_start + s, j);
    return out;
  }

 private:
  const PanelDataset* ds_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
  std::vector<double> node_mean_;
};

// Steps covered by the training windows (inputs and targets).
inline std::size_t training_steps(const DataPipeline& pl) {
  return pl.windows()[pl.split().train.end - 1].target_start + pl.horizon();
}

inline Array<double> ha_baseline(const DataPipeline& pl, const std::string& split) {
  HistoricalAverage ha(pl.dataset(), training_steps(pl));
  return ha.predict_windows(pl.windows(), split_range(pl.split(), split), pl.horizon());
}

// Raw-scale targets [W, N, p] for a window range.
inline Array<double> targets(const DataPipeline& pl, IndexRange r) {
  const auto& ds = pl.dataset();
  const std::size_t n = ds.num_nodes(), p = pl.horizon();
  Array<double> y({r.size(), n, p});
  for (std::size_t w = r.begin; w < r.end; ++w)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t s = 0; s < p; ++s) y[((w - r.begin) * n + j) * p + s] = ds.activity[(pl.windows()[w].target_start + s) * n + j];
  return y;
}

// ------------------------------------------------------------ inference

inline std::size_t thread_budget() {
  if (const char* v = std::getenv("GRAVITYFLOW_THREADS")) {
    try {
      const long k = std::stol(v);
      if (k >= 1) return static_cast<std::size_t>(k);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("GRAVITYFLOW_THREADS must be a positive integer, got '") + v + "'");
  }
  return 1;
}

// Raw-scale predictions [W, N, p] for a window range. Chunks are independent,
// so with several threads each worker owns its tapes and the result is the
// same as the single-threaded one.
template <class T>
Array<double> predict(const Gravityformer<T>& model, const DataPipeline& pl, IndexRange r, std::size_t batch_size = 64,
                      std::size_t threads = 1) {
  const std::size_t n = model.config().num_nodes, p = model.config().horizon;
  Array<double> out({r.size(), n, p});
  std::vector<IndexRange> chunks;
  for (std::size_t b = r.begin; b < r.end; b += batch_size) chunks.push_back({b, std::min(r.end, b + batch_size)});
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t c = first; c < chunks.size(); c += stride) {
      std::vector<std::size_t> idx;
      for (std::size_t w = chunks[c].begin; w < chunks[c].end; ++w) idx.push_back(w);
      auto [mb, y] = pl.batch<T>(idx);
      Tape<T> tape(false);
      const auto yh = denormalize(model.forward(tape, mb), pl.activity_scaler()).value();
      const std::size_t off = (chunks[c].begin - r.begin) * n * p;
      for (std::size_t i = 0; i < yh.size(); ++i) out[off + i] = static_cast<double>(yh[i]);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(work, k, threads);
    for (auto& th : pool) th.join();
  }
  return out;
}

// ---------------------------------------------------------------- training

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;  // mean batch L1, raw units
  MetricsReport train, val;
  double seconds = 0;
};

template <class T>
struct TrainResult {
  Gravityformer<T> best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = untrained initialisation
  std::optional<double> best_val_rmse;
  ZScoreScaler activity_scaler, flow_scaler;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Seeded Fisher-Yates on top of uniform01 so the order is the same on every
// standard library.
inline void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

template <class T>
TrainResult<T> train(ModelConfig cfg, const TrainConfig& tc, const PanelDataset& ds, std::size_t epochs, std::uint64_t seed,
                     const EpochCallback& on_epoch = {}) {
  cfg.seed = seed;
  validate(cfg);
  validate(tc);
  if (cfg.num_nodes != ds.num_nodes())
    throw ConfigError("config has N = " + std::to_string(cfg.num_nodes) + " but the dataset has " + std::to_string(ds.num_nodes()) + " nodes");
  if (cfg.steps_per_day != ds.meta.steps_per_day)
    throw ConfigError("config has D = " + std::to_string(cfg.steps_per_day) + " but the dataset has " +
                      std::to_string(ds.meta.steps_per_day) + " steps per day");
  const DataPipeline pl(ds, cfg.input_steps, cfg.horizon);
  const Array<double> dist = ds.distances.cast<double>();
  Gravityformer<T> model(cfg, dist);
  TrainResult<T> res{model, {}, 0, std::nullopt, pl.activity_scaler(), pl.flow_scaler()};
  if (epochs == 0) return res;

  const std::size_t threads = thread_budget();
  AdamState<T> adam = AdamState<T>::from(tc);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto val_y = targets(pl, pl.split().val);
  std::vector<std::size_t> order;
  for (std::size_t w = pl.split().train.begin; w < pl.split().train.end; ++w) order.push_back(w);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_indices(order, rng);
    std::vector<double> seen_y, seen_yh;
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(b),
                                         order.begin() + static_cast<long>(std::min(order.size(), b + tc.batch_size)));
      auto [mb, y] = pl.batch<T>(idx);
      Tape<T> tape;
      Var<T> pred = denormalize(model.forward(tape, mb), pl.activity_scaler());
      Var<T> loss = l1_loss(tape.constant(y), pred);
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches + 1));
      tape.backward(loss);
      adam_step(model.params(), tape.parameter_grads(), adam);
      loss_sum += lv;
      ++batches;
      for (std::size_t i = 0; i < y.size(); ++i) {
        seen_y.push_back(y[i]);
        seen_yh.push_back(pred.value()[i]);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.train = evaluate(Array<double>({seen_y.size()}, seen_y), Array<double>({seen_yh.size()}, seen_yh));
    rec.val = evaluate(val_y, predict(model, pl, pl.split().val, 64, threads));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!res.best_val_rmse || rec.val.rmse < *res.best_val_rmse) {
      res.best_val_rmse = rec.val.rmse;
      res.best_epoch = epoch;
      res.best = model;
    }
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

// ------------------------------------------------------------------ CSV log

inline std::string format_mape(const std::optional<double>& m) {
  if (!m) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *m);
  return buf;
}

inline std::string metrics_csv_header() { return "epoch,split,rmse,mae,mape,seconds"; }

inline std::string metrics_csv_row(std::size_t epoch, const std::string& split, const MetricLine& m, double seconds) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%s,%.3f", epoch, split.c_str(), m.rmse, m.mae, format_mape(m.mape).c_str(),
                seconds);
  return buf;
}

}  // namespace gravityflow

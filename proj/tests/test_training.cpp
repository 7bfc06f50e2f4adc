#include <gtest/gtest.h>

#include <cmath>

#include "gravityflow/synthetic.hpp"
#include "gravityflow/training.hpp"
#include "support/toy.hpp"

using namespace gravityflow;

namespace {

// S x N panel with activity f(t, j) and flows equal to a tenth of it.
template <class F>
PanelDataset make_panel(std::size_t steps, std::size_t nodes, std::size_t per_day, F f) {
  PanelDataset ds;
  ds.meta.num_steps = steps;
  ds.meta.num_nodes = nodes;
  ds.meta.steps_per_day = per_day;
  ds.meta.start_date = "2024-11-04";
  ds.meta.start_weekday = weekday_of(ds.meta.start_date);
  for (std::size_t j = 0; j < nodes; ++j) ds.meta.nodes.push_back({"n" + std::to_string(j), double(j), 0.0});
  ds.activity = Array<float>({steps, nodes});
  ds.inflow = Array<float>({steps, nodes});
  ds.outflow = Array<float>({steps, nodes});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t j = 0; j < nodes; ++j) {
      ds.activity[t * nodes + j] = static_cast<float>(f(t, j));
      ds.inflow[t * nodes + j] = static_cast<float>(0.1 * f(t, j));
      ds.outflow[t * nodes + j] = static_cast<float>(0.1 * f(t + 1, j));
    }
  ds.distances = toy::random_distances(nodes, 3).cast<float>();
  return ds;
}

PanelDataset toy_city() {
  ScenarioOverrides o;
  o.steps_per_day = 6;
  return simulate(generate_scenario(5, 4, 21, o));
}

}  // namespace

TEST(Scaler, FitAndInvert) {
  const auto s = ZScoreScaler::fit({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(1.25), 1e-15);
  for (double x : {-3.0, 0.0, 17.5}) EXPECT_NEAR(s.invert(s.apply(x)), x, 1e-12);
}

TEST(Scaler, ConstantSampleKeepsUnitStd) {
  const auto s = ZScoreScaler::fit({4, 4, 4});
  EXPECT_EQ(s.std, 1.0);
  EXPECT_EQ(s.apply(4), 0.0);
}

TEST(Windows, CountAndPlacement) {
  const auto ds = make_panel(20, 2, 6, [](std::size_t t, std::size_t) { return double(t); });
  const auto w = make_windows(ds, 12, 4);
  ASSERT_EQ(w.size(), 5u);
  EXPECT_EQ(w.front().target_start, 12u);
  EXPECT_EQ(w.back().target_start + 4, 20u);
}

TEST(Windows, TooShortPanel) {
  const auto ds = make_panel(15, 2, 6, [](std::size_t, std::size_t) { return 1.0; });
  EXPECT_THROW(make_windows(ds, 12, 4), RangeError);
}

TEST(Split, SevenOneTwo) {
  const auto s = split_windows(100);
  EXPECT_EQ(s.train, (IndexRange{0, 70}));
  EXPECT_EQ(s.val, (IndexRange{70, 80}));
  EXPECT_EQ(s.test, (IndexRange{80, 100}));
  const auto odd = split_windows(1329);
  EXPECT_EQ(odd.train.size(), 930u);
  EXPECT_EQ(odd.val.size(), 132u);
  EXPECT_EQ(odd.test.size(), 267u);
  EXPECT_EQ(odd, split_windows(1329));
  EXPECT_THROW(split_windows(5), RangeError);
}

TEST(Pipeline, ScalerIgnoresLaterSplits) {
  auto f = [](std::size_t t, std::size_t j) { return 3.0 + std::sin(0.3 * double(t)) + double(j); };
  auto a = make_panel(200, 3, 6, f);
  auto b = a;
  const DataPipeline pa(a, 12, 4);
  const std::size_t first_test_target = pa.windows()[pa.split().test.begin].target_start;
  for (std::size_t t = first_test_target; t < 200; ++t)
    for (std::size_t j = 0; j < 3; ++j) {
      b.activity[t * 3 + j] += 1000.0f;
      b.inflow[t * 3 + j] -= 50.0f;
    }
  const DataPipeline pb(b, 12, 4);
  EXPECT_EQ(pa.activity_scaler(), pb.activity_scaler());
  EXPECT_EQ(pa.flow_scaler(), pb.flow_scaler());
}

TEST(Pipeline, BatchContents) {
  auto f = [](std::size_t t, std::size_t j) { return double(10 * t + j); };
  const auto ds = make_panel(40, 2, 6, f);
  const DataPipeline pl(ds, 4, 2);
  auto [mb, y] = pl.batch<double>({3});
  EXPECT_EQ(mb.x_h.shape(), (Shape{1, 2, 4, 1}));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 1}));
  const auto& s = pl.activity_scaler();
  EXPECT_NEAR(s.invert(mb.x_h[0]), f(3, 0), 1e-9);
  EXPECT_NEAR(s.invert(mb.x_h[4 + 3]), f(6, 1), 1e-9);
  EXPECT_EQ(y[0], f(7, 0));
  EXPECT_EQ(y[2 + 1], f(8, 1));
  EXPECT_EQ(mb.calendar.time_of_day[0], 3);
  EXPECT_EQ(mb.calendar.time_of_day[3], 0);
  EXPECT_EQ(mb.calendar.day_of_week[3], 1);
}

TEST(Adam, ZeroGradientNoDecayIsFixed) {
  ParameterSet<double> ps;
  ps.add("w", Array<double>::from({3}, {1, -2, 3}));
  AdamState<double> st;
  st.weight_decay = 0;
  adam_step(ps, {{"w", Array<double>::zeros({3})}}, st);
  EXPECT_EQ(ps.at("w"), Array<double>::from({3}, {1, -2, 3}));
}

TEST(Adam, FirstStepIsMinusLr) {
  ParameterSet<double> ps;
  ps.add("w", Array<double>::from({2}, {0.5, 0.5}));
  AdamState<double> st;
  st.weight_decay = 0;
  adam_step(ps, {{"w", Array<double>::from({2}, {1, 1})}}, st);
  EXPECT_NEAR(ps.at("w")[0] - 0.5, -0.002, 1e-10);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, DecoupledDecayFactor) {
  ParameterSet<double> ps;
  ps.add("w", Array<double>::from({1}, {4}));
  AdamState<double> st;
  adam_step(ps, {{"w", Array<double>::zeros({1})}}, st);
  EXPECT_NEAR(ps.at("w")[0], 4 * (1 - 1e-6), 1e-15);
}

TEST(Adam, ZeroLrNoDecayIgnoresGradients) {
  ParameterSet<double> ps;
  ps.add("w", Array<double>::from({2}, {1, 2}));
  AdamState<double> st;
  st.lr = 0;
  st.weight_decay = 0;
  for (int k = 0; k < 3; ++k) adam_step(ps, {{"w", Array<double>::from({2}, {5, -7})}}, st);
  EXPECT_EQ(ps.at("w"), Array<double>::from({2}, {1, 2}));
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParameterSet<double> ps;
  ps.add("block0.W_T", Array<double>::zeros({1}));
  AdamState<double> st;
  try {
    adam_step(ps, {{"block0.W_T", Array<double>::from({1}, {NAN})}}, st);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block0.W_T"), std::string::npos);
  }
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, ShapeMismatch) {
  ParameterSet<double> ps;
  ps.add("w", Array<double>::zeros({2}));
  AdamState<double> st;
  EXPECT_THROW(adam_step(ps, {{"w", Array<double>::zeros({3})}}, st), DimensionError);
}

TEST(Metrics, HandComputed) {
  const auto same = evaluate(Array<double>::from({3}, {1, 2, 3}), Array<double>::from({3}, {1, 2, 3}));
  EXPECT_EQ(same.rmse, 0);
  EXPECT_EQ(same.mae, 0);
  EXPECT_EQ(*same.mape, 0);

  const auto one = evaluate(Array<double>::from({1}, {10}), Array<double>::from({1}, {12}));
  EXPECT_NEAR(one.rmse, 2, 1e-12);
  EXPECT_NEAR(one.mae, 2, 1e-12);
  EXPECT_NEAR(*one.mape, 20, 1e-12);

  const auto floor = evaluate(Array<double>::from({2}, {0, 10}), Array<double>::from({2}, {1, 11}));
  EXPECT_NEAR(*floor.mape, 10, 1e-12);
  EXPECT_EQ(floor.mape_excluded, 1u);
}

TEST(Metrics, AllExcludedMapeIsAbsent) {
  const auto r = evaluate(Array<double>::from({2}, {0, 0.5}), Array<double>::from({2}, {1, 1}));
  EXPECT_FALSE(r.mape.has_value());
  EXPECT_EQ(r.mape_excluded, 2u);
}

TEST(Metrics, Symmetry) {
  std::mt19937_64 rng(8);
  const auto a = toy::random_array<double>({5, 3, 2}, rng, 4), b = toy::random_array<double>({5, 3, 2}, rng, 4);
  EXPECT_DOUBLE_EQ(evaluate(a, b).rmse, evaluate(b, a).rmse);
  EXPECT_DOUBLE_EQ(evaluate(a, b).mae, evaluate(b, a).mae);
  EXPECT_THROW(evaluate(a, Array<double>::zeros({5, 3})), DimensionError);
}

TEST(Metrics, Breakdowns) {
  // [W=1, N=2, p=2]; error only at node 1, horizon 0
  const auto y = Array<double>::from({1, 2, 2}, {5, 5, 5, 5});
  const auto yh = Array<double>::from({1, 2, 2}, {5, 5, 9, 5});
  const auto r = evaluate(y, yh);
  ASSERT_EQ(r.per_horizon.size(), 2u);
  ASSERT_EQ(r.per_node.size(), 2u);
  EXPECT_NEAR(r.per_horizon[0].mae, 2, 1e-12);
  EXPECT_EQ(r.per_horizon[1].mae, 0);
  EXPECT_EQ(r.per_node[0].rmse, 0);
  EXPECT_NEAR(r.per_node[1].rmse, std::sqrt(8.0), 1e-12);
}

TEST(HistoricalAverage, ConstantPanel) {
  const auto ds = make_panel(6 * 30, 3, 6, [](std::size_t, std::size_t j) { return 7.0 + double(j); });
  const DataPipeline pl(ds, 4, 2);
  EXPECT_EQ(evaluate(targets(pl, pl.split().test), ha_baseline(pl, "test")).rmse, 0);
}

TEST(HistoricalAverage, DailyPeriodicPanel) {
  const auto ds = make_panel(6 * 30, 2, 6, [](std::size_t t, std::size_t j) { return double((t % 6) * (j + 1)); });
  const DataPipeline pl(ds, 4, 2);
  EXPECT_EQ(evaluate(targets(pl, pl.split().test), ha_baseline(pl, "test")).rmse, 0);
}

TEST(HistoricalAverage, UnseenSlotFallsBackToNodeMean) {
  // two days of training data cannot cover every weekday
  const auto ds = make_panel(6 * 3, 1, 6, [](std::size_t t, std::size_t) { return double(t); });
  HistoricalAverage ha(ds, 12);
  EXPECT_DOUBLE_EQ(ha.predict(8, 0), 8.0);   // Tuesday, slot 2
  EXPECT_DOUBLE_EQ(ha.predict(14, 0), 5.5);  // Wednesday never seen: mean of 0..11
}

TEST(Train, ZeroEpochsReturnsInitialisation) {
  const auto ds = toy_city();
  auto c = toy::small_config(4, 8, 2);
  const auto r = train<double>(c, TrainConfig{}, ds, 0, 9);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0u);
  c.seed = 9;
  EXPECT_EQ(r.best.params(), init_parameters<double>(c));
}

TEST(Train, SameSeedSameHistory) {
  const auto ds = toy_city();
  const auto c = toy::small_config(4, 8, 2);
  auto a = train<float>(c, TrainConfig{}, ds, 2, 4);
  auto b = train<float>(c, TrainConfig{}, ds, 2, 4);
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].val.rmse, b.history[e].val.rmse);
  }
  EXPECT_EQ(a.best.params(), b.best.params());
  auto other = train<float>(c, TrainConfig{}, ds, 1, 5);
  EXPECT_NE(other.history[0].train_loss, a.history[0].train_loss);
}

TEST(Train, BestEpochHasLowestValRmse) {
  const auto ds = toy_city();
  const auto r = train<float>(toy::small_config(4, 8, 2), TrainConfig{}, ds, 4, 2);
  double best = INFINITY;
  for (const auto& e : r.history) best = std::min(best, e.val.rmse);
  EXPECT_EQ(*r.best_val_rmse, best);
  EXPECT_EQ(r.history[r.best_epoch - 1].val.rmse, best);
  const DataPipeline pl(ds, 8, 2);
  const auto re = evaluate(targets(pl, pl.split().val), predict(r.best, pl, pl.split().val));
  EXPECT_NEAR(re.rmse, best, 1e-4 * best);
}

TEST(Train, LossDecreases) {
  const auto ds = toy_city();
  const auto r = train<float>(toy::small_config(4, 8, 2), TrainConfig{}, ds, 6, 1);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Train, ConfigMustMatchDataset) {
  const auto ds = toy_city();
  EXPECT_THROW(train<float>(toy::small_config(5, 8, 2), TrainConfig{}, ds, 1, 1), ConfigError);
  auto c = toy::small_config(4, 8, 2);
  c.steps_per_day = 48;
  EXPECT_THROW(train<float>(c, TrainConfig{}, ds, 1, 1), ConfigError);
}

TEST(Predict, ThreadCountDoesNotChangeOutput) {
  const auto ds = toy_city();
  const auto c = toy::small_config(4, 8, 2);
  const Gravityformer<double> m(c, ds.distances.cast<double>());
  const DataPipeline pl(ds, 8, 2);
  const auto one = predict(m, pl, pl.split().test, 5, 1);
  const auto three = predict(m, pl, pl.split().test, 5, 3);
  EXPECT_EQ(one, three);
}

TEST(Shuffle, PortableOrder) {
  std::vector<std::size_t> v{0, 1, 2, 3, 4};
  std::mt19937_64 rng(1);
  shuffle_indices(v, rng);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  std::vector<std::size_t> w{0, 1, 2, 3, 4};
  std::mt19937_64 rng2(1);
  shuffle_indices(w, rng2);
  EXPECT_EQ(v, w);
}

TEST(CsvLog, RowFormat) {
  MetricLine m;
  m.rmse = 1.5;
  m.mae = 0.25;
  EXPECT_EQ(metrics_csv_row(3, "val", m, 2.0), "3,val,1.500000,0.250000,NA,2.000");
  m.mape = 12.5;
  EXPECT_EQ(metrics_csv_row(3, "val", m, 2.0), "3,val,1.500000,0.250000,12.500000,2.000");
}

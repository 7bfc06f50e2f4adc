#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gravityflow/config.hpp"
#include "gravityflow/dataset.hpp"
#include "gravityflow/diagnostics.hpp"
#include "gravityflow/synthetic.hpp"

using namespace gravityflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gravityflow_test_data_" + name);
  fs::remove_all(p);
  return p;
}

DatasetMeta friday_meta(std::size_t steps) {
  DatasetMeta m;
  m.num_steps = steps;
  m.num_nodes = 1;
  m.steps_per_day = 48;
  m.start_date = "2024-11-01";
  m.start_weekday = weekday_of(m.start_date);
  m.holiday_dates = {"2024-11-02"};
  return m;
}

// Classic gravity weights without the simulator code path.
double gravity_weight(const CityScenario& sc, std::size_t i, std::size_t j) {
  const double dx = sc.coords[i * 2] - sc.coords[j * 2], dy = sc.coords[i * 2 + 1] - sc.coords[j * 2 + 1];
  return sc.masses[i] * sc.masses[j] / std::pow(std::sqrt(dx * dx + dy * dy), sc.beta_true);
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, DefaultsValidate) {
  ModelConfig c;
  EXPECT_NO_THROW(validate(c));
  EXPECT_EQ(c.hidden, 32u);
  EXPECT_EQ(c.squeezed, 8u);
  EXPECT_EQ(c.skip, 256u);
  EXPECT_EQ(c.layers, 6u);
  EXPECT_EQ(c.node_embed, 40u);
  EXPECT_DOUBLE_EQ(c.kappa, 0.2);
}

TEST(Config, ParsesAliasesCommentsAndFlags) {
  const auto rc = parse_run_config("# toy\nN = 4\nq=8\np = 2  # horizon\nC_in = 8\nno_adagravity = true\nsigma_d = 3.5\nlearning_rate=0.01\n");
  EXPECT_EQ(rc.model.num_nodes, 4u);
  EXPECT_EQ(rc.model.input_steps, 8u);
  EXPECT_EQ(rc.model.horizon, 2u);
  EXPECT_EQ(rc.model.hidden, 8u);
  EXPECT_TRUE(rc.model.ablation.no_adagravity);
  EXPECT_DOUBLE_EQ(*rc.model.sigma_d, 3.5);
  EXPECT_DOUBLE_EQ(rc.train.learning_rate, 0.01);
}

TEST(Config, UnknownKeysAreListed) {
  try {
    parse_run_config("N = 4\nfoo = 1\nbar_baz = 2\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("foo"), std::string::npos);
    EXPECT_NE(msg.find("bar_baz"), std::string::npos);
  }
}

TEST(Config, RejectsNonPowerOfTwoHidden) {
  EXPECT_THROW(parse_run_config("C_in = 24\n"), ConfigError);
  EXPECT_NO_THROW(parse_run_config("C_in = 24\nno_hadamard_mapper = true\n"));
}

TEST(Config, JsonRoundTrip) {
  ModelConfig c;
  c.num_nodes = 7;
  c.sigma_d = 2.25;
  c.ablation.sequential_st = true;
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  c.sigma_d.reset();
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  TrainConfig t;
  t.batch_size = 3;
  EXPECT_EQ(train_config_from_json(to_json(t)), t);
}

// ------------------------------------------------------------ timestamps

TEST(Timestamps, FridayStart) {
  EXPECT_EQ(weekday_of("2024-11-01"), 4);
  const auto m = friday_meta(200);
  const auto ts = extract_timestamps(0, 12, m);
  EXPECT_EQ(ts.time_of_day[0], 0);
  EXPECT_EQ(ts.day_of_week[0], 4);
  const auto later = extract_timestamps(49, 1, m);
  EXPECT_EQ(later.time_of_day[0], 1);
  EXPECT_EQ(later.day_of_week[0], 5);
}

TEST(Timestamps, HolidayFlagFollowsDate) {
  const auto m = friday_meta(200);
  const auto ts = extract_timestamps(40, 20, m);
  for (std::size_t k = 0; k < ts.length(); ++k) EXPECT_EQ(ts.holiday[k], (40 + k) / 48 == 1 ? 1 : 0) << k;
}

TEST(Timestamps, TimeOfDayAdvancesModD) {
  const auto ts = extract_timestamps(30, 40, friday_meta(200));
  for (std::size_t k = 1; k < ts.length(); ++k) EXPECT_EQ(ts.time_of_day[k], (ts.time_of_day[k - 1] + 1) % 48);
}

TEST(Timestamps, WindowPastEndIsRangeError) {
  EXPECT_THROW(extract_timestamps(190, 12, friday_meta(200)), RangeError);
  EXPECT_NO_THROW(extract_timestamps(188, 12, friday_meta(200)));
}

// -------------------------------------------------------------- dataset IO

TEST(DatasetIo, RoundTripIsBitExact) {
  auto ds = simulate(generate_scenario(3, 5, 2));
  ds.activity[0] = 1.0f / 3.0f;  // a value with a long mantissa
  const auto dir = scratch("roundtrip");
  write_dataset(dir, ds);
  const auto back = read_dataset(dir);
  EXPECT_EQ(back.meta, ds.meta);
  EXPECT_EQ(back.activity, ds.activity);
  EXPECT_EQ(back.inflow, ds.inflow);
  EXPECT_EQ(back.outflow, ds.outflow);
  EXPECT_EQ(back.distances, ds.distances);
  ASSERT_TRUE(back.true_gravity.has_value());
  EXPECT_EQ(*back.true_gravity, *ds.true_gravity);
  fs::remove_all(dir);
}

TEST(DatasetIo, MissingDistancesNamesFile) {
  const auto dir = scratch("missing");
  write_dataset(dir, simulate(generate_scenario(3, 3, 1)));
  fs::remove(dir / "distances.f32");
  try {
    read_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.kind, IoError::Kind::missing_file);
    EXPECT_NE(std::string(e.what()).find("distances.f32"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, UnknownVersionRejected) {
  const auto dir = scratch("version");
  auto ds = simulate(generate_scenario(3, 3, 1));
  write_dataset(dir, ds);
  auto j = meta_to_json(ds.meta);
  j["format_version"] = 99;
  std::ofstream(dir / "meta.json") << j.dump();
  try {
    read_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.kind, IoError::Kind::version_mismatch);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, ShapeMismatchAndNonFinite) {
  const auto dir = scratch("shape");
  auto ds = simulate(generate_scenario(3, 3, 1));
  write_dataset(dir, ds);
  fs::resize_file(dir / "inflow.f32", 8);
  try {
    read_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.kind, IoError::Kind::shape_mismatch);
  }
  ds.outflow[2] = std::nanf("");
  write_dataset(dir, ds);
  try {
    read_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.kind, IoError::Kind::non_finite);
  }
  std::ofstream(dir / "meta.json") << "{ not json";
  try {
    read_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.kind, IoError::Kind::corrupt_manifest);
  }
  fs::remove_all(dir);
}

// --------------------------------------------------------------- simulator

TEST(Scenario, SameSeedSameFields) {
  const auto a = generate_scenario(11), b = generate_scenario(11);
  EXPECT_EQ(a.coords, b.coords);
  EXPECT_EQ(a.masses, b.masses);
  EXPECT_EQ(a.profile, b.profile);
  const auto c = generate_scenario(12);
  EXPECT_NE(a.masses, c.masses);
}

TEST(Scenario, Preconditions) {
  EXPECT_NO_THROW(simulate(generate_scenario(1, 2, 1)));
  EXPECT_THROW(generate_scenario(1, 1, 1), ConfigError);
  EXPECT_THROW(generate_scenario(1, 4, 0), ConfigError);
  ScenarioOverrides ov;
  ov.beta_true = 0.0;
  EXPECT_THROW(generate_scenario(1, 4, 1, ov), ConfigError);
}

TEST(Scenario, DefaultsMatchCalendar) {
  const auto sc = generate_scenario(42);
  EXPECT_EQ(sc.num_nodes, 24u);
  EXPECT_EQ(sc.days, 28u);
  EXPECT_EQ(sc.steps_per_day, 48u);
  EXPECT_DOUBLE_EQ(sc.beta_true, 2.0);
  for (std::size_t i = 0; i < sc.num_nodes; ++i) EXPECT_GT(sc.masses[i], 0.0);
}

TEST(Routing, TwoEquidistantDestinations) {
  const auto masses = Array<double>::from({3}, {5.0, 1.0, 3.0});
  const auto dist = Array<double>::from({3, 3}, {0, 2, 2, 2, 0, 1, 2, 1, 0});
  const auto p = routing_probabilities(masses, dist, 0, 2.0);
  EXPECT_DOUBLE_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  EXPECT_NEAR(p[2], 0.75, 1e-15);
}

TEST(Routing, MassScalingLeavesProbabilitiesUnchanged) {
  const auto sc = generate_scenario(5, 8, 1);
  const auto dist = scenario_distances(sc);
  auto scaled = sc.masses;
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= 17.0;
  for (std::size_t o = 0; o < 8; ++o) {
    const auto a = routing_probabilities(sc.masses, dist, o, 2.0), b = routing_probabilities(scaled, dist, o, 2.0);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a[j], b[j], 1e-14);
  }
}

TEST(Routing, MultinomialConservesTrips) {
  std::mt19937_64 rng(9);
  const std::vector<double> probs{0.0, 0.1, 0.2, 0.3, 0.4};
  for (std::int64_t trips : {0, 1, 7, 1000}) {
    const auto out = multinomial(rng, trips, probs);
    std::int64_t s = 0;
    for (auto k : out) s += k;
    EXPECT_EQ(s, trips);
    EXPECT_EQ(out[0], 0);
  }
}

TEST(Simulation, OccupancyAccountingAndLayout) {
  const auto ds = simulate(generate_scenario(42));
  const std::size_t n = ds.num_nodes(), s = ds.num_steps();
  ASSERT_EQ(s, 28u * 48u);
  for (std::size_t t = 0; t + 1 < s; ++t)
    for (std::size_t j = 0; j < n; ++j) {
      const float next = ds.activity[t * n + j] + ds.inflow[(t + 1) * n + j] - ds.outflow[(t + 1) * n + j];
      ASSERT_EQ(ds.activity[(t + 1) * n + j], next);
      ASSERT_GE(ds.activity[(t + 1) * n + j], 0.0f);
    }
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(ds.distances[i * n + i], 0.0f);
    for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(ds.distances[i * n + j], ds.distances[j * n + i]);
  }
  double mean = 0;
  for (std::size_t k = 0; k < ds.activity.size(); ++k) mean += ds.activity[k];
  mean /= static_cast<double>(ds.activity.size());
  EXPECT_GT(mean, 10.0);
  EXPECT_LT(mean, 100.0);
}

TEST(Simulation, TrueGravityFollowsClassicLaw) {
  const auto sc = generate_scenario(42);
  const auto ds = simulate(sc);
  std::vector<double> truth, classic;
  for (std::size_t i = 0; i < sc.num_nodes; ++i)
    for (std::size_t j = 0; j < sc.num_nodes; ++j)
      if (i != j) {
        truth.push_back((*ds.true_gravity)[i * sc.num_nodes + j]);
        classic.push_back(gravity_weight(sc, i, j));
      }
  EXPECT_GT(spearman(truth, classic), 0.9);
}

TEST(Simulation, Deterministic) {
  const auto a = simulate(generate_scenario(7, 6, 2)), b = simulate(generate_scenario(7, 6, 2));
  EXPECT_EQ(a.activity, b.activity);
  EXPECT_EQ(a.inflow, b.inflow);
  EXPECT_EQ(*a.true_gravity, *b.true_gravity);
}

// ------------------------------------------------------------ rank helpers

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // ranks a = 1,2,3,4,5 ; b = 2,1,4,3,5 -> 1 - 6*4/(5*24) = 0.8
  EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}), 0.8, 1e-12);
  const auto r = average_ranks({5, 1, 5, 2});
  EXPECT_EQ(r, (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Sparsity, RowMaxRule) {
  const auto m = Array<double>::from({2, 4}, {1.0, 0.005, 0.02, 0.0, 0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(sparsity(m), 6.0 / 8.0);
  const auto u = Array<double>::from({1, 4}, {1, 1, 1, 1});
  EXPECT_NEAR(row_entropy(u), std::log(4.0), 1e-12);
}

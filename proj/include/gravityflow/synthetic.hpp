#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gravityflow/array.hpp"
#include "gravityflow/dataset.hpp"
#include "gravityflow/errors.hpp"

namespace gravityflow {

struct CityScenario {
  std::size_t num_nodes = 24;
  std::size_t days = 28;
  std::size_t steps_per_day = 48;
  Array<double> coords;   // [N, 2] km
  Array<double> masses;   // [N]
  Array<double> profile;  // [N, D] weekday departure-rate multiplier, daily mean 1
  double beta_true = 2.0;
  double base_rate = 5.0;       // mean departures per step for a unit-mass node
  double stay_param = 6.0;      // mean stay in steps (geometric)
  double noise_level = 1.0;     // scales every Poisson intensity
  double weekend_factor = 0.7;
  double holiday_factor = 0.6;
  double side_km = 20.0;
  std::size_t burn_in_steps = 48;
  std::string start_date = "2024-11-01";
  std::vector<std::string> holiday_dates{"2024-11-11", "2024-11-28"};
  std::uint64_t seed = 42;
};

struct ScenarioOverrides {
  std::optional<double> beta_true;
  std::optional<double> base_rate;
  std::optional<double> stay_param;
  std::optional<double> noise_level;
  std::optional<std::size_t> steps_per_day;
  std::optional<std::string> start_date;
  std::optional<std::vector<std::string>> holiday_dates;
};

namespace detail {

inline double gauss_bump(double hour, double centre, double width) {
  const double z = (hour - centre) / width;
  return std::exp(-0.5 * z * z);
}

}  // namespace detail

inline CityScenario generate_scenario(std::uint64_t seed, std::size_t num_nodes = 24, std::size_t days = 28,
                                      const ScenarioOverrides& ov = {}) {
  if (num_nodes < 2) throw ConfigError("scenario needs at least 2 nodes, got " + std::to_string(num_nodes));
  if (days < 1) throw ConfigError("scenario needs at least 1 day");
  CityScenario sc;
  sc.num_nodes = num_nodes;
  sc.days = days;
  sc.seed = seed;
  if (ov.beta_true) sc.beta_true = *ov.beta_true;
  if (ov.base_rate) sc.base_rate = *ov.base_rate;
  if (ov.stay_param) sc.stay_param = *ov.stay_param;
  if (ov.noise_level) sc.noise_level = *ov.noise_level;
  if (ov.steps_per_day) sc.steps_per_day = *ov.steps_per_day;
  if (ov.start_date) sc.start_date = *ov.start_date;
  if (ov.holiday_dates) sc.holiday_dates = *ov.holiday_dates;
  if (!(sc.beta_true > 0)) throw ConfigError("beta_true must be > 0");
  if (!(sc.base_rate > 0)) throw ConfigError("base_rate must be > 0");
  if (!(sc.stay_param >= 1)) throw ConfigError("stay_param must be >= 1 step");
  if (!(sc.noise_level > 0)) throw ConfigError("noise_level must be > 0");
  if (sc.steps_per_day < 1) throw ConfigError("steps_per_day must be >= 1");
  detail::parse_date(sc.start_date);
  for (const auto& h : sc.holiday_dates) detail::parse_date(h);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = num_nodes;

  // rejection sampling keeps sites at least ~0.7 of the mean spacing apart
  const double min_sep = 0.7 * sc.side_km / std::sqrt(static_cast<double>(n));
  sc.coords = Array<double>({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      const double x = unit(rng) * sc.side_km, y = unit(rng) * sc.side_km;
      bool clash = false;
      for (std::size_t k = 0; k < i && !clash; ++k)
        clash = std::hypot(x - sc.coords[k * 2], y - sc.coords[k * 2 + 1]) < min_sep;
      if (!clash || attempt > 1000) {
        sc.coords[i * 2] = x;
        sc.coords[i * 2 + 1] = y;
        break;
      }
    }
  }

  std::lognormal_distribution<double> lognormal(0.0, 0.6);
  sc.masses = Array<double>({n});
  double msum = 0;
  for (std::size_t i = 0; i < n; ++i) msum += sc.masses[i] = lognormal(rng);
  for (std::size_t i = 0; i < n; ++i) sc.masses[i] *= static_cast<double>(n) / msum;

  const std::size_t d = sc.steps_per_day;
  sc.profile = Array<double>({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double morning = 0.8 + 1.2 * unit(rng), evening = 0.8 + 1.2 * unit(rng);
    const double shift = (unit(rng) - 0.5) * 1.5;
    double total = 0;
    for (std::size_t s = 0; s < d; ++s) {
      const double hour = 24.0 * (static_cast<double>(s) + 0.5) / static_cast<double>(d);
      const double night = hour < 6 ? 0.15 : 1.0;
      const double v = night * (0.35 + morning * detail::gauss_bump(hour, 8.5 + shift, 1.3) +
                                0.5 * detail::gauss_bump(hour, 12.5, 1.5) +
                                evening * detail::gauss_bump(hour, 18.0 + shift, 1.8));
      sc.profile[i * d + s] = v;
      total += v;
    }
    for (std::size_t s = 0; s < d; ++s) sc.profile[i * d + s] *= static_cast<double>(d) / total;
  }
  return sc;
}

inline Array<double> scenario_distances(const CityScenario& sc) {
  const std::size_t n = sc.num_nodes;
  Array<double> dist({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      dist[i * n + j] = i == j ? 0.0 : std::hypot(sc.coords[i * 2] - sc.coords[j * 2], sc.coords[i * 2 + 1] - sc.coords[j * 2 + 1]);
  return dist;
}

// Routing probabilities from origin i: proportional to m_j / d_ij^beta, j != i.
inline std::vector<double> routing_probabilities(const Array<double>& masses, const Array<double>& dist, std::size_t origin,
                                                 double beta) {
  const std::size_t n = masses.size();
  std::vector<double> w(n, 0.0);
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == origin) continue;
    w[j] = masses[j] / std::pow(dist[origin * n + j], beta);
    total += w[j];
  }
  for (auto& x : w) x /= total;
  return w;
}

// Multinomial draw via sequential conditional binomials; conserves `trials`.
inline std::vector<std::int64_t> multinomial(std::mt19937_64& rng, std::int64_t trials, const std::vector<double>& probs) {
  std::vector<std::int64_t> out(probs.size(), 0);
  double rest = 1.0;
  for (std::size_t j = 0; j < probs.size() && trials > 0; ++j) {
    if (probs[j] <= 0) continue;
    const double pj = rest > 0 ? std::clamp(probs[j] / rest, 0.0, 1.0) : 1.0;
    const std::int64_t k = pj >= 1.0 ? trials : std::binomial_distribution<std::int64_t>(trials, pj)(rng);
    out[j] = k;
    trials -= k;
    rest -= probs[j];
  }
  if (trials > 0) {  // rounding leftovers go to the last reachable destination
    for (std::size_t j = probs.size(); j-- > 0;)
      if (probs[j] > 0) {
        out[j] += trials;
        break;
      }
  }
  return out;
}

inline double departure_rate(const CityScenario& sc, std::size_t node, std::size_t global_step, int start_weekday,
                             const std::vector<long>& holiday_days) {
  const std::size_t d = sc.steps_per_day;
  const long day = static_cast<long>(global_step / d);
  double r = sc.noise_level * sc.base_rate * sc.masses[node] * sc.profile[node * d + global_step % d];
  const int wd = static_cast<int>((start_weekday + day) % 7);
  if (wd >= 5) r *= sc.weekend_factor;
  if (std::find(holiday_days.begin(), holiday_days.end(), day) != holiday_days.end()) r *= sc.holiday_factor;
  return r;
}

// Runs the visitor process: each step, present visitors leave with
// probability 1/stay_param, then new departures are routed by the gravity law.
// The first burn_in_steps are simulated but not recorded.
inline PanelDataset simulate(const CityScenario& sc) {
  const std::size_t n = sc.num_nodes, d = sc.steps_per_day;
  const std::size_t steps = sc.days * d;
  const Array<double> dist = scenario_distances(sc);
  const int start_wd = weekday_of(sc.start_date);
  std::vector<long> holiday_days;
  for (const auto& h : sc.holiday_dates) holiday_days.push_back((detail::parse_date(h) - detail::parse_date(sc.start_date)).count());

  std::vector<std::vector<double>> route(n);
  for (std::size_t i = 0; i < n; ++i) route[i] = routing_probabilities(sc.masses, dist, i, sc.beta_true);

  std::mt19937_64 rng(sc.seed ^ 0x5eed5eed5eed5eedULL);
  PanelDataset ds;
  ds.activity = Array<float>({steps, n});
  ds.inflow = Array<float>({steps, n});
  ds.outflow = Array<float>({steps, n});
  std::vector<double> od(n * n, 0.0);
  std::vector<std::int64_t> occupancy(n, 0);
  const double leave_p = 1.0 / sc.stay_param;

  const std::size_t total = sc.burn_in_steps + steps;
  for (std::size_t k = 0; k < total; ++k) {
    const bool recording = k >= sc.burn_in_steps;
    const std::size_t t = recording ? k - sc.burn_in_steps : 0;
    // burn-in replays the first day's calendar
    const std::size_t calendar = recording ? t : k % d;
    std::vector<std::int64_t> in(n, 0), out(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = occupancy[j] > 0 ? std::binomial_distribution<std::int64_t>(occupancy[j], leave_p)(rng) : 0;
      occupancy[j] -= out[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double rate = departure_rate(sc, i, calendar, start_wd, holiday_days);
      const std::int64_t trips = std::poisson_distribution<std::int64_t>(rate)(rng);
      if (trips == 0) continue;
      const auto dest = multinomial(rng, trips, route[i]);
      for (std::size_t j = 0; j < n; ++j) {
        in[j] += dest[j];
        if (recording) od[i * n + j] += static_cast<double>(dest[j]);
      }
    }
    for (std::size_t j = 0; j < n; ++j) occupancy[j] += in[j];
    if (!recording) continue;
    for (std::size_t j = 0; j < n; ++j) {
      ds.activity[t * n + j] = static_cast<float>(occupancy[j]);
      ds.inflow[t * n + j] = static_cast<float>(in[j]);
      ds.outflow[t * n + j] = static_cast<float>(out[j]);
    }
  }

  ds.distances = Array<float>({n, n});
  for (std::size_t i = 0; i < n * n; ++i) ds.distances[i] = static_cast<float>(dist[i]);
  Array<float> tg({n, n});
  for (std::size_t i = 0; i < n * n; ++i) tg[i] = static_cast<float>(od[i] / static_cast<double>(steps));
  ds.true_gravity = tg;

  DatasetMeta& m = ds.meta;
  m.num_nodes = n;
  m.num_steps = steps;
  m.steps_per_day = d;
  m.start_date = sc.start_date;
  m.start_weekday = start_wd;
  m.holiday_dates = sc.holiday_dates;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = (i < 10 ? "n0" : "n") + std::to_string(i);
    m.nodes.push_back({id, sc.coords[i * 2], sc.coords[i * 2 + 1]});
  }
  return ds;
}

}  // namespace gravityflow

#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gravityflow/array.hpp"
#include "gravityflow/errors.hpp"

namespace gravityflow {

inline constexpr int kDatasetFormatVersion = 1;

struct NodeInfo {
  std::string id;
  double x = 0;  // km
  double y = 0;  // km
  bool operator==(const NodeInfo&) const = default;
};

struct DatasetMeta {
  int format_version = kDatasetFormatVersion;
  std::size_t num_nodes = 0;
  std::size_t num_steps = 0;
  std::size_t steps_per_day = 48;
  int start_weekday = 0;  // Monday = 0
  std::string start_date = "1970-01-01";
  std::vector<std::string> holiday_dates;
  std::vector<NodeInfo> nodes;
  std::string distance_unit = "km";
  std::string activity_unit = "persons";
  bool operator==(const DatasetMeta&) const = default;
};

// Aligned per-node series plus static pairwise distances. Counts are stored
// as 32-bit floats, matching the on-disk layout.
struct PanelDataset {
  Array<float> activity;  // [S, N]
  Array<float> inflow;    // [S, N]
  Array<float> outflow;   // [S, N]
  Array<float> distances; // [N, N]
  std::optional<Array<float>> true_gravity;  // [N, N], synthetic data only
  DatasetMeta meta;

  std::size_t num_nodes() const { return meta.num_nodes; }
  std::size_t num_steps() const { return meta.num_steps; }
};

// ------------------------------------------------------------------ calendar

namespace detail {

inline std::chrono::sys_days parse_date(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  if (std::sscanf(s.c_str(), "%d-%u-%u", &y, &m, &d) != 3)
    throw ConfigError("malformed date '" + s + "', expected YYYY-MM-DD");
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw ConfigError("invalid date '" + s + "'");
  return std::chrono::sys_days{ymd};
}

inline std::string format_date(std::chrono::sys_days day) {
  const std::chrono::year_month_day ymd{day};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

}  // namespace detail

// Monday = 0 ... Sunday = 6.
inline int weekday_of(const std::string& date) {
  const std::chrono::weekday wd{detail::parse_date(date)};
  return static_cast<int>(wd.iso_encoding()) - 1;
}

inline std::string add_days(const std::string& date, long days) {
  return detail::format_date(detail::parse_date(date) + std::chrono::days{days});
}

struct TimestampFeatures {
  std::vector<std::int64_t> time_of_day;  // [0, D)
  std::vector<std::int64_t> day_of_week;  // [0, 7), Monday = 0
  std::vector<std::int64_t> holiday;      // {0, 1}
  std::size_t steps_per_day = 48;

  std::size_t length() const { return time_of_day.size(); }
};

// Calendar features for global steps [window_start, window_start + length).
// Step 0 is midnight of meta.start_date.
inline TimestampFeatures extract_timestamps(std::size_t window_start, std::size_t length, const DatasetMeta& meta) {
  if (window_start + length > meta.num_steps)
    throw RangeError("window [" + std::to_string(window_start) + "," + std::to_string(window_start + length) +
                     ") runs past the end of the data (" + std::to_string(meta.num_steps) + " steps)");
  const std::size_t d = meta.steps_per_day;
  std::set<long> holiday_days;
  const auto start = detail::parse_date(meta.start_date);
  for (const auto& h : meta.holiday_dates) holiday_days.insert((detail::parse_date(h) - start).count());
  TimestampFeatures ts;
  ts.steps_per_day = d;
  for (std::size_t t = window_start; t < window_start + length; ++t) {
    const std::size_t day = t / d;
    ts.time_of_day.push_back(static_cast<std::int64_t>(t % d));
    ts.day_of_week.push_back(static_cast<std::int64_t>((static_cast<std::size_t>(meta.start_weekday) + day) % 7));
    ts.holiday.push_back(holiday_days.count(static_cast<long>(day)) ? 1 : 0);
  }
  return ts;
}

// ------------------------------------------------------------------------ IO

namespace detail {

inline void write_f32(const std::filesystem::path& path, const Array<float>& a) {
  std::vector<unsigned char> bytes(a.size() * 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(a[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xFFu);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(IoError::Kind::write_failed, "cannot write " + path.string());
}

inline Array<float> read_f32(const std::filesystem::path& path, const Shape& shape) {
  if (!std::filesystem::exists(path)) throw IoError(IoError::Kind::missing_file, "missing dataset file " + path.filename().string());
  const auto expected = numel(shape) * 4;
  const auto actual = std::filesystem::file_size(path);
  if (actual != expected)
    throw IoError(IoError::Kind::shape_mismatch, path.filename().string() + " holds " + std::to_string(actual) +
                                                     " bytes, manifest implies " + std::to_string(expected) + " for " +
                                                     shape_str(shape));
  std::ifstream f(path, std::ios::binary);
  std::vector<unsigned char> bytes(expected);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
  if (!f) throw IoError(IoError::Kind::truncated, "short read on " + path.filename().string());
  Array<float> a(shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    a[i] = std::bit_cast<float>(u);
    if (!std::isfinite(a[i]))
      throw IoError(IoError::Kind::non_finite, "non-finite value in " + path.filename().string() + " at " + std::to_string(i));
  }
  return a;
}

}  // namespace detail

inline nlohmann::json meta_to_json(const DatasetMeta& m) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : m.nodes) nodes.push_back({{"id", n.id}, {"x", n.x}, {"y", n.y}});
  return {{"format_version", m.format_version},
          {"N", m.num_nodes},
          {"S", m.num_steps},
          {"D", m.steps_per_day},
          {"start_weekday", m.start_weekday},
          {"start_date", m.start_date},
          {"holiday_dates", m.holiday_dates},
          {"nodes", nodes},
          {"coordinates", "xy"},
          {"units", {{"distance", m.distance_unit}, {"activity", m.activity_unit}}}};
}

inline DatasetMeta meta_from_json(const nlohmann::json& j) {
  DatasetMeta m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kDatasetFormatVersion)
    throw IoError(IoError::Kind::version_mismatch, "meta.json format_version " + std::to_string(m.format_version) +
                                                       " is not supported (expected " +
                                                       std::to_string(kDatasetFormatVersion) + ")");
  m.num_nodes = j.at("N").get<std::size_t>();
  m.num_steps = j.at("S").get<std::size_t>();
  m.steps_per_day = j.at("D").get<std::size_t>();
  m.start_weekday = j.at("start_weekday").get<int>();
  m.start_date = j.at("start_date").get<std::string>();
  m.holiday_dates = j.at("holiday_dates").get<std::vector<std::string>>();
  for (const auto& n : j.at("nodes")) m.nodes.push_back({n.at("id").get<std::string>(), n.at("x").get<double>(), n.at("y").get<double>()});
  m.distance_unit = j.at("units").at("distance").get<std::string>();
  m.activity_unit = j.at("units").at("activity").get<std::string>();
  if (m.nodes.size() != m.num_nodes)
    throw IoError(IoError::Kind::shape_mismatch, "meta.json lists " + std::to_string(m.nodes.size()) + " nodes but N = " +
                                                     std::to_string(m.num_nodes));
  return m;
}

// Writes meta.json, activity.f32, inflow.f32, outflow.f32, distances.f32 and
// (when present) true_gravity.f32 into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const PanelDataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "meta.json", std::ios::trunc);
    f << meta_to_json(ds.meta).dump(2) << '\n';
    if (!f) throw IoError(IoError::Kind::write_failed, "cannot write " + (dir / "meta.json").string());
  }
  detail::write_f32(dir / "activity.f32", ds.activity);
  detail::write_f32(dir / "inflow.f32", ds.inflow);
  detail::write_f32(dir / "outflow.f32", ds.outflow);
  detail::write_f32(dir / "distances.f32", ds.distances);
  if (ds.true_gravity) detail::write_f32(dir / "true_gravity.f32", *ds.true_gravity);
}

inline PanelDataset read_dataset(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  if (!std::filesystem::exists(meta_path)) throw IoError(IoError::Kind::missing_file, "missing dataset file meta.json in " + dir.string());
  PanelDataset ds;
  try {
    std::ifstream f(meta_path);
    ds.meta = meta_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::corrupt_manifest, std::string("corrupt meta.json: ") + e.what());
  }
  const Shape series{ds.meta.num_steps, ds.meta.num_nodes};
  const Shape square{ds.meta.num_nodes, ds.meta.num_nodes};
  ds.activity = detail::read_f32(dir / "activity.f32", series);
  ds.inflow = detail::read_f32(dir / "inflow.f32", series);
  ds.outflow = detail::read_f32(dir / "outflow.f32", series);
  ds.distances = detail::read_f32(dir / "distances.f32", square);
  if (std::filesystem::exists(dir / "true_gravity.f32")) ds.true_gravity = detail::read_f32(dir / "true_gravity.f32", square);
  return ds;
}

}  // namespace gravityflow

#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gravityflow/errors.hpp"

namespace gravityflow {

// One switch per ablation variant.
struct AblationFlags {
  bool no_adagravity = false;        // w/o AdaGravity: no gravity gate, no gravity parameters
  bool no_adaptive_scaling = false;  // w/o adaptive distance scaling: A_s == 1
  bool no_flows = false;             // w/o inflow/outflow in the mass pooling
  bool adaptive_adjacency = false;   // distance kernel replaced by a learned adjacency
  bool no_hadamard_mapper = false;
  bool no_conv2former = false;       // V_T = V_S = 1
  bool sequential_st = false;        // temporal-only blocks, then spatial-only blocks

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::size_t num_nodes = 24;       // N
  std::size_t input_steps = 12;     // q
  std::size_t horizon = 4;          // p
  std::size_t steps_per_day = 48;   // D
  std::size_t raw_channels = 1;     // C
  std::size_t hidden = 32;          // C_in
  std::size_t squeezed = 8;         // C_d
  std::size_t skip = 256;           // C_skip
  std::size_t time_embed = 24;      // C_t
  std::size_t adaptive_embed = 80;  // C_a
  std::size_t feature_embed = 24;   // C_f
  std::size_t node_embed = 40;      // C_e
  double kappa = 0.2;
  std::size_t layers = 6;           // L
  std::optional<double> sigma_d;    // empty = "auto"
  AblationFlags ablation;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 0.002;
  double weight_decay = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  bool operator==(const TrainConfig&) const = default;
};

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void validate(const ModelConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.num_nodes < 1) fail("num_nodes must be >= 1");
  if (c.input_steps < 1 || c.horizon < 1) fail("input_steps and horizon must be >= 1");
  if (c.layers < 1) fail("layers must be >= 1");
  if (c.steps_per_day < 1) fail("steps_per_day must be >= 1");
  if (c.raw_channels != 1) fail("raw_channels must be 1 (activity only)");
  if (c.hidden == 0 || c.squeezed == 0 || c.skip == 0 || c.time_embed == 0 || c.adaptive_embed == 0 ||
      c.feature_embed == 0 || c.node_embed == 0)
    fail("channel widths must be positive");
  if (!c.ablation.no_hadamard_mapper && !is_power_of_two(c.hidden))
    fail("hidden (C_in) must be a power of two for the Hadamard mapper, got " + std::to_string(c.hidden));
  if (c.sigma_d && !(*c.sigma_d > 0)) fail("sigma_d must be > 0 or auto");
  if (!(c.kappa > 0)) fail("kappa must be > 0");
}

inline void validate(const TrainConfig& t) {
  if (t.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(t.learning_rate >= 0) || !(t.weight_decay >= 0)) throw ConfigError("learning_rate and weight_decay must be >= 0");
  if (!(t.beta1 >= 0 && t.beta1 < 1 && t.beta2 >= 0 && t.beta2 < 1)) throw ConfigError("adam betas must lie in [0,1)");
  if (!(t.adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
}

// ------------------------------------------------------------ config files
//
// Plain `key = value` lines, `#` starts a comment. Keys mirror the struct
// fields above plus the ablation flag names. Unknown keys are rejected.

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  ModelConfig& m = rc.model;
  TrainConfig& t = rc.train;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> unknown;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string v = detail::trim(line.substr(eq + 1));
    using namespace detail;
    if (key == "num_nodes" || key == "N") m.num_nodes = parse_size(key, v);
    else if (key == "input_steps" || key == "q") m.input_steps = parse_size(key, v);
    else if (key == "horizon" || key == "p") m.horizon = parse_size(key, v);
    else if (key == "steps_per_day" || key == "D") m.steps_per_day = parse_size(key, v);
    else if (key == "raw_channels" || key == "C") m.raw_channels = parse_size(key, v);
    else if (key == "hidden" || key == "C_in") m.hidden = parse_size(key, v);
    else if (key == "squeezed" || key == "C_d") m.squeezed = parse_size(key, v);
    else if (key == "skip" || key == "C_skip") m.skip = parse_size(key, v);
    else if (key == "time_embed" || key == "C_t") m.time_embed = parse_size(key, v);
    else if (key == "adaptive_embed" || key == "C_a") m.adaptive_embed = parse_size(key, v);
    else if (key == "feature_embed" || key == "C_f") m.feature_embed = parse_size(key, v);
    else if (key == "node_embed" || key == "C_e") m.node_embed = parse_size(key, v);
    else if (key == "kappa") m.kappa = parse_real(key, v);
    else if (key == "layers" || key == "L") m.layers = parse_size(key, v);
    else if (key == "sigma_d") m.sigma_d = v == "auto" ? std::nullopt : std::optional<double>(parse_real(key, v));
    else if (key == "seed") m.seed = parse_size(key, v);
    else if (key == "no_adagravity") m.ablation.no_adagravity = parse_bool(key, v);
    else if (key == "no_adaptive_scaling") m.ablation.no_adaptive_scaling = parse_bool(key, v);
    else if (key == "no_flows") m.ablation.no_flows = parse_bool(key, v);
    else if (key == "adaptive_adjacency") m.ablation.adaptive_adjacency = parse_bool(key, v);
    else if (key == "no_hadamard_mapper") m.ablation.no_hadamard_mapper = parse_bool(key, v);
    else if (key == "no_conv2former") m.ablation.no_conv2former = parse_bool(key, v);
    else if (key == "sequential_st") m.ablation.sequential_st = parse_bool(key, v);
    else if (key == "batch_size") t.batch_size = parse_size(key, v);
    else if (key == "learning_rate") t.learning_rate = parse_real(key, v);
    else if (key == "weight_decay") t.weight_decay = parse_real(key, v);
    else if (key == "beta1") t.beta1 = parse_real(key, v);
    else if (key == "beta2") t.beta2 = parse_real(key, v);
    else if (key == "adam_eps") t.adam_eps = parse_real(key, v);
    else unknown.push_back(key);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  validate(m);
  validate(t);
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(IoError::Kind::missing_file, "cannot open config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

inline nlohmann::json to_json(const AblationFlags& a) {
  return {{"no_adagravity", a.no_adagravity},           {"no_adaptive_scaling", a.no_adaptive_scaling},
          {"no_flows", a.no_flows},                     {"adaptive_adjacency", a.adaptive_adjacency},
          {"no_hadamard_mapper", a.no_hadamard_mapper}, {"no_conv2former", a.no_conv2former},
          {"sequential_st", a.sequential_st}};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j = {{"num_nodes", c.num_nodes},
                      {"input_steps", c.input_steps},
                      {"horizon", c.horizon},
                      {"steps_per_day", c.steps_per_day},
                      {"raw_channels", c.raw_channels},
                      {"hidden", c.hidden},
                      {"squeezed", c.squeezed},
                      {"skip", c.skip},
                      {"time_embed", c.time_embed},
                      {"adaptive_embed", c.adaptive_embed},
                      {"feature_embed", c.feature_embed},
                      {"node_embed", c.node_embed},
                      {"kappa", c.kappa},
                      {"layers", c.layers},
                      {"seed", c.seed},
                      {"ablation", to_json(c.ablation)}};
  j["sigma_d"] = c.sigma_d ? nlohmann::json(*c.sigma_d) : nlohmann::json("auto");
  return j;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size}, {"learning_rate", t.learning_rate}, {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},           {"beta2", t.beta2},                 {"adam_eps", t.adam_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_nodes = j.at("num_nodes").get<std::size_t>();
  c.input_steps = j.at("input_steps").get<std::size_t>();
  c.horizon = j.at("horizon").get<std::size_t>();
  c.steps_per_day = j.at("steps_per_day").get<std::size_t>();
  c.raw_channels = j.at("raw_channels").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.squeezed = j.at("squeezed").get<std::size_t>();
  c.skip = j.at("skip").get<std::size_t>();
  c.time_embed = j.at("time_embed").get<std::size_t>();
  c.adaptive_embed = j.at("adaptive_embed").get<std::size_t>();
  c.feature_embed = j.at("feature_embed").get<std::size_t>();
  c.node_embed = j.at("node_embed").get<std::size_t>();
  c.kappa = j.at("kappa").get<double>();
  c.layers = j.at("layers").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& s = j.at("sigma_d");
  if (s.is_string()) {
    if (s.get<std::string>() != "auto") throw ConfigError("sigma_d must be a number or \"auto\"");
    c.sigma_d.reset();
  } else {
    c.sigma_d = s.get<double>();
  }
  const auto& a = j.at("ablation");
  c.ablation.no_adagravity = a.at("no_adagravity").get<bool>();
  c.ablation.no_adaptive_scaling = a.at("no_adaptive_scaling").get<bool>();
  c.ablation.no_flows = a.at("no_flows").get<bool>();
  c.ablation.adaptive_adjacency = a.at("adaptive_adjacency").get<bool>();
  c.ablation.no_hadamard_mapper = a.at("no_hadamard_mapper").get<bool>();
  c.ablation.no_conv2former = a.at("no_conv2former").get<bool>();
  c.ablation.sequential_st = a.at("sequential_st").get<bool>();
  validate(c);
  return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.learning_rate = j.at("learning_rate").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.beta1 = j.at("beta1").get<double>();
  t.beta2 = j.at("beta2").get<double>();
  t.adam_eps = j.at("adam_eps").get<double>();
  validate(t);
  return t;
}

}  // namespace gravityflow

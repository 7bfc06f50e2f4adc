#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gravityflow/errors.hpp"

#ifndef GRAVITYFLOW_BUILD_ID
#define GRAVITYFLOW_BUILD_ID "unknown"
#endif

namespace gravityflow {

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Text written to a sibling temp file, then renamed over the target.
inline void write_atomically(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw IoError(IoError::Kind::write_failed, "cannot write " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(IoError::Kind::write_failed, "cannot rename " + tmp.string() + ": " + ec.message());
}

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::string dataset;
  std::uint64_t seed = 0;
  std::string build_id = GRAVITYFLOW_BUILD_ID;
  std::string started = utc_now();
  std::string finished;
  std::vector<std::string> outputs;  // file names relative to the output directory

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config},     {"dataset", dataset},   {"seed", seed},
            {"build_id", build_id}, {"started", started}, {"finished", finished}, {"outputs", outputs}};
  }

  // Stamps the end time and writes run_manifest.json into dir. Every listed
  // output must already exist.
  void finish(const std::filesystem::path& dir) {
    for (const auto& o : outputs)
      if (!std::filesystem::exists(dir / o)) throw IoError(IoError::Kind::missing_file, "manifest output " + o + " was not written");
    finished = utc_now();
    write_atomically(dir / "run_manifest.json", to_json().dump(2) + "\n");
  }
};

}  // namespace gravityflow

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "gravityflow/config.hpp"
#include "gravityflow/errors.hpp"
#include "gravityflow/model.hpp"
#include "gravityflow/training.hpp"

namespace gravityflow {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr const char* kCheckpointMagic = "GRAVITYFLOW-CKPT";

// Everything needed to rebuild a trained model and its input transform.
// File layout: "GRAVITYFLOW-CKPT <manifest bytes>\n", JSON manifest, then the
// float32 little-endian blob with tensors in parameter order.
struct Checkpoint {
  ModelConfig config;
  TrainConfig train;
  ZScoreScaler activity_scaler, flow_scaler;
  double sigma_d = 1;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_rmse;
  ParameterSet<float> params;
};

template <class T>
Checkpoint make_checkpoint(const TrainResult<T>& r, const TrainConfig& tc) {
  Checkpoint ck;
  ck.config = r.best.config();
  ck.train = tc;
  ck.activity_scaler = r.activity_scaler;
  ck.flow_scaler = r.flow_scaler;
  ck.sigma_d = r.best.kernel().sigma_d;
  ck.best_epoch = r.best_epoch;
  ck.best_val_rmse = r.best_val_rmse;
  ck.params = r.best.params().template cast<float>();
  return ck;
}

namespace detail {

inline nlohmann::json scaler_json(const ZScoreScaler& s) { return {{"mean", s.mean}, {"std", s.std}}; }

inline ZScoreScaler scaler_from(const nlohmann::json& j) {
  ZScoreScaler s;
  s.mean = j.at("mean").get<double>();
  s.std = j.at("std").get<double>();
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : ck.params.entries()) {
    tensors.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"offset", offset}, {"bytes", 4 * e.value.size()}});
    offset += 4 * e.value.size();
  }
  nlohmann::json m = {{"format_version", kCheckpointFormatVersion},
                      {"config", to_json(ck.config)},
                      {"train", to_json(ck.train)},
                      {"activity_scaler", detail::scaler_json(ck.activity_scaler)},
                      {"flow_scaler", detail::scaler_json(ck.flow_scaler)},
                      {"sigma_d", ck.sigma_d},
                      {"best_epoch", ck.best_epoch},
                      {"best_val_rmse", ck.best_val_rmse ? nlohmann::json(*ck.best_val_rmse) : nlohmann::json(nullptr)},
                      {"tensors", tensors},
                      {"blob_bytes", offset}};
  const std::string manifest = m.dump(1);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::write_failed, "cannot write checkpoint " + path.string());
  f << kCheckpointMagic << ' ' << manifest.size() << '\n' << manifest;
  for (const auto& e : ck.params.entries())
    for (float v : e.value.storage()) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      const char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff), char((u >> 24) & 0xff)};
      f.write(b, 4);
    }
  if (!f) throw IoError(IoError::Kind::write_failed, "short write on checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError(IoError::Kind::missing_file, "missing checkpoint " + path.string());
  std::ifstream f(path, std::ios::binary);
  std::string line;
  std::getline(f, line);
  std::istringstream hs(line);
  std::string magic;
  std::size_t manifest_bytes = 0;
  if (!(hs >> magic >> manifest_bytes) || magic != kCheckpointMagic)
    throw IoError(IoError::Kind::corrupt_manifest, path.filename().string() + " is not a checkpoint (bad header)");
  std::string text(manifest_bytes, '\0');
  if (!f.read(text.data(), static_cast<std::streamsize>(manifest_bytes)))
    throw IoError(IoError::Kind::corrupt_manifest, "checkpoint manifest is cut short");

  Checkpoint ck;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text);
    const int version = m.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw IoError(IoError::Kind::version_mismatch, "checkpoint format_version " + std::to_string(version) +
                                                         " (this build reads " + std::to_string(kCheckpointFormatVersion) + ")");
    ck.config = model_config_from_json(m.at("config"));
    ck.train = train_config_from_json(m.at("train"));
    ck.activity_scaler = detail::scaler_from(m.at("activity_scaler"));
    ck.flow_scaler = detail::scaler_from(m.at("flow_scaler"));
    ck.sigma_d = m.at("sigma_d").get<double>();
    ck.best_epoch = m.at("best_epoch").get<std::size_t>();
    if (!m.at("best_val_rmse").is_null()) ck.best_val_rmse = m.at("best_val_rmse").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::corrupt_manifest, std::string("corrupt checkpoint manifest: ") + e.what());
  }

  const auto blob_start = static_cast<std::size_t>(f.tellg());
  const std::size_t available = std::filesystem::file_size(path) - blob_start;
  std::string blob(available, '\0');
  f.read(blob.data(), static_cast<std::streamsize>(available));
  try {
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto bytes = t.at("bytes").get<std::size_t>();
      if (bytes != 4 * numel(shape))
        throw IoError(IoError::Kind::corrupt_manifest, "tensor '" + name + "' spans " + std::to_string(bytes) + " bytes but has shape " +
                                                           shape_str(shape));
      if (offset + bytes > available)
        throw IoError(IoError::Kind::truncated, "checkpoint blob ends before tensor '" + name + "'");
      Array<float> a(shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const auto* p = reinterpret_cast<const unsigned char*>(blob.data() + offset + 4 * i);
        const std::uint32_t u = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
        a[i] = std::bit_cast<float>(u);
      }
      ck.params.add(name, std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::corrupt_manifest, std::string("corrupt checkpoint tensor table: ") + e.what());
  }

  // The tensor table must be exactly what this config initialises.
  const auto expected = init_parameters<float>(ck.config);
  if (expected.names() != ck.params.names())
    throw IoError(IoError::Kind::shape_mismatch, "checkpoint tensors do not match the parameter layout of its config");
  for (const auto& e : expected.entries())
    if (e.value.shape() != ck.params.at(e.name).shape())
      throw IoError(IoError::Kind::shape_mismatch, "tensor '" + e.name + "' has shape " + shape_str(ck.params.at(e.name).shape()) +
                                                       ", config expects " + shape_str(e.value.shape()));
  return ck;
}

// Rebuild the model against a dataset's distances. The stored sigma_d is
// reused so the distance kernel matches training exactly.
template <class T>
Gravityformer<T> model_from_checkpoint(const Checkpoint& ck, const PanelDataset& ds) {
  if (ck.config.num_nodes != ds.num_nodes())
    throw ConfigError("checkpoint was trained on N = " + std::to_string(ck.config.num_nodes) + " nodes but the dataset has " +
                      std::to_string(ds.num_nodes()));
  if (ck.config.steps_per_day != ds.meta.steps_per_day)
    throw ConfigError("checkpoint expects D = " + std::to_string(ck.config.steps_per_day) + " steps per day, dataset has " +
                      std::to_string(ds.meta.steps_per_day));
  ModelConfig c = ck.config;
  c.sigma_d = ck.sigma_d;
  return Gravityformer<T>(c, ds.distances.cast<double>(), ck.params.cast<T>());
}

inline DataPipeline pipeline_from_checkpoint(const Checkpoint& ck, const PanelDataset& ds) {
  return DataPipeline(ds, ck.config.input_steps, ck.config.horizon, ck.activity_scaler, ck.flow_scaler);
}

}  // namespace gravityflow

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "colorfuse/autodiff.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Parameter archive layout: a directory holding manifest.json plus
// params.bin, the latter being every tensor's values as little-endian
// float32 in manifest order. The manifest pins tensor names, shapes,
// dtype and the architecture hash of whatever produced the archive;
// loading verifies all of them.

inline constexpr int kArchiveFormatVersion = 1;

inline void save_param_archive(
    const std::string& dir,
    const std::vector<std::pair<std::string, Var>>& params,
    std::uint64_t config_hash, const std::string& role) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["format_version"] = kArchiveFormatVersion;
  manifest["config_hash"] = config_hash;
  manifest["role"] = role;
  manifest["dtype"] = "float32";
  manifest["data_file"] = "params.bin";
  nlohmann::json tensors = nlohmann::json::array();

  std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!bin)
    throw std::runtime_error("save_param_archive: cannot write params.bin in " +
                             dir);
  std::size_t offset = 0;
  for (const auto& [name, var] : params) {
    const Tensor& t = var->value;
    nlohmann::json rec;
    rec["name"] = name;
    rec["shape"] = t.shape();
    rec["offset"] = offset;
    rec["count"] = t.size();
    tensors.push_back(rec);
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i)
      buf[i] = static_cast<float>(t[i]);
    bin.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    offset += t.size();
  }
  manifest["tensors"] = tensors;
  manifest["total_values"] = offset;
  bin.close();

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf)
    throw std::runtime_error(
        "save_param_archive: cannot write manifest.json in " + dir);
  mf << manifest.dump(2) << "\n";
}

inline void load_param_archive(
    const std::string& dir,
    const std::vector<std::pair<std::string, Var>>& params,
    std::uint64_t expected_config_hash) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf)
    throw std::runtime_error("load_param_archive: missing manifest.json in " +
                             dir);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_param_archive: corrupt manifest in " + dir +
                             ": " + e.what());
  }
  if (manifest.value("format_version", -1) != kArchiveFormatVersion)
    throw std::runtime_error("load_param_archive: unsupported format version");
  const std::uint64_t stored = manifest.value("config_hash", 0ull);
  if (stored != expected_config_hash)
    throw std::runtime_error(
        "load_param_archive: config hash mismatch: archive has " +
        std::to_string(stored) + ", expected " +
        std::to_string(expected_config_hash));
  if (manifest.value("dtype", "") != "float32")
    throw std::runtime_error("load_param_archive: unsupported dtype");

  const auto& tensors = manifest["tensors"];
  if (!tensors.is_array() || tensors.size() != params.size())
    throw std::runtime_error("load_param_archive: tensor count mismatch");

  std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!bin)
    throw std::runtime_error("load_param_archive: missing params.bin in " +
                             dir);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& rec = tensors[i];
    const auto& [name, var] = params[i];
    if (rec.value("name", "") != name)
      throw std::runtime_error("load_param_archive: tensor name mismatch at " +
                               name);
    const std::vector<int> shape = rec["shape"].get<std::vector<int>>();
    if (shape != var->value.shape())
      throw std::runtime_error("load_param_archive: shape mismatch for " +
                               name);
    std::vector<float> buf(var->value.size());
    bin.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!bin)
      throw std::runtime_error("load_param_archive: truncated params.bin in " +
                               dir);
    for (std::size_t j = 0; j < buf.size(); ++j)
      var->value[j] = static_cast<double>(buf[j]);
  }
}

// Snaps in-memory doubles to their float32 archive representation, so a
// continued run and a run resumed from disk see bit-identical parameters.
inline void quantize_params_to_archive_precision(
    const std::vector<Var>& params) {
  for (const auto& var : params)
    for (std::size_t i = 0; i < var->value.size(); ++i)
      var->value[i] = static_cast<double>(static_cast<float>(var->value[i]));
}

inline void quantize_params_to_archive_precision(
    const std::vector<std::pair<std::string, Var>>& params) {
  for (const auto& [name, var] : params)
    for (std::size_t i = 0; i < var->value.size(); ++i)
      var->value[i] = static_cast<double>(static_cast<float>(var->value[i]));
}

// Fingerprint of an archive's parameter payload.
inline std::uint64_t param_archive_hash(const std::string& dir) {
  std::ifstream bin(std::filesystem::path(dir) / "params.bin",
                    std::ios::binary);
  if (!bin)
    throw std::runtime_error("param_archive_hash: missing params.bin in " +
                             dir);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (bin) {
    bin.read(buf, sizeof buf);
    h = fnv1a64(buf, static_cast<std::size_t>(bin.gcount()), h);
  }
  return h;
}

}  // namespace colorfuse

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "fv2ic/errors.hpp"
#include "fv2ic/params.hpp"

namespace fv2ic {

// Checkpoint = JSON manifest (parameter names and shapes, in order) plus a
// little-endian float32 blob laid out in manifest order. The same layout is
// what the communication ledger charges for.

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json man;
  man["format_version"] = 1;
  man["dtype"] = "float32le";
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    entries.push_back({{"name", params.names[i]}, {"shape", params.tensors[i].shape()}});
  }
  man["params"] = entries;
  man["total_scalars"] = params.total_scalars();
  std::ofstream fm(dir / "manifest.json");
  fm << man.dump(2) << "\n";

  std::ofstream fb(dir / "params.bin", std::ios::binary);
  for (const Tensor& t : params.tensors) {
    for (int i = 0; i < t.size(); ++i) {
      const float v = static_cast<float>(t[i]);
      fb.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
  }
}

inline ModelParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream fm(dir / "manifest.json");
  if (!fm) throw ConfigError("checkpoint", "manifest.json not found in " + dir.string());
  nlohmann::json man = nlohmann::json::parse(fm);

  ModelParams p;
  for (const auto& e : man.at("params")) {
    p.names.push_back(e.at("name").get<std::string>());
    p.tensors.emplace_back(e.at("shape").get<std::vector<int>>());
  }
  std::ifstream fb(dir / "params.bin", std::ios::binary);
  if (!fb) throw ConfigError("checkpoint", "params.bin not found in " + dir.string());
  for (Tensor& t : p.tensors) {
    for (int i = 0; i < t.size(); ++i) {
      float v = 0.0f;
      fb.read(reinterpret_cast<char*>(&v), sizeof(float));
      if (!fb) throw ConfigError("checkpoint", "params.bin truncated in " + dir.string());
      t[i] = v;
    }
  }
  return p;
}

}  // namespace fv2ic

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "differ/data.hpp"
#include "differ/engine.hpp"
#include "differ/model.hpp"
#include "differ/semantics.hpp"

namespace differ {

// One declarative file drives every command. Unknown keys are errors.
struct ToolConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig data;

  struct Semantics {
    std::vector<Aspect> aspects = {Aspect::kBiometric, Aspect::kHair, Aspect::kClothing,
                                   Aspect::kPose, Aspect::kBackground};
    bool use_clothing_summary = false;
    std::uint64_t embed_seed = 0;
    ClientConfig client;
  } semantics;

  struct Paths {
    std::filesystem::path data;
    std::filesystem::path cache;
  } paths;

  static ToolConfig from_file(const std::filesystem::path& path);
  static ToolConfig from_json(const nlohmann::json& j);

  // Canonical serialization of the effective configuration; its hash is the
  // config id recorded in checkpoints and run manifests.
  nlohmann::json to_json() const;
  std::string config_sha256() const;
};

}  // namespace differ

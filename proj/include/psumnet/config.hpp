#pragma once

// Run configuration file for the command-line tool.
//
//   {"version": 1,
//    "data":  {"manifest": path, "val_fraction": 0.2, "pad": "loop"|"zero", "persons": 2},
//    "model": {...},
//    "train": {...}}
//
// "model" is either the full ModelConfig JSON (it has a "parts" key) or the
// short form {"topology", "num_classes", "streams": ["body", ...],
// "disjoint_parts", "modalities", "window", "seed", "fusion_weights",
// "fuse_logits", "samg"}, expanded through default_model_config. Without
// "num_classes" the class count comes from the manifest. Relative paths
// resolve against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "psumnet/dataset.hpp"
#include "psumnet/model.hpp"
#include "psumnet/train.hpp"

namespace psumnet {

inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
  int version = kRunConfigVersion;
  std::filesystem::path manifest;
  double val_fraction = 0.2;
  PadMode pad = PadMode::kLoop;
  std::int64_t persons = 2;
  ModelConfig model;
  TrainConfig train;

  /// Full form, with the model expanded; this is what gets echoed and hashed.
  nlohmann::json to_json() const;
  std::uint64_t hash() const { return config_hash(to_json()); }
};

/// Parses `j`, applying `overrides` first. Each override is "a.b.c=value"
/// where value is JSON, or a bare string when it does not parse as JSON.
/// Validates everything, including that the manifest exists. Throws
/// ConfigError; the message names the offending key or path.
RunConfig run_config_from_json(nlohmann::json j, const std::filesystem::path& base_dir,
                               const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::string>& overrides = {});

/// "0.5,1,0" -> {0.5, 1, 0}. Throws ConfigError on anything else.
std::vector<double> parse_number_list(const std::string& text);

}  // namespace psumnet

#pragma once

// Procedural part-dominant actions for desk-scale experiments.
//
// Each class is one motion primitive: a sinusoidal rotation of one or more
// limbs about their root joint (hand- or leg-dominant), or a motion of the
// whole skeleton. Joints outside the moving limbs are bit-identical in every
// frame, so e.g. the legs group of a hand-dominant sample has zero variance.

#include <cstdint>
#include <filesystem>
#include <string>

#include "psumnet/dataset.hpp"

namespace psumnet {

struct SynthSpec {
  std::string topology = "ntu25";
  int classes = 8;
  int train_per_class = 16;
  int val_per_class = 8;
  std::int64_t frames = 32;
  std::uint64_t seed = 0;
};

/// "hand", "leg" or "whole".
std::string synth_category(const std::string& topology, int label);

/// One sample; deterministic in (spec.seed, label, index).
ActionSequence synth_sequence(const SynthSpec& spec, int label, int index);

/// Writes `<dir>/manifest.json`, `<dir>/classes.json` and one SKJ file per
/// sample, tagging the first train_per_class samples of each class "train"
/// and the rest "val". Throws ConfigError for fewer than 2 classes.
DatasetManifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& dir);

}  // namespace psumnet

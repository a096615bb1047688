#pragma once

// Action sequences, the SKJ file format, manifests and preprocessing.
//
// SKJ: one UTF-8 JSON header line
//   {"skj":1,"topology":str,"T":int,"N":int,"M":int,"label":int}
// followed by T*N*M*3 little-endian float32 values in (t, n, m, c) order.
// Manifest: JSON array of {"path", "label", "split"}; relative paths are
// resolved against the manifest's directory. An optional `classes.json`
// beside it carries {"topology", "classes": [{"name", "category"}]}.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psumnet/skeleton.hpp"
#include "psumnet/tensor.hpp"

namespace psumnet {

struct ActionSequence {
  Tensor<float> coords;  ///< [3, T, N, M]; absent persons are exactly zero
  int label = 0;
  std::string topology;

  std::int64_t frames() const { return coords.dim(1); }
  std::int64_t joints() const { return coords.dim(2); }
  std::int64_t persons() const { return coords.dim(3); }
  /// Person m has at least one nonzero coordinate.
  bool person_present(std::int64_t m) const;
};

/// Reads an SKJ file and checks it against `topo`. With `persons` > 0 the
/// person axis is zero-padded (or cut) to that count. Throws LoadError.
ActionSequence load_sequence(const std::filesystem::path& path, const SkeletonTopology& topo,
                             std::int64_t persons = 0);
void save_sequence(const std::filesystem::path& path, const ActionSequence& seq);

struct ManifestEntry {
  std::string path;  ///< as written in the manifest
  int label = 0;
  std::string split;
};

struct DatasetManifest {
  std::filesystem::path file;
  std::string topology;
  std::vector<std::string> class_names;
  std::vector<std::string> class_categories;  ///< "hand" | "leg" | "whole", when known
  std::vector<ManifestEntry> entries;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::filesystem::path resolve(const ManifestEntry& e) const;
  /// Indices of entries tagged `split`.
  std::vector<std::size_t> split_indices(const std::string& split) const;
};

/// Throws LoadError for malformed JSON, missing files and labels out of range.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Writes the manifest array and its classes.json sidecar.
void save_manifest(const DatasetManifest& manifest);

/// Train/validation entry indices. Uses the "val" tag when present, otherwise
/// carves a stratified `val_fraction` of each class out of "train",
/// choosing members with a generator seeded by `seed`.
struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
SplitIndices train_val_split(const DatasetManifest& m, double val_fraction, std::uint64_t seed);

enum class PadMode { kLoop, kZero };

/// First ceil(fraction * T) frames; throws ConfigError if fewer than 2 remain.
ActionSequence truncate_sequence(const ActionSequence& seq, double fraction);

/// Per present person: translate so the root joint of the first frame sits at
/// the origin. Then fit to `window` frames: loop-pad (or zero-pad) short
/// clips, uniformly subsample long ones.
ActionSequence normalize_sequence(const ActionSequence& seq, const SkeletonTopology& topo,
                                  std::int64_t window, PadMode pad = PadMode::kLoop);

/// Source frame of output frame t when fitting T frames into `window`;
/// -1 marks a zero-padded frame.
std::int64_t window_source_frame(std::int64_t t, std::int64_t frames, std::int64_t window,
                                 PadMode pad);

/// Selects `joints` (in list order) without moving them: coordinates stay in
/// the shared global frame.
ActionSequence select_joints(const ActionSequence& seq, const std::vector<int>& joints);

/// body / hands / legs selections; empty groups give std::nullopt.
std::array<std::optional<ActionSequence>, 3> factorize_parts(const ActionSequence& seq,
                                                             const PartGroupSpec& spec);

/// Re-expresses every joint relative to the root of its component in `graph`
/// (per frame and person). Used for the disjoint-parts ablation only.
ActionSequence to_local_frame(const ActionSequence& seq, const PartSubgraph& graph);

}  // namespace psumnet

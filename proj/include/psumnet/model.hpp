#pragma once

// Part-stream networks and their late fusion.
//
// A stream consumes one part group: MMDG -> stack of STRBs -> global average
// pooling -> linear classifier. Persons are evaluated as separate rows and
// averaged per sample (logits while training, probabilities at inference).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "psumnet/dataset.hpp"
#include "psumnet/mmdg.hpp"
#include "psumnet/optim.hpp"
#include "psumnet/skeleton.hpp"
#include "psumnet/strb.hpp"

namespace psumnet {

struct StreamConfig {
  Part part = Part::kBody;
  std::vector<std::int64_t> channels;  ///< output width of each block
  std::vector<std::int64_t> strides;   ///< temporal stride of each block
  ModalitySelection modalities;
  int num_classes = 0;

  int depth() const { return static_cast<int>(channels.size()); }
  std::int64_t in_channels() const { return 3 * modalities.count(); }
};

/// Depth 10 / 6 / 4 for body / hands / legs. Widths 80-160-320 (body, hands)
/// and 64-128-256 (legs), doubling at each stride-2 block.
StreamConfig default_stream_config(Part part, int num_classes);

struct ModelConfig {
  std::string topology = "ntu25";
  PartGroupSpec parts;
  std::vector<StreamConfig> streams;
  std::vector<double> fusion_weights;  ///< one per stream
  bool fuse_logits = false;
  std::int64_t window = 64;
  std::uint64_t seed = 0;
  SamgOptions samg;

  const StreamConfig* stream(Part part) const;
  /// Throws ConfigError when streams repeat a part, reference an empty group,
  /// disagree on class count, or the fusion weights are invalid.
  void validate() const;
};

/// Every non-empty part group of the topology gets its default stream.
/// Fusion weights default to 1 / 1 / 0.5 for body / hands / legs.
ModelConfig default_model_config(const std::string& topology, int num_classes,
                                 bool disjoint_parts = false);

nlohmann::json to_json(const ModelConfig& cfg);
/// Inverse of to_json; unknown keys and malformed values raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// One part group of a batch, persons flattened into rows.
template <typename T>
struct StreamBatch {
  Tensor<T> coords;         ///< [P, 3, W, N, 1], one row per present person
  std::vector<int> owner;   ///< sample index of each row
  std::vector<int> labels;  ///< one per sample
  std::int64_t samples = 0;
};

/// Gathers `part` from normalized sequences. Persons with no data are left
/// out; a sample with no data at all keeps its first person. For disjoint
/// specs, each component is moved into its local root frame.
template <typename T>
StreamBatch<T> make_stream_batch(const std::vector<const ActionSequence*>& seqs,
                                 const SkeletonTopology& topo, const PartGroupSpec& spec,
                                 Part part);

template <typename T>
class Stream {
 public:
  Stream(const StreamConfig& cfg, const PartSubgraph& graph, const SamgOptions& samg,
         std::mt19937_64& rng);

  /// Per-person logits [P, K].
  Tensor<T> person_logits(const Tensor<T>& coords, bool training);
  /// Logits averaged over each sample's persons, [B, K].
  Tensor<T> logits(const StreamBatch<T>& batch, bool training);
  /// Eval-mode class probabilities averaged over persons, [B, K].
  Tensor<T> probabilities(const StreamBatch<T>& batch);

  /// Names are prefixed with the part, e.g. "hands.strb2.trm.branch0.bn.weight".
  void visit(const TensorVisitor<T>& fn);
  std::vector<Parameter<T>> parameters();

  StreamConfig cfg;
  PartSubgraph graph;
  std::vector<Strb<T>> blocks;
  Tensor<T> fc_weight, fc_bias;
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg);

  Stream<T>* stream(Part part);
  const Stream<T>* stream(Part part) const;
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  std::array<std::optional<Stream<T>>, 3> streams_;
};

/// Validates the config against its topology and initializes every stream
/// from `cfg.seed` (each part draws from its own generator).
template <typename T>
Model<T> build_model(const ModelConfig& cfg);

/// sum_i w_i scores_i / sum_i w_i. Throws ConfigError on a count mismatch,
/// negative weights or an all-zero weight vector.
template <typename T>
Tensor<T> fuse(const std::vector<Tensor<T>>& scores, const std::vector<double>& weights);

struct StreamCount {
  Part part;
  std::int64_t params = 0;
  std::int64_t flops = 0;  ///< multiply-adds for one person at the window length
};
struct ModelCount {
  std::vector<StreamCount> streams;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
};

std::int64_t count_params(Stream<float>& s);
ModelCount count_model(Model<float>& m, std::int64_t window);
/// Multiply-adds of a bias-free convolution (padding positions included).
std::int64_t conv2d_flops(std::int64_t batch, std::int64_t cin, std::int64_t cout,
                          std::int64_t out_t, std::int64_t out_n, std::int64_t kt,
                          std::int64_t kn);
std::int64_t stream_flops(const StreamConfig& cfg, const SamgOptions& samg, std::int64_t joints,
                          std::int64_t window);

// Checkpoint file:
//   "PSUMCKPT" | u32 version | u64 header length | header JSON | float32 blobs
// The header holds {config, config_hash, model, stream, epoch, meta, index:[{name,
// shape, offset, count}]}, offsets in floats from the start of the blob area.
struct NamedBlob {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json config;  ///< effective run configuration, echoed verbatim
  nlohmann::json model;   ///< ModelConfig
  Part part = Part::kBody;
  int epoch = 0;  ///< completed training epochs
  nlohmann::json meta;  ///< free-form training state
  std::vector<NamedBlob> blobs;

  const NamedBlob* find(const std::string& name) const;
};

/// FNV-1a 64 of the compact dump of `j` (object keys are sorted).
std::uint64_t config_hash(const nlohmann::json& j);
std::string hash_hex(std::uint64_t h);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws LoadError for a bad magic, version, index or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and running statistics of one stream, plus optional extra blobs.
Checkpoint snapshot_stream(Model<float>& model, Part part);
/// Copies a snapshot back. Throws ConfigError when the stored model config
/// differs from the model's or a tensor is missing or has another shape.
void restore_stream(Model<float>& model, const Checkpoint& ckpt);

}  // namespace psumnet

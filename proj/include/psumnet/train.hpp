#pragma once

// Per-stream training, evaluation with late fusion, partial-sequence
// evaluation and the ablation driver.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psumnet/dataset.hpp"
#include "psumnet/model.hpp"

namespace psumnet {

struct TrainConfig {
  double base_lr = 0.1;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int batch_size = 16;
  int epochs = 50;
  int warmup_epochs = 5;
  /// Epochs (0-based) at which the rate is multiplied by `lr_factor`.
  /// Empty means 60% and 80% of `epochs`.
  std::vector<int> milestones;
  double lr_factor = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<int> effective_milestones() const;
  /// Linear warmup from base_lr / warmup_epochs, then step decay.
  double lr_at(int epoch) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// A manifest with every sequence loaded (unnormalized) and its split.
struct Dataset {
  DatasetManifest manifest;
  std::string topology;
  std::vector<ActionSequence> sequences;
  SplitIndices split;
};

/// Loads every entry with the person axis padded to `persons`.
Dataset load_dataset(const std::filesystem::path& manifest, double val_fraction,
                     std::uint64_t seed, std::int64_t persons = 2);

/// Entries `idx` truncated to `fraction` of their frames, then normalized to
/// `window` frames.
std::vector<ActionSequence> prepare_sequences(const Dataset& data,
                                              const std::vector<std::size_t>& idx,
                                              std::int64_t window, PadMode pad,
                                              double fraction = 1.0);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double train_acc = 0;
  double val_acc = 0;
};
nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  std::vector<EpochLog> log;
  double first_batch_loss = 0;
  int best_epoch = -1;
  double best_val_acc = -1;
  Checkpoint best;  ///< stream snapshot at the best validation epoch
  Checkpoint last;  ///< snapshot after the final epoch, with momentum buffers
};

struct TrainOptions {
  PadMode pad = PadMode::kLoop;
  nlohmann::json run_config;  ///< echoed into checkpoints
  std::ostream* log = nullptr;  ///< receives one JSON line per epoch
  /// Continue from a `last` snapshot: restores parameters, momentum and epoch.
  const Checkpoint* resume = nullptr;
  /// Called after every epoch with the resumable snapshot, and with the best
  /// snapshot when this epoch improved on it (nullptr otherwise).
  std::function<void(const Checkpoint& last, const Checkpoint* best)> on_epoch;
};

/// Trains one stream of `model` in place. Throws ConfigError for an empty
/// training split or a class-count mismatch with the manifest.
TrainResult train_stream(Model<float>& model, Part part, const Dataset& data,
                         const TrainConfig& cfg, const TrainOptions& opts = {});

/// Per-stream and fused class probabilities for one set of sequences.
struct PredictionScores {
  std::map<Part, Tensor<float>> per_stream;  ///< [S, K]
  Tensor<float> fused;                       ///< [S, K]
};

/// Evaluates the streams whose fusion weight is positive. `weights` has one
/// entry per configured stream, in config order.
PredictionScores predict(Model<float>& model, const std::vector<ActionSequence>& normalized,
                         const std::vector<double>& weights, int batch_size = 32);

struct EvalReport {
  double top1 = 0;
  std::vector<double> per_class;
  std::vector<std::vector<std::int64_t>> confusion;  ///< [true][predicted]
  std::map<Part, double> per_stream;
  std::map<Part, std::vector<double>> per_stream_per_class;
  double fused = 0;
  std::int64_t samples = 0;
};
nlohmann::json to_json(const EvalReport& r);

/// Index of the largest entry in each row; the first wins ties.
std::vector<int> argmax_rows(const Tensor<float>& scores);

EvalReport evaluate(Model<float>& model, const Dataset& data, const std::vector<std::size_t>& idx,
                    const std::vector<double>& weights, PadMode pad = PadMode::kLoop,
                    double fraction = 1.0);

struct PartialPoint {
  double fraction = 1;
  std::int64_t frames = 0;  ///< frames kept from the shortest sequence
  double top1 = 0;
};
std::vector<PartialPoint> evaluate_partial(Model<float>& model, const Dataset& data,
                                           const std::vector<std::size_t>& idx,
                                           const std::vector<double>& fractions,
                                           const std::vector<double>& weights,
                                           PadMode pad = PadMode::kLoop);

struct AblationRow {
  std::string config;
  std::int64_t params = 0;
  double top1 = 0;
};

/// Rows mirror the individual-stream table: single streams, stream pairs and
/// all three (late fusion of independently trained streams), the disjoint
/// part groups, and one row per single input modality.
struct AblationSpec {
  ModelConfig base;  ///< widths, window and seed for every row
  TrainConfig train;
  bool streams = true;
  bool disjoint = true;
  bool modalities = true;
};
std::vector<AblationRow> ablation_run(const AblationSpec& spec, const Dataset& data,
                                      std::ostream* progress = nullptr);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace psumnet

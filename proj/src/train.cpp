#include "psumnet/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "psumnet/errors.hpp"
#include "psumnet/ops.hpp"

namespace psumnet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Activation buffers are large and short-lived; keeping freed blocks in the
// heap avoids re-faulting fresh pages on every step.
void retain_freed_memory() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <typename V>
void read_opt(const json& j, const char* key, V& out, const char* where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(where) + ": key '" + key + "' has the wrong type");
  }
}

std::string momentum_name(const std::string& param) { return "momentum/" + param; }

}  // namespace

void TrainConfig::validate() const {
  if (!std::isfinite(base_lr) || base_lr < 0) throw ConfigError("train.base_lr must be >= 0");
  if (!std::isfinite(weight_decay) || weight_decay < 0) {
    throw ConfigError("train.weight_decay must be >= 0");
  }
  if (!std::isfinite(momentum) || momentum < 0 || momentum >= 1) {
    throw ConfigError("train.momentum must lie in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs must be >= 0");
  if (!(lr_factor > 0) || lr_factor > 1) throw ConfigError("train.lr_factor must lie in (0, 1]");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      throw ConfigError("train.milestones must be non-negative and strictly increasing");
    }
  }
}

std::vector<int> TrainConfig::effective_milestones() const {
  if (!milestones.empty()) return milestones;
  std::vector<int> m;
  for (double f : {0.6, 0.8}) {
    const int e = static_cast<int>(std::lround(f * epochs));
    if (m.empty() || e > m.back()) m.push_back(e);
  }
  return m;
}

double TrainConfig::lr_at(int epoch) const {
  double lr = base_lr;
  if (epoch < warmup_epochs) lr *= static_cast<double>(epoch + 1) / warmup_epochs;
  for (int m : effective_milestones()) {
    if (epoch >= m) lr *= lr_factor;
  }
  return lr;
}

json to_json(const TrainConfig& cfg) {
  return {{"base_lr", cfg.base_lr},         {"weight_decay", cfg.weight_decay},
          {"momentum", cfg.momentum},       {"batch_size", cfg.batch_size},
          {"epochs", cfg.epochs},           {"warmup_epochs", cfg.warmup_epochs},
          {"milestones", cfg.milestones},   {"lr_factor", cfg.lr_factor},
          {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j,
             {"base_lr", "weight_decay", "momentum", "batch_size", "epochs", "warmup_epochs",
              "milestones", "lr_factor", "seed"},
             "train");
  TrainConfig cfg;
  read_opt(j, "base_lr", cfg.base_lr, "train");
  read_opt(j, "weight_decay", cfg.weight_decay, "train");
  read_opt(j, "momentum", cfg.momentum, "train");
  read_opt(j, "batch_size", cfg.batch_size, "train");
  read_opt(j, "epochs", cfg.epochs, "train");
  read_opt(j, "warmup_epochs", cfg.warmup_epochs, "train");
  read_opt(j, "milestones", cfg.milestones, "train");
  read_opt(j, "lr_factor", cfg.lr_factor, "train");
  read_opt(j, "seed", cfg.seed, "train");
  cfg.validate();
  return cfg;
}

Dataset load_dataset(const fs::path& manifest, double val_fraction, std::uint64_t seed,
                     std::int64_t persons) {
  if (!(val_fraction >= 0) || val_fraction >= 1) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  Dataset d;
  d.manifest = load_manifest(manifest);
  d.topology = d.manifest.topology;
  if (!is_builtin_topology(d.topology)) {
    throw ConfigError("manifest topology '" + d.topology + "' is not a built-in skeleton");
  }
  const auto& topo = builtin_topology(d.topology);
  d.sequences.reserve(d.manifest.entries.size());
  for (const auto& e : d.manifest.entries) {
    ActionSequence seq = load_sequence(d.manifest.resolve(e), topo, persons);
    if (seq.label != e.label) {
      throw LoadError(d.manifest.resolve(e).string() + ": label " + std::to_string(seq.label) +
                      " differs from the manifest's " + std::to_string(e.label));
    }
    d.sequences.push_back(std::move(seq));
  }
  d.split = train_val_split(d.manifest, val_fraction, seed);
  return d;
}

std::vector<ActionSequence> prepare_sequences(const Dataset& data,
                                              const std::vector<std::size_t>& idx,
                                              std::int64_t window, PadMode pad,
                                              double fraction) {
  const auto& topo = builtin_topology(data.topology);
  std::vector<ActionSequence> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    const ActionSequence& raw = data.sequences.at(i);
    if (fraction < 1.0) {
      out.push_back(normalize_sequence(truncate_sequence(raw, fraction), topo, window, pad));
    } else {
      out.push_back(normalize_sequence(raw, topo, window, pad));
    }
  }
  return out;
}

json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"train_acc", e.train_acc},
          {"val_acc", e.val_acc}};
}

std::vector<int> argmax_rows(const Tensor<float>& scores) {
  const std::int64_t rows = scores.dim(0), k = scores.dim(1);
  auto d = scores.data();
  std::vector<int> out(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = d.data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

namespace {

std::vector<const ActionSequence*> slice(const std::vector<ActionSequence>& seqs,
                                         const std::vector<std::size_t>& order, std::size_t begin,
                                         std::size_t end) {
  std::vector<const ActionSequence*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&seqs[order[i]]);
  return out;
}

double stream_accuracy(Stream<float>& stream, const ModelConfig& cfg,
                       const std::vector<ActionSequence>& seqs, int batch_size) {
  if (seqs.empty()) return 0.0;
  NoGradGuard guard;
  const auto& topo = builtin_topology(cfg.topology);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t correct = 0;
  for (std::size_t b = 0; b < seqs.size(); b += batch_size) {
    const auto batch = make_stream_batch<float>(
        slice(seqs, order, b, std::min(seqs.size(), b + batch_size)), topo, cfg.parts,
        stream.cfg.part);
    const auto pred = argmax_rows(stream.probabilities(batch));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(seqs.size());
}

}  // namespace

TrainResult train_stream(Model<float>& model, Part part, const Dataset& data,
                         const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  retain_freed_memory();
  Stream<float>* stream = model.stream(part);
  if (!stream) throw ConfigError(std::string("model has no '") + part_name(part) + "' stream");
  const ModelConfig& mcfg = model.config();
  if (data.topology != mcfg.topology) {
    throw ConfigError("dataset topology '" + data.topology + "' does not match the model's '" +
                      mcfg.topology + "'");
  }
  if (data.split.train.empty()) throw ConfigError("training split is empty");
  if (data.manifest.num_classes() != stream->cfg.num_classes) {
    throw ConfigError("manifest has " + std::to_string(data.manifest.num_classes()) +
                      " classes, the model expects " + std::to_string(stream->cfg.num_classes));
  }
  const auto& topo = builtin_topology(mcfg.topology);
  const auto train_seqs = prepare_sequences(data, data.split.train, mcfg.window, opts.pad);
  const auto val_seqs = prepare_sequences(data, data.split.val, mcfg.window, opts.pad);

  auto params = stream->parameters();
  std::vector<std::vector<float>> buffers;
  TrainResult result;
  int start_epoch = 0;
  if (opts.resume) {
    const Checkpoint& r = *opts.resume;
    if (r.part != part) throw ConfigError("resume checkpoint belongs to another stream");
    restore_stream(model, r);
    buffers.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (const NamedBlob* b = r.find(momentum_name(params[i].name))) buffers[i] = b->values;
    }
    start_epoch = r.epoch;
    if (r.meta.is_object()) {
      result.best_epoch = r.meta.value("best_epoch", -1);
      result.best_val_acc = r.meta.value("best_val_acc", -1.0);
    }
  }

  const auto resumable = [&](int epochs_done) {
    Checkpoint c = snapshot_stream(model, part);
    c.config = opts.run_config;
    c.epoch = epochs_done;
    c.meta = {{"best_epoch", result.best_epoch}, {"best_val_acc", result.best_val_acc}};
    for (std::size_t i = 0; i < params.size() && i < buffers.size(); ++i) {
      c.blobs.push_back({momentum_name(params[i].name), params[i].tensor.shape().dims(), buffers[i]});
    }
    return c;
  };

  const SgdOptions sgd_base{cfg.base_lr, cfg.weight_decay, cfg.momentum};
  const std::size_t n = train_seqs.size();
  std::vector<std::size_t> order(n);
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    SgdOptions sgd = sgd_base;
    sgd.lr = cfg.lr_at(epoch);
    double loss_sum = 0;
    std::int64_t correct = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const auto batch = make_stream_batch<float>(
          slice(train_seqs, order, b, std::min(n, b + cfg.batch_size)), topo, mcfg.parts, part);
      Tensor<float> logits = stream->logits(batch, true);
      Tensor<float> loss = cross_entropy(logits, batch.labels);
      if (epoch == 0 && b == 0) result.first_batch_loss = loss.item();
      loss_sum += loss.item() * static_cast<double>(batch.samples);
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
      loss.backward();
      sgd_step(params, buffers, sgd);
      for (auto& p : params) p.tensor.zero_grad();
    }

    EpochLog e{epoch, sgd.lr, loss_sum / static_cast<double>(n),
               static_cast<double>(correct) / static_cast<double>(n),
               stream_accuracy(*stream, mcfg, val_seqs, 32)};
    result.log.push_back(e);
    if (opts.log) *opts.log << to_json(e).dump() << '\n' << std::flush;
    const bool improved = e.val_acc >= result.best_val_acc;
    if (improved) {
      result.best_val_acc = e.val_acc;
      result.best_epoch = epoch;
      result.best = snapshot_stream(model, part);
      result.best.config = opts.run_config;
      result.best.epoch = epoch + 1;
      result.best.meta = {{"best_epoch", epoch}, {"best_val_acc", e.val_acc}};
    }
    if (opts.on_epoch || epoch + 1 == cfg.epochs) {
      result.last = resumable(epoch + 1);
      if (opts.on_epoch) opts.on_epoch(result.last, improved ? &result.best : nullptr);
    }
  }

  if (start_epoch >= cfg.epochs) result.last = resumable(cfg.epochs);
  if (result.best_epoch < start_epoch) {
    // Every epoch came from the previous run; the best snapshot is gone.
    result.best = result.last;
    std::erase_if(result.best.blobs,
                  [](const NamedBlob& b) { return b.name.rfind("momentum/", 0) == 0; });
  }
  return result;
}

PredictionScores predict(Model<float>& model, const std::vector<ActionSequence>& normalized,
                         const std::vector<double>& weights, int batch_size) {
  const ModelConfig& cfg = model.config();
  if (weights.size() != cfg.streams.size()) {
    throw ConfigError("expected " + std::to_string(cfg.streams.size()) +
                      " fusion weights, got " + std::to_string(weights.size()));
  }
  if (normalized.empty()) throw ConfigError("nothing to evaluate");
  retain_freed_memory();
  NoGradGuard guard;
  const auto& topo = builtin_topology(cfg.topology);
  std::vector<std::size_t> order(normalized.size());
  std::iota(order.begin(), order.end(), 0);

  PredictionScores out;
  std::vector<Tensor<float>> fused_inputs;
  std::vector<double> used_weights;
  for (std::size_t s = 0; s < cfg.streams.size(); ++s) {
    if (weights[s] <= 0) continue;
    const Part part = cfg.streams[s].part;
    Stream<float>* stream = model.stream(part);
    std::vector<Tensor<float>> chunks, logit_chunks;
    for (std::size_t b = 0; b < normalized.size(); b += batch_size) {
      const auto batch = make_stream_batch<float>(
          slice(normalized, order, b, std::min(normalized.size(), b + batch_size)), topo,
          cfg.parts, part);
      if (cfg.fuse_logits) {
        logit_chunks.push_back(stream->logits(batch, false));
        chunks.push_back(softmax(logit_chunks.back()));
      } else {
        chunks.push_back(stream->probabilities(batch));
      }
    }
    Tensor<float> probs = chunks.size() == 1 ? chunks.front() : concat(chunks, 0);
    out.per_stream[part] = probs;
    if (cfg.fuse_logits) {
      fused_inputs.push_back(logit_chunks.size() == 1 ? logit_chunks.front()
                                                      : concat(logit_chunks, 0));
    } else {
      fused_inputs.push_back(probs);
    }
    used_weights.push_back(weights[s]);
  }
  if (used_weights.empty()) throw ConfigError("fusion weights are all zero");
  out.fused = fuse(fused_inputs, used_weights);
  if (cfg.fuse_logits) out.fused = softmax(out.fused);
  return out;
}

json to_json(const EvalReport& r) {
  json streams = json::object();
  for (const auto& [part, acc] : r.per_stream) {
    streams[part_name(part)] = {{"top1", acc}, {"per_class", r.per_stream_per_class.at(part)}};
  }
  return {{"top1", r.top1},         {"fused_top1", r.fused},   {"samples", r.samples},
          {"per_class", r.per_class}, {"confusion", r.confusion}, {"streams", streams}};
}

namespace {

std::vector<double> recall_per_class(const std::vector<std::vector<std::int64_t>>& confusion) {
  std::vector<double> out(confusion.size(), 0.0);
  for (std::size_t k = 0; k < confusion.size(); ++k) {
    const auto total = std::accumulate(confusion[k].begin(), confusion[k].end(), std::int64_t{0});
    if (total > 0) out[k] = static_cast<double>(confusion[k][k]) / static_cast<double>(total);
  }
  return out;
}

std::vector<std::vector<std::int64_t>> confusion_of(const std::vector<int>& labels,
                                                    const std::vector<int>& pred, int k) {
  std::vector<std::vector<std::int64_t>> c(k, std::vector<std::int64_t>(k, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) ++c[labels[i]][pred[i]];
  return c;
}

double trace_fraction(const std::vector<std::vector<std::int64_t>>& c, std::size_t total) {
  std::int64_t t = 0;
  for (std::size_t k = 0; k < c.size(); ++k) t += c[k][k];
  return total ? static_cast<double>(t) / static_cast<double>(total) : 0.0;
}

}  // namespace

EvalReport evaluate(Model<float>& model, const Dataset& data, const std::vector<std::size_t>& idx,
                    const std::vector<double>& weights, PadMode pad, double fraction) {
  const ModelConfig& cfg = model.config();
  if (data.topology != cfg.topology) {
    throw ConfigError("dataset topology '" + data.topology + "' does not match the model's '" +
                      cfg.topology + "'");
  }
  const int k = cfg.streams.front().num_classes;
  if (data.manifest.num_classes() != k) {
    throw ConfigError("manifest has " + std::to_string(data.manifest.num_classes()) +
                      " classes, the model expects " + std::to_string(k));
  }
  const auto seqs = prepare_sequences(data, idx, cfg.window, pad, fraction);
  const PredictionScores scores = predict(model, seqs, weights);
  std::vector<int> labels;
  for (const auto& s : seqs) labels.push_back(s.label);

  EvalReport r;
  r.samples = static_cast<std::int64_t>(seqs.size());
  r.confusion = confusion_of(labels, argmax_rows(scores.fused), k);
  r.per_class = recall_per_class(r.confusion);
  r.top1 = trace_fraction(r.confusion, seqs.size());
  r.fused = r.top1;
  for (const auto& [part, probs] : scores.per_stream) {
    const auto c = confusion_of(labels, argmax_rows(probs), k);
    r.per_stream[part] = trace_fraction(c, seqs.size());
    r.per_stream_per_class[part] = recall_per_class(c);
  }
  return r;
}

std::vector<PartialPoint> evaluate_partial(Model<float>& model, const Dataset& data,
                                           const std::vector<std::size_t>& idx,
                                           const std::vector<double>& fractions,
                                           const std::vector<double>& weights, PadMode pad) {
  if (fractions.empty()) throw ConfigError("no partial fractions given");
  std::vector<PartialPoint> out;
  for (double f : fractions) {
    if (!(f > 0) || f > 1) {
      throw ConfigError("partial fraction must lie in (0, 1], got " + std::to_string(f));
    }
    PartialPoint p;
    p.fraction = f;
    p.frames = std::numeric_limits<std::int64_t>::max();
    for (std::size_t i : idx) {
      const auto t = data.sequences.at(i).frames();
      p.frames = std::min(p.frames, f < 1.0 ? truncate_sequence(data.sequences[i], f).frames() : t);
    }
    p.top1 = evaluate(model, data, idx, weights, pad, f).top1;
    out.push_back(p);
  }
  return out;
}

namespace {

std::int64_t params_of(Model<float>& model, const std::vector<Part>& parts) {
  std::int64_t n = 0;
  for (Part p : parts) n += count_params(*model.stream(p));
  return n;
}

Model<float> train_all(const ModelConfig& cfg, const TrainConfig& train, const Dataset& data,
                       std::ostream* progress, const std::string& label) {
  Model<float> model(cfg);
  for (const auto& s : cfg.streams) {
    if (progress) *progress << "ablation: training " << label << " / " << part_name(s.part) << "\n";
    train_stream(model, s.part, data, train);
  }
  return model;
}

std::vector<double> weights_for(const ModelConfig& cfg, const std::vector<Part>& keep) {
  std::vector<double> w;
  for (std::size_t i = 0; i < cfg.streams.size(); ++i) {
    const bool on = std::find(keep.begin(), keep.end(), cfg.streams[i].part) != keep.end();
    w.push_back(on ? cfg.fusion_weights[i] : 0.0);
  }
  return w;
}

std::vector<Part> all_parts(const ModelConfig& cfg) {
  std::vector<Part> out;
  for (const auto& s : cfg.streams) out.push_back(s.part);
  return out;
}

}  // namespace

std::vector<AblationRow> ablation_run(const AblationSpec& spec, const Dataset& data,
                                      std::ostream* progress) {
  spec.base.validate();
  spec.train.validate();
  const auto& val = data.split.val;
  if (val.empty()) throw ConfigError("ablation needs a validation split");
  std::vector<AblationRow> rows;

  if (spec.streams) {
    Model<float> model = train_all(spec.base, spec.train, data, progress, "streams");
    const auto parts = all_parts(spec.base);
    // Every non-empty subset, singles first, in body/hands/legs order.
    std::vector<std::vector<Part>> subsets;
    for (std::size_t size = 1; size <= parts.size(); ++size) {
      for (unsigned mask = 1; mask < (1u << parts.size()); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != size) continue;
        std::vector<Part> s;
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (mask & (1u << i)) s.push_back(parts[i]);
        }
        subsets.push_back(s);
      }
    }
    for (const auto& s : subsets) {
      std::string name;
      for (Part p : s) name += (name.empty() ? "" : "+") + std::string(part_name(p));
      const auto w = weights_for(spec.base, s);
      if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0; })) continue;
      rows.push_back({name, params_of(model, s), evaluate(model, data, val, w).top1});
    }
  }

  if (spec.disjoint) {
    ModelConfig cfg = spec.base;
    cfg.parts = disjoint_part_spec(cfg.topology);
    Model<float> model = train_all(cfg, spec.train, data, progress, "disjoint");
    rows.push_back({"disjoint", params_of(model, all_parts(cfg)),
                    evaluate(model, data, val, cfg.fusion_weights).top1});
  }

  if (spec.modalities) {
    for (const char* m : {"joint", "bone", "joint_vel", "bone_vel"}) {
      ModelConfig cfg = spec.base;
      for (auto& s : cfg.streams) s.modalities = ModalitySelection::parse(m);
      Model<float> model = train_all(cfg, spec.train, data, progress, m);
      rows.push_back({std::string("modality:") + m, params_of(model, all_parts(cfg)),
                      evaluate(model, data, val, cfg.fusion_weights).top1});
    }
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "config,params,top1\n";
  for (const auto& r : rows) {
    out << r.config << ',' << r.params << ',' << json(r.top1).dump() << '\n';
  }
}

}  // namespace psumnet

#include "psumnet/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "psumnet/errors.hpp"
#include "psumnet/ops.hpp"

namespace psumnet {

namespace fs = std::filesystem;
using nlohmann::json;

StreamConfig default_stream_config(Part part, int num_classes) {
  StreamConfig s;
  s.part = part;
  s.num_classes = num_classes;
  switch (part) {
    case Part::kBody:
      s.channels = {80, 80, 80, 80, 160, 160, 160, 320, 320, 320};
      s.strides = {1, 1, 1, 1, 2, 1, 1, 2, 1, 1};
      break;
    case Part::kHands:
      s.channels = {80, 80, 160, 160, 320, 320};
      s.strides = {1, 1, 2, 1, 2, 1};
      break;
    case Part::kLegs:
      s.channels = {64, 128, 256, 256};
      s.strides = {1, 2, 2, 1};
      break;
  }
  return s;
}

const StreamConfig* ModelConfig::stream(Part part) const {
  for (const auto& s : streams) {
    if (s.part == part) return &s;
  }
  return nullptr;
}

void ModelConfig::validate() const {
  if (!is_builtin_topology(topology)) throw ConfigError("unknown topology '" + topology + "'");
  const auto& topo = builtin_topology(topology);
  validate_part_spec(topo, parts);
  if (streams.empty() || streams.size() > 3) throw ConfigError("a model needs 1 to 3 streams");
  std::set<Part> seen;
  for (const auto& s : streams) {
    const std::string name = part_name(s.part);
    if (!seen.insert(s.part).second) throw ConfigError("stream '" + name + "' listed twice");
    if (parts.group(s.part).empty()) {
      throw ConfigError("stream '" + name + "' has an empty part group on " + topology);
    }
    if (s.num_classes < 2) throw ConfigError("stream '" + name + "' needs at least 2 classes");
    if (s.num_classes != streams.front().num_classes) {
      throw ConfigError("streams disagree on the number of classes");
    }
    if (s.channels.empty() || s.channels.size() != s.strides.size()) {
      throw ConfigError("stream '" + name + "': channels and strides must be non-empty and equal length");
    }
    if (s.modalities.count() == 0) throw ConfigError("stream '" + name + "' selects no modality");
    std::int64_t frames = window;
    for (std::size_t i = 0; i < s.channels.size(); ++i) {
      if (s.channels[i] < 4) {
        throw ConfigError("stream '" + name + "': block widths must be at least 4");
      }
      if (s.strides[i] != 1 && s.strides[i] != 2) {
        throw ConfigError("stream '" + name + "': strides must be 1 or 2");
      }
      // Widest default TRM branch (kt 5, dilation 2) needs 5 frames.
      if (frames < 5) {
        throw ConfigError("stream '" + name + "': window " + std::to_string(window) +
                          " leaves " + std::to_string(frames) + " frames at block " +
                          std::to_string(i + 1) + ", fewer than 5");
      }
      frames = (frames - 1) / s.strides[i] + 1;
    }
  }
  if (fusion_weights.size() != streams.size()) {
    throw ConfigError("expected " + std::to_string(streams.size()) + " fusion weights, got " +
                      std::to_string(fusion_weights.size()));
  }
  double total = 0;
  for (double w : fusion_weights) {
    if (!std::isfinite(w) || w < 0) throw ConfigError("fusion weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0) throw ConfigError("fusion weights are all zero");
}

ModelConfig default_model_config(const std::string& topology, int num_classes,
                                 bool disjoint_parts) {
  ModelConfig cfg;
  cfg.topology = topology;
  cfg.parts = disjoint_parts ? disjoint_part_spec(topology) : default_part_spec(topology);
  for (Part part : kAllParts) {
    if (cfg.parts.group(part).empty()) continue;
    cfg.streams.push_back(default_stream_config(part, num_classes));
    cfg.fusion_weights.push_back(part == Part::kLegs ? 0.5 : 1.0);
  }
  return cfg;
}

namespace {

const char* sigma_name(SigmaMode m) { return m == SigmaMode::kTanh ? "tanh" : "conv"; }
const char* attention_name(AttentionMode m) {
  return m == AttentionMode::kChannelwise ? "channelwise" : "shared";
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <typename V>
V get_field(const json& j, const char* key, const char* where) {
  if (!j.contains(key)) throw ConfigError(std::string(where) + ": missing key '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(where) + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace

json to_json(const ModelConfig& cfg) {
  json streams = json::array();
  for (const auto& s : cfg.streams) {
    streams.push_back({{"part", part_name(s.part)},
                       {"channels", s.channels},
                       {"strides", s.strides},
                       {"modalities", s.modalities.str()},
                       {"num_classes", s.num_classes}});
  }
  return {{"topology", cfg.topology},
          {"parts",
           {{"body", cfg.parts.body},
            {"hands", cfg.parts.hands},
            {"legs", cfg.parts.legs},
            {"throat_anchor", cfg.parts.throat_anchor},
            {"hip_anchor", cfg.parts.hip_anchor},
            {"disjoint", cfg.parts.disjoint}}},
          {"streams", streams},
          {"fusion_weights", cfg.fusion_weights},
          {"fuse_logits", cfg.fuse_logits},
          {"window", cfg.window},
          {"seed", cfg.seed},
          {"samg", {{"sigma", sigma_name(cfg.samg.sigma)},
                    {"attention", attention_name(cfg.samg.attention)}}}};
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j,
             {"topology", "parts", "streams", "fusion_weights", "fuse_logits", "window", "seed",
              "samg"},
             "model");
  ModelConfig cfg;
  cfg.topology = get_field<std::string>(j, "topology", "model");
  const json& p = j.at("parts");
  check_keys(p, {"body", "hands", "legs", "throat_anchor", "hip_anchor", "disjoint"}, "model.parts");
  cfg.parts.body = get_field<std::vector<int>>(p, "body", "model.parts");
  cfg.parts.hands = get_field<std::vector<int>>(p, "hands", "model.parts");
  cfg.parts.legs = get_field<std::vector<int>>(p, "legs", "model.parts");
  cfg.parts.throat_anchor = get_field<int>(p, "throat_anchor", "model.parts");
  cfg.parts.hip_anchor = get_field<int>(p, "hip_anchor", "model.parts");
  cfg.parts.disjoint = get_field<bool>(p, "disjoint", "model.parts");
  const json& streams = j.at("streams");
  if (!streams.is_array()) throw ConfigError("model.streams must be an array");
  for (const auto& s : streams) {
    check_keys(s, {"part", "channels", "strides", "modalities", "num_classes"}, "model.streams");
    StreamConfig sc;
    sc.part = parse_part(get_field<std::string>(s, "part", "model.streams"));
    sc.channels = get_field<std::vector<std::int64_t>>(s, "channels", "model.streams");
    sc.strides = get_field<std::vector<std::int64_t>>(s, "strides", "model.streams");
    sc.modalities = ModalitySelection::parse(get_field<std::string>(s, "modalities", "model.streams"));
    sc.num_classes = get_field<int>(s, "num_classes", "model.streams");
    cfg.streams.push_back(std::move(sc));
  }
  cfg.fusion_weights = get_field<std::vector<double>>(j, "fusion_weights", "model");
  cfg.fuse_logits = get_field<bool>(j, "fuse_logits", "model");
  cfg.window = get_field<std::int64_t>(j, "window", "model");
  cfg.seed = get_field<std::uint64_t>(j, "seed", "model");
  const json& sm = j.at("samg");
  check_keys(sm, {"sigma", "attention"}, "model.samg");
  const auto sigma = get_field<std::string>(sm, "sigma", "model.samg");
  const auto attention = get_field<std::string>(sm, "attention", "model.samg");
  if (sigma != "tanh" && sigma != "conv") throw ConfigError("model.samg.sigma must be tanh or conv");
  if (attention != "channelwise" && attention != "shared") {
    throw ConfigError("model.samg.attention must be channelwise or shared");
  }
  cfg.samg.sigma = sigma == "tanh" ? SigmaMode::kTanh : SigmaMode::kConv;
  cfg.samg.attention =
      attention == "channelwise" ? AttentionMode::kChannelwise : AttentionMode::kShared;
  return cfg;
}

template <typename T>
StreamBatch<T> make_stream_batch(const std::vector<const ActionSequence*>& seqs,
                                 const SkeletonTopology& topo, const PartGroupSpec& spec,
                                 Part part) {
  if (seqs.empty()) throw DimensionError("make_stream_batch: empty batch");
  const auto& joints = spec.group(part);
  if (joints.empty()) {
    throw ConfigError(std::string("make_stream_batch: empty '") + part_name(part) + "' group");
  }
  const PartSubgraph graph = part_subgraph(topo, joints, spec.disjoint);
  const std::int64_t w = seqs.front()->frames();
  const auto n = static_cast<std::int64_t>(joints.size());

  StreamBatch<T> batch;
  batch.samples = static_cast<std::int64_t>(seqs.size());
  std::vector<T> data;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const ActionSequence& full = *seqs[b];
    if (full.frames() != w) throw DimensionError("make_stream_batch: sequences differ in length");
    ActionSequence seq = select_joints(full, joints);
    if (spec.disjoint) seq = to_local_frame(seq, graph);
    const auto m = seq.persons();
    std::vector<std::int64_t> persons;
    for (std::int64_t p = 0; p < m; ++p) {
      if (full.person_present(p)) persons.push_back(p);
    }
    if (persons.empty()) persons.push_back(0);
    auto d = seq.coords.data();
    for (std::int64_t p : persons) {
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t t = 0; t < w; ++t)
          for (std::int64_t j = 0; j < n; ++j) data.push_back(static_cast<T>(d[((c * w + t) * n + j) * m + p]));
      batch.owner.push_back(static_cast<int>(b));
    }
    batch.labels.push_back(full.label);
  }
  const auto rows = static_cast<std::int64_t>(batch.owner.size());
  batch.coords = Tensor<T>(Shape{rows, 3, w, n, 1}, std::move(data));
  return batch;
}

namespace {

// [B, P] row-averaging matrix over each sample's person rows.
template <typename T>
Tensor<T> person_average(const std::vector<int>& owner, std::int64_t samples) {
  const auto rows = static_cast<std::int64_t>(owner.size());
  std::vector<int> counts(samples, 0);
  for (int o : owner) ++counts[o];
  Tensor<T> s(Shape{samples, rows});
  for (std::int64_t r = 0; r < rows; ++r) s.data()[owner[r] * rows + r] = T(1) / T(counts[owner[r]]);
  return s;
}

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<T>(u(rng));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
Stream<T>::Stream(const StreamConfig& c, const PartSubgraph& g, const SamgOptions& samg,
                  std::mt19937_64& rng)
    : cfg(c), graph(g) {
  const Tensor<T> adjacency = build_adjacency<T>(graph.parent);
  std::int64_t cin = cfg.in_channels();
  for (int i = 0; i < cfg.depth(); ++i) {
    StrbConfig bc{.in_channels = cin, .out_channels = cfg.channels[i], .stride = cfg.strides[i],
                  .samg = samg};
    blocks.emplace_back(bc, adjacency, rng);
    cin = cfg.channels[i];
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
  fc_weight = uniform_param<T>(Shape{cfg.num_classes, cin}, bound, rng);
  fc_bias = uniform_param<T>(Shape{cfg.num_classes}, bound, rng);
}

template <typename T>
Tensor<T> Stream<T>::person_logits(const Tensor<T>& coords, bool training) {
  Tensor<T> x = fold_persons(assemble(coords, graph.parent, cfg.modalities));
  Tensor<T> h = strm_forward(x, blocks, training);
  return linear(global_avg_pool(h), fc_weight, fc_bias);
}

template <typename T>
Tensor<T> Stream<T>::logits(const StreamBatch<T>& batch, bool training) {
  Tensor<T> z = person_logits(batch.coords, training);
  if (batch.owner.size() == static_cast<std::size_t>(batch.samples)) return z;
  return matmul(person_average<T>(batch.owner, batch.samples), z);
}

template <typename T>
Tensor<T> Stream<T>::probabilities(const StreamBatch<T>& batch) {
  Tensor<T> p = softmax(person_logits(batch.coords, false));
  if (batch.owner.size() == static_cast<std::size_t>(batch.samples)) return p;
  return matmul(person_average<T>(batch.owner, batch.samples), p);
}

template <typename T>
void Stream<T>::visit(const TensorVisitor<T>& fn) {
  const std::string prefix = part_name(cfg.part);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".strb" + std::to_string(i + 1), fn);
  }
  fn(prefix + ".fc.weight", fc_weight, true);
  fn(prefix + ".fc.bias", fc_bias, true);
}

template <typename T>
std::vector<Parameter<T>> Stream<T>::parameters() {
  std::vector<Parameter<T>> out;
  visit([&](const std::string& name, Tensor<T>& t, bool trainable) {
    if (trainable) out.push_back({name, t});
  });
  return out;
}

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& topo = builtin_topology(cfg_.topology);
  for (const auto& sc : cfg_.streams) {
    const auto idx = static_cast<std::uint64_t>(sc.part);
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(idx)};
    std::mt19937_64 rng(seq);
    streams_[idx].emplace(sc, part_subgraph(topo, cfg_.parts.group(sc.part), cfg_.parts.disjoint),
                          cfg_.samg, rng);
  }
}

template <typename T>
Stream<T>* Model<T>::stream(Part part) {
  auto& s = streams_[static_cast<int>(part)];
  return s ? &*s : nullptr;
}

template <typename T>
const Stream<T>* Model<T>::stream(Part part) const {
  const auto& s = streams_[static_cast<int>(part)];
  return s ? &*s : nullptr;
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

template <typename T>
Tensor<T> fuse(const std::vector<Tensor<T>>& scores, const std::vector<double>& weights) {
  if (scores.empty() || scores.size() != weights.size()) {
    throw ConfigError("fuse: " + std::to_string(weights.size()) + " weights for " +
                      std::to_string(scores.size()) + " streams");
  }
  double total = 0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0) throw ConfigError("fuse: weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0) throw ConfigError("fuse: weights are all zero");
  Tensor<T> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (weights[i] == 0) continue;  // same result as dropping the stream
    if (scores[i].shape() != scores.front().shape()) throw DimensionError("fuse: score shapes differ");
    Tensor<T> term = scale(scores[i], static_cast<T>(weights[i] / total));
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

std::int64_t count_params(Stream<float>& s) {
  std::int64_t n = 0;
  s.visit([&](const std::string&, Tensor<float>& t, bool trainable) {
    if (trainable) n += t.numel();
  });
  return n;
}

std::int64_t conv2d_flops(std::int64_t batch, std::int64_t cin, std::int64_t cout,
                          std::int64_t out_t, std::int64_t out_n, std::int64_t kt,
                          std::int64_t kn) {
  return batch * cout * out_t * out_n * cin * kt * kn;
}

std::int64_t stream_flops(const StreamConfig& cfg, const SamgOptions& samg, std::int64_t n,
                          std::int64_t window) {
  std::int64_t total = 0;
  std::int64_t cin = cfg.in_channels();
  std::int64_t t_in = window;
  const auto branches = default_trm_branches();
  for (int i = 0; i < cfg.depth(); ++i) {
    const std::int64_t cout = cfg.channels[i];
    const std::int64_t t_out = (t_in - 1) / cfg.strides[i] + 1;
    const std::int64_t cr = reduced_channels(cin);
    const std::int64_t maps = samg.attention == AttentionMode::kChannelwise ? cout : 1;
    total += conv2d_flops(1, cin, cout, t_in, n, 1, 1);      // theta
    total += 2 * conv2d_flops(1, cin, cr, t_in, n, 1, 1);    // phi, psi
    if (samg.sigma == SigmaMode::kConv) total += cr * cr * n * n;
    total += maps * cr * n * n;                              // channel expansion
    total += cout * t_in * n * n;                            // graph aggregation
    const auto nb = static_cast<std::int64_t>(branches.size());
    for (std::int64_t b = 0; b < nb; ++b) {
      const std::int64_t cb = cout / nb + (b == 0 ? cout % nb : 0);
      const auto& spec = branches[b];
      if (spec.kind == TrmBranchSpec::Kind::kPointwise) {
        total += conv2d_flops(1, cout, cb, t_out, n, 1, 1);
        continue;
      }
      total += conv2d_flops(1, cout, cb, t_in, n, 1, 1);
      if (spec.kind == TrmBranchSpec::Kind::kConv) {
        total += conv2d_flops(1, cb, cb, t_out, n, spec.kernel, 1);
      }
    }
    if (cin != cout || cfg.strides[i] != 1) total += conv2d_flops(1, cin, cout, t_out, n, 1, 1);
    cin = cout;
    t_in = t_out;
  }
  return total + cin * cfg.num_classes;
}

ModelCount count_model(Model<float>& m, std::int64_t window) {
  ModelCount out;
  for (const auto& sc : m.config().streams) {
    StreamCount c{sc.part, count_params(*m.stream(sc.part)),
                  stream_flops(sc, m.config().samg,
                               static_cast<std::int64_t>(m.config().parts.group(sc.part).size()),
                               window)};
    out.total_params += c.params;
    out.total_flops += c.flops;
    out.streams.push_back(c);
  }
  return out;
}

const NamedBlob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

std::uint64_t config_hash(const json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[i] = digits[h & 15];
  return s;
}

namespace {

constexpr char kMagic[8] = {'P', 'S', 'U', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename V>
void write_raw(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_raw(std::istream& in, const fs::path& path, const char* what) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    throw LoadError(path.string() + ": truncated checkpoint (" + what + ")");
  }
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json index = json::array();
  std::int64_t offset = 0;
  for (const auto& b : ckpt.blobs) {
    index.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset},
                     {"count", b.values.size()}});
    offset += static_cast<std::int64_t>(b.values.size());
  }
  const json header = {{"config", ckpt.config},
                       {"config_hash", hash_hex(config_hash(ckpt.config))},
                       {"model", ckpt.model},
                       {"stream", part_name(ckpt.part)},
                       {"epoch", ckpt.epoch},
                       {"meta", ckpt.meta},
                       {"index", index}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, kVersion);
  write_raw(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : ckpt.blobs) {
    out.write(reinterpret_cast<const char*>(b.values.data()),
              static_cast<std::streamsize>(b.values.size() * sizeof(float)));
  }
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw LoadError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = read_raw<std::uint32_t>(in, path, "version");
  if (version != kVersion) {
    throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = read_raw<std::uint64_t>(in, path, "header length");
  if (len > (1u << 26)) throw LoadError(path.string() + ": header length out of range");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw LoadError(path.string() + ": truncated checkpoint (header)");
  }
  Checkpoint ckpt;
  json header;
  try {
    header = json::parse(text);
    ckpt.config = header.at("config");
    ckpt.model = header.at("model");
    ckpt.part = parse_part(header.at("stream").get<std::string>());
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.meta = header.value("meta", json());
  } catch (const std::exception& e) {
    throw LoadError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  const auto data_start = in.tellg();
  std::int64_t expected_offset = 0;
  for (const auto& entry : header.at("index")) {
    NamedBlob b;
    std::int64_t offset = 0, count = 0;
    try {
      b.name = entry.at("name").get<std::string>();
      b.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      offset = entry.at("offset").get<std::int64_t>();
      count = entry.at("count").get<std::int64_t>();
    } catch (const json::exception& e) {
      throw LoadError(path.string() + ": malformed index entry: " + e.what());
    }
    std::int64_t numel = 1;
    for (auto d : b.shape) numel *= d;
    if (offset != expected_offset || count != numel || count < 0) {
      throw LoadError(path.string() + ": inconsistent index entry for '" + b.name + "'");
    }
    b.values.resize(count);
    in.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(float)));
    if (!in.read(reinterpret_cast<char*>(b.values.data()),
                 static_cast<std::streamsize>(count * sizeof(float)))) {
      throw LoadError(path.string() + ": truncated checkpoint (tensor '" + b.name + "')");
    }
    expected_offset += count;
    ckpt.blobs.push_back(std::move(b));
  }
  return ckpt;
}

Checkpoint snapshot_stream(Model<float>& model, Part part) {
  Stream<float>* s = model.stream(part);
  if (!s) throw ConfigError(std::string("model has no '") + part_name(part) + "' stream");
  Checkpoint ckpt;
  ckpt.model = to_json(model.config());
  ckpt.part = part;
  s->visit([&](const std::string& name, Tensor<float>& t, bool) {
    auto d = t.data();
    ckpt.blobs.push_back({name, t.shape().dims(), std::vector<float>(d.begin(), d.end())});
  });
  return ckpt;
}

void restore_stream(Model<float>& model, const Checkpoint& ckpt) {
  if (ckpt.model != to_json(model.config())) {
    throw ConfigError("checkpoint was written for a different model configuration");
  }
  Stream<float>* s = model.stream(ckpt.part);
  if (!s) throw ConfigError(std::string("model has no '") + part_name(ckpt.part) + "' stream");
  s->visit([&](const std::string& name, Tensor<float>& t, bool) {
    const NamedBlob* b = ckpt.find(name);
    if (!b) throw ConfigError("checkpoint lacks tensor '" + name + "'");
    if (b->shape != t.shape().dims()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                        Shape(b->shape).str() + ", model expects " + t.shape().str());
    }
    std::copy(b->values.begin(), b->values.end(), t.data().begin());
  });
}

#define PSUMNET_INSTANTIATE_MODEL(T)                                                        \
  template struct StreamBatch<T>;                                                           \
  template StreamBatch<T> make_stream_batch<T>(const std::vector<const ActionSequence*>&,   \
                                               const SkeletonTopology&, const PartGroupSpec&, \
                                               Part);                                       \
  template class Stream<T>;                                                                 \
  template class Model<T>;                                                                  \
  template Model<T> build_model<T>(const ModelConfig&);                                     \
  template Tensor<T> fuse<T>(const std::vector<Tensor<T>>&, const std::vector<double>&);

PSUMNET_INSTANTIATE_MODEL(float)
PSUMNET_INSTANTIATE_MODEL(double)

}  // namespace psumnet

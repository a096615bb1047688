#include "psumnet/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include <json.hpp>

#include "psumnet/errors.hpp"

namespace psumnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
  }
  return v;
}

std::int64_t header_int(const json& h, const char* key, const fs::path& path) {
  if (!h.contains(key) || !h[key].is_number_integer()) {
    throw LoadError(path.string() + ": header field '" + key + "' missing or not an integer");
  }
  return h[key].get<std::int64_t>();
}

}  // namespace

bool ActionSequence::person_present(std::int64_t m) const {
  const auto t = frames(), n = joints(), mm = persons();
  auto d = coords.data();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t f = 0; f < t; ++f)
      for (std::int64_t j = 0; j < n; ++j)
        if (d[((c * t + f) * n + j) * mm + m] != 0.0f) return true;
  return false;
}

ActionSequence load_sequence(const fs::path& path, const SkeletonTopology& topo,
                             std::int64_t persons) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open sequence file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path.string() + ": missing header line");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": malformed header (" + e.what() + ")");
  }
  if (!h.is_object()) throw LoadError(path.string() + ": header is not a JSON object");
  if (header_int(h, "skj", path) != 1) throw LoadError(path.string() + ": unsupported skj version");
  if (!h.contains("topology") || !h["topology"].is_string()) {
    throw LoadError(path.string() + ": header field 'topology' missing or not a string");
  }
  const std::string topology = h["topology"];
  const auto t = header_int(h, "T", path), n = header_int(h, "N", path),
             m = header_int(h, "M", path);
  const auto label = header_int(h, "label", path);
  if (topology != topo.name) {
    throw LoadError(path.string() + ": field 'topology' is '" + topology + "', expected '" +
                    topo.name + "'");
  }
  if (n != topo.num_joints()) {
    throw LoadError(path.string() + ": field 'N' is " + std::to_string(n) + " but " + topo.name +
                    " has " + std::to_string(topo.num_joints()) + " joints");
  }
  if (t < 1) throw LoadError(path.string() + ": field 'T' must be >= 1");
  if (m < 1) throw LoadError(path.string() + ": field 'M' must be >= 1");
  if (label < 0) throw LoadError(path.string() + ": field 'label' must be >= 0");

  const std::size_t count = static_cast<std::size_t>(t * n * m * 3);
  std::vector<std::uint32_t> raw(count);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 4));
  if (static_cast<std::size_t>(in.gcount()) != count * 4) {
    throw LoadError(path.string() + ": payload shorter than T*N*M*3 floats");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw LoadError(path.string() + ": trailing bytes after T*N*M*3 floats");
  }

  const std::int64_t mo = persons > 0 ? persons : m;
  std::vector<float> data(static_cast<std::size_t>(3 * t * n * mo), 0.0f);
  for (std::int64_t f = 0; f < t; ++f)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < std::min(m, mo); ++p)
        for (std::int64_t c = 0; c < 3; ++c) {
          const float v = std::bit_cast<float>(to_le(raw[((f * n + j) * m + p) * 3 + c]));
          if (!std::isfinite(v)) {
            throw LoadError(path.string() + ": non-finite coordinate at frame " +
                            std::to_string(f) + ", joint " + std::to_string(j));
          }
          data[((c * t + f) * n + j) * mo + p] = v;
        }
  ActionSequence seq;
  seq.coords = Tensor<float>(Shape{3, t, n, mo}, std::move(data));
  seq.label = static_cast<int>(label);
  seq.topology = topology;
  return seq;
}

void save_sequence(const fs::path& path, const ActionSequence& seq) {
  const auto t = seq.frames(), n = seq.joints(), m = seq.persons();
  json h = {{"skj", 1}, {"topology", seq.topology}, {"T", t}, {"N", n}, {"M", m},
            {"label", seq.label}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write sequence file " + path.string());
  out << h.dump() << '\n';
  std::vector<std::uint32_t> raw(static_cast<std::size_t>(t * n * m * 3));
  auto d = seq.coords.data();
  for (std::int64_t f = 0; f < t; ++f)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < m; ++p)
        for (std::int64_t c = 0; c < 3; ++c)
          raw[((f * n + j) * m + p) * 3 + c] =
              to_le(std::bit_cast<std::uint32_t>(d[((c * t + f) * n + j) * m + p]));
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * 4));
  if (!out) throw LoadError("failed writing " + path.string());
}

fs::path DatasetManifest::resolve(const ManifestEntry& e) const {
  const fs::path p(e.path);
  return p.is_absolute() ? p : file.parent_path() / p;
}

std::vector<std::size_t> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) idx.push_back(i);
  }
  return idx;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest " + path.string());
  json arr;
  try {
    arr = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": malformed manifest (" + e.what() + ")");
  }
  if (!arr.is_array()) throw LoadError(path.string() + ": manifest must be a JSON array");
  DatasetManifest m;
  m.file = path;
  int max_label = -1;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const json& e = arr[i];
    const std::string where = path.string() + ": entry " + std::to_string(i);
    if (!e.is_object() || !e.contains("path") || !e["path"].is_string()) {
      throw LoadError(where + ": field 'path' missing or not a string");
    }
    if (!e.contains("label") || !e["label"].is_number_integer()) {
      throw LoadError(where + ": field 'label' missing or not an integer");
    }
    if (!e.contains("split") || !e["split"].is_string()) {
      throw LoadError(where + ": field 'split' missing or not a string");
    }
    ManifestEntry entry{e["path"], e["label"], e["split"]};
    if (entry.label < 0) throw LoadError(where + ": negative label");
    if (!fs::exists(m.resolve(entry))) {
      throw LoadError(where + ": file " + m.resolve(entry).string() + " does not exist");
    }
    max_label = std::max(max_label, entry.label);
    m.entries.push_back(std::move(entry));
  }

  const fs::path side = path.parent_path() / "classes.json";
  if (fs::exists(side)) {
    std::ifstream sin(side);
    json c;
    try {
      c = json::parse(sin);
      m.topology = c.at("topology").get<std::string>();
      for (const auto& cls : c.at("classes")) {
        m.class_names.push_back(cls.at("name").get<std::string>());
        m.class_categories.push_back(cls.value("category", ""));
      }
    } catch (const json::exception& e) {
      throw LoadError(side.string() + ": malformed class list (" + e.what() + ")");
    }
    if (max_label >= m.num_classes()) {
      throw LoadError(path.string() + ": label " + std::to_string(max_label) + " but only " +
                      std::to_string(m.num_classes()) + " classes");
    }
  } else {
    for (int k = 0; k <= max_label; ++k) m.class_names.push_back("class" + std::to_string(k));
    if (!m.entries.empty()) {
      std::ifstream first(m.resolve(m.entries.front()), std::ios::binary);
      std::string line;
      std::getline(first, line);
      try {
        m.topology = json::parse(line).at("topology").get<std::string>();
      } catch (const json::exception&) {
        throw LoadError(m.resolve(m.entries.front()).string() + ": malformed header");
      }
    }
  }
  return m;
}

void save_manifest(const DatasetManifest& m) {
  json arr = json::array();
  for (const auto& e : m.entries) {
    arr.push_back({{"path", e.path}, {"label", e.label}, {"split", e.split}});
  }
  std::ofstream out(m.file);
  if (!out) throw LoadError("cannot write manifest " + m.file.string());
  out << arr.dump(1) << '\n';
  json classes = json::array();
  for (int k = 0; k < m.num_classes(); ++k) {
    json c = {{"name", m.class_names[k]}};
    if (k < static_cast<int>(m.class_categories.size())) c["category"] = m.class_categories[k];
    classes.push_back(c);
  }
  std::ofstream side(m.file.parent_path() / "classes.json");
  side << json{{"topology", m.topology}, {"classes", classes}}.dump(1) << '\n';
}

SplitIndices train_val_split(const DatasetManifest& m, double val_fraction, std::uint64_t seed) {
  SplitIndices s;
  s.train = m.split_indices("train");
  s.val = m.split_indices("val");
  if (!s.val.empty()) return s;
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : s.train) by_class[m.entries[i].label].push_back(i);
  std::mt19937_64 rng(seed);
  s.train.clear();
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto nval = static_cast<std::size_t>(std::floor(val_fraction * members.size() + 0.5));
    s.val.insert(s.val.end(), members.begin(), members.begin() + nval);
    s.train.insert(s.train.end(), members.begin() + nval, members.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

namespace {

ActionSequence with_frames(const ActionSequence& seq, std::int64_t out_t,
                           const std::vector<std::int64_t>& src) {
  const auto t = seq.frames(), nm = seq.joints() * seq.persons();
  std::vector<float> data(static_cast<std::size_t>(3 * out_t * nm), 0.0f);
  auto d = seq.coords.data();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t f = 0; f < out_t; ++f) {
      if (src[f] < 0) continue;
      std::copy_n(d.begin() + (c * t + src[f]) * nm, nm, data.begin() + (c * out_t + f) * nm);
    }
  ActionSequence out = seq;
  out.coords = Tensor<float>(Shape{3, out_t, seq.joints(), seq.persons()}, std::move(data));
  return out;
}

}  // namespace

ActionSequence truncate_sequence(const ActionSequence& seq, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ConfigError("partial fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  const auto t = seq.frames();
  const auto keep = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(t) - 1e-9));
  if (keep < 2) {
    throw ConfigError("fraction " + std::to_string(fraction) + " of " + std::to_string(t) +
                      " frames leaves fewer than 2");
  }
  std::vector<std::int64_t> src(keep);
  for (std::int64_t f = 0; f < keep; ++f) src[f] = f;
  return with_frames(seq, keep, src);
}

std::int64_t window_source_frame(std::int64_t t, std::int64_t frames, std::int64_t window,
                                 PadMode pad) {
  if (frames == window) return t;
  if (frames > window) return t * frames / window;
  if (t < frames) return t;
  return pad == PadMode::kLoop ? t % frames : -1;
}

ActionSequence normalize_sequence(const ActionSequence& seq, const SkeletonTopology& topo,
                                  std::int64_t window, PadMode pad) {
  if (window < 2) throw ConfigError("window must be >= 2 frames");
  if (seq.joints() != topo.num_joints()) {
    throw DimensionError("normalize_sequence: sequence has " + std::to_string(seq.joints()) +
                         " joints, topology " + topo.name + " has " +
                         std::to_string(topo.num_joints()));
  }
  const auto t = seq.frames(), n = seq.joints(), m = seq.persons();
  const int root = topo.root();
  ActionSequence centered = seq;
  centered.coords = seq.coords.detach();
  auto d = centered.coords.data();
  for (std::int64_t p = 0; p < m; ++p) {
    if (!seq.person_present(p)) continue;
    for (std::int64_t c = 0; c < 3; ++c) {
      const float origin = d[((c * t + 0) * n + root) * m + p];
      for (std::int64_t f = 0; f < t; ++f)
        for (std::int64_t j = 0; j < n; ++j) d[((c * t + f) * n + j) * m + p] -= origin;
    }
  }
  std::vector<std::int64_t> src(window);
  for (std::int64_t f = 0; f < window; ++f) src[f] = window_source_frame(f, t, window, pad);
  return with_frames(centered, window, src);
}

ActionSequence select_joints(const ActionSequence& seq, const std::vector<int>& joints) {
  const auto t = seq.frames(), n = seq.joints(), m = seq.persons();
  const auto k = static_cast<std::int64_t>(joints.size());
  if (k == 0) throw DimensionError("select_joints: empty joint list");
  for (int j : joints) {
    if (j < 0 || j >= n) {
      throw DimensionError("select_joints: joint " + std::to_string(j) + " out of range for " +
                           std::to_string(n) + " joints");
    }
  }
  std::vector<float> data(static_cast<std::size_t>(3 * t * k * m));
  auto d = seq.coords.data();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t f = 0; f < t; ++f)
      for (std::int64_t i = 0; i < k; ++i)
        for (std::int64_t p = 0; p < m; ++p)
          data[((c * t + f) * k + i) * m + p] = d[((c * t + f) * n + joints[i]) * m + p];
  ActionSequence out = seq;
  out.coords = Tensor<float>(Shape{3, t, k, m}, std::move(data));
  return out;
}

std::array<std::optional<ActionSequence>, 3> factorize_parts(const ActionSequence& seq,
                                                             const PartGroupSpec& spec) {
  std::array<std::optional<ActionSequence>, 3> out;
  for (Part part : kAllParts) {
    const auto& g = spec.group(part);
    if (!g.empty()) out[static_cast<int>(part)] = select_joints(seq, g);
  }
  return out;
}

ActionSequence to_local_frame(const ActionSequence& seq, const PartSubgraph& graph) {
  const auto t = seq.frames(), n = seq.joints(), m = seq.persons();
  if (n != static_cast<std::int64_t>(graph.parent.size())) {
    throw DimensionError("to_local_frame: joint count does not match the subgraph");
  }
  std::vector<int> comp_root(n);
  for (std::int64_t j = 0; j < n; ++j) {
    int r = static_cast<int>(j);
    while (graph.parent[r] != r) r = graph.parent[r];
    comp_root[j] = r;
  }
  ActionSequence out = seq;
  out.coords = seq.coords.detach();
  auto src = seq.coords.data();
  auto d = out.coords.data();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t f = 0; f < t; ++f)
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t p = 0; p < m; ++p)
          d[((c * t + f) * n + j) * m + p] -= src[((c * t + f) * n + comp_root[j]) * m + p];
  return out;
}

}  // namespace psumnet

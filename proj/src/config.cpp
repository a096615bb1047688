#include "psumnet/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "psumnet/errors.hpp"

namespace psumnet {

using json = nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename V>
V get_or(const json& j, const char* key, V fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}

void apply_override(json& j, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + spec + "' is not of the form key=value");
  }
  const std::string path = spec.substr(0, eq), text = spec.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::stringstream in(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(in, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].empty()) throw ConfigError("override '" + spec + "' has an empty key");
    if (!node->is_object()) throw ConfigError("override '" + spec + "' does not name an object key");
    node = &(*node)[keys[i]];
  }
  *node = std::move(value);
}

ModelConfig short_model_config(const json& m, int manifest_classes) {
  const std::string where = "model";
  check_keys(m,
             {"topology", "num_classes", "streams", "disjoint_parts", "modalities", "window", "seed",
              "fusion_weights", "fuse_logits", "samg"},
             where);
  const int classes = get_or<int>(m, "num_classes", manifest_classes, where);
  ModelConfig cfg = default_model_config(get_or<std::string>(m, "topology", "ntu25", where), classes,
                                         get_or<bool>(m, "disjoint_parts", false, where));
  if (m.contains("streams")) {
    const auto wanted = get_or<std::vector<std::string>>(m, "streams", {}, where);
    if (wanted.empty()) throw ConfigError("model.streams is empty");
    ModelConfig kept = cfg;
    kept.streams.clear();
    kept.fusion_weights.clear();
    for (const auto& name : wanted) {
      const Part part = parse_part(name);
      const StreamConfig* s = cfg.stream(part);
      if (s == nullptr) throw ConfigError("model.streams: topology has no '" + name + "' group");
      kept.streams.push_back(*s);
      kept.fusion_weights.push_back(part == Part::kLegs ? 0.5 : 1.0);
    }
    cfg = std::move(kept);
  }
  if (m.contains("modalities")) {
    const auto sel = ModalitySelection::parse(get_or<std::string>(m, "modalities", "", where));
    for (auto& s : cfg.streams) s.modalities = sel;
  }
  cfg.window = get_or<std::int64_t>(m, "window", cfg.window, where);
  cfg.seed = get_or<std::uint64_t>(m, "seed", cfg.seed, where);
  cfg.fusion_weights = get_or<std::vector<double>>(m, "fusion_weights", cfg.fusion_weights, where);
  cfg.fuse_logits = get_or<bool>(m, "fuse_logits", cfg.fuse_logits, where);
  if (m.contains("samg")) {
    // Reuse the strict parser of the full form for this one section.
    json full = psumnet::to_json(cfg);
    full["samg"] = m.at("samg");
    cfg.samg = model_config_from_json(full).samg;
  }
  return cfg;
}

}  // namespace

json RunConfig::to_json() const {
  return {{"version", version},
          {"data",
           {{"manifest", manifest.generic_string()},
            {"val_fraction", val_fraction},
            {"pad", pad == PadMode::kLoop ? "loop" : "zero"},
            {"persons", persons}}},
          {"model", psumnet::to_json(model)},
          {"train", psumnet::to_json(train)}};
}

RunConfig run_config_from_json(json j, const std::filesystem::path& base_dir,
                               const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) apply_override(j, o);
  check_keys(j, {"version", "data", "model", "train"}, "config");
  RunConfig rc;
  if (!j.contains("version")) throw ConfigError("config: missing key 'version'");
  rc.version = get_or<int>(j, "version", 0, "config");
  if (rc.version != kRunConfigVersion) {
    throw ConfigError("config: unsupported version " + std::to_string(rc.version));
  }

  if (!j.contains("data")) throw ConfigError("config: missing section 'data'");
  const json& d = j.at("data");
  check_keys(d, {"manifest", "val_fraction", "pad", "persons"}, "data");
  if (!d.contains("manifest")) throw ConfigError("data: missing key 'manifest'");
  std::filesystem::path manifest = get_or<std::string>(d, "manifest", "", "data");
  if (manifest.is_relative()) manifest = base_dir / manifest;
  rc.manifest = std::filesystem::weakly_canonical(manifest);
  if (!std::filesystem::is_regular_file(rc.manifest)) {
    throw ConfigError("data.manifest: no such file: " + rc.manifest.string());
  }
  rc.val_fraction = get_or<double>(d, "val_fraction", rc.val_fraction, "data");
  if (!(rc.val_fraction > 0 && rc.val_fraction < 1)) {
    throw ConfigError("data.val_fraction must lie in (0, 1)");
  }
  const auto pad = get_or<std::string>(d, "pad", "loop", "data");
  if (pad != "loop" && pad != "zero") throw ConfigError("data.pad must be loop or zero");
  rc.pad = pad == "loop" ? PadMode::kLoop : PadMode::kZero;
  rc.persons = get_or<std::int64_t>(d, "persons", rc.persons, "data");
  if (rc.persons < 1) throw ConfigError("data.persons must be positive");

  DatasetManifest man;
  try {
    man = load_manifest(rc.manifest);
  } catch (const LoadError& e) {
    throw ConfigError(std::string("data.manifest: ") + e.what());
  }

  const json m = j.value("model", json::object());
  rc.model = m.contains("parts") ? model_config_from_json(m) : short_model_config(m, man.num_classes());
  rc.model.validate();
  if (rc.model.topology != man.topology) {
    throw ConfigError("model topology '" + rc.model.topology + "' differs from the manifest's '" +
                      man.topology + "'");
  }
  for (const auto& s : rc.model.streams) {
    if (s.num_classes != man.num_classes()) {
      throw ConfigError("model has " + std::to_string(s.num_classes) + " classes, manifest has " +
                        std::to_string(man.num_classes()));
    }
  }

  rc.train = train_config_from_json(j.value("train", json::object()));
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::string>& overrides) {
  if (!std::filesystem::is_regular_file(file)) {
    throw ConfigError("config: no such file: " + file.string());
  }
  std::ifstream in(file);
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ConfigError("config: " + file.string() + " is not valid JSON");
  return run_config_from_json(std::move(j), file.parent_path(), overrides);
}

std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || !std::isfinite(v)) {
      throw ConfigError("'" + text + "' is not a comma-separated list of numbers");
    }
    out.push_back(v);
  }
  if (out.empty() || text.back() == ',') {
    throw ConfigError("'" + text + "' is not a comma-separated list of numbers");
  }
  return out;
}

}  // namespace psumnet

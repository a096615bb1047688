// psumnet: synthesize data, train part streams, evaluate with late fusion,
// run the ablation grid, count parameters and check gradients.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "psumnet/config.hpp"
#include "psumnet/errors.hpp"
#include "psumnet/gradsuite.hpp"
#include "psumnet/kernels.hpp"
#include "psumnet/model.hpp"
#include "psumnet/synth.hpp"
#include "psumnet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace psumnet;

namespace {

struct ConfigFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* cmd, bool required = true) {
    cmd->add_option("--config", config, "run configuration (JSON)")->required(required);
    cmd->add_option("--set", overrides, "override a config value, e.g. train.epochs=20");
    cmd->add_option("--seed", seed, "sets model.seed and train.seed");
  }
  RunConfig load() const {
    auto all = overrides;
    if (seed) {
      all.push_back("model.seed=" + std::to_string(*seed));
      all.push_back("train.seed=" + std::to_string(*seed));
    }
    return load_run_config(config, all);
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void emit(const std::string& out, const json& j) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(out, j);
  }
}

std::vector<Part> requested_parts(const RunConfig& rc, const std::string& stream) {
  std::vector<Part> parts;
  for (const auto& s : rc.model.streams) {
    if (stream == "all" || stream == part_name(s.part)) parts.push_back(s.part);
  }
  if (parts.empty()) throw ConfigError("the configuration has no '" + stream + "' stream");
  return parts;
}

Dataset load_data(const RunConfig& rc) {
  return load_dataset(rc.manifest, rc.val_fraction, rc.train.seed, rc.persons);
}

// ---------------------------------------------------------------- synth

int cmd_synth(const SynthSpec& spec, const std::string& out) {
  const DatasetManifest m = synth_dataset(spec, out);
  json classes = json::array();
  for (int k = 0; k < m.num_classes(); ++k) {
    classes.push_back({{"name", m.class_names[k]}, {"category", m.class_categories[k]}});
  }
  // A starter config next to the data.
  write_json(fs::path(out) / "config.json",
             {{"version", kRunConfigVersion},
              {"data", {{"manifest", "manifest.json"}}},
              {"model", {{"topology", spec.topology}, {"window", spec.frames}, {"seed", spec.seed}}},
              {"train", {{"seed", spec.seed}}}});
  std::cout << json{{"manifest", m.file.generic_string()},
                    {"topology", m.topology},
                    {"samples", m.entries.size()},
                    {"train", m.split_indices("train").size()},
                    {"val", m.split_indices("val").size()},
                    {"frames", spec.frames},
                    {"classes", classes}}
                   .dump(2)
            << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const ConfigFlags& flags, const std::string& stream, const std::string& out_dir,
              bool resume) {
  const RunConfig rc = flags.load();
  const json effective = rc.to_json();
  const auto parts = requested_parts(rc, stream);
  const fs::path out(out_dir);
  fs::create_directories(out);

  // Check every resume point before any work starts.
  std::map<Part, Checkpoint> resume_from;
  if (resume) {
    for (Part p : parts) {
      const fs::path last = out / (std::string(part_name(p)) + ".last.ckpt");
      if (!fs::exists(last)) continue;
      Checkpoint c = load_checkpoint(last);
      if (config_hash(c.config) != rc.hash()) {
        throw ConfigError("cannot resume from " + last.string() + ": config hash " +
                          hash_hex(config_hash(c.config)) + " differs from " + hash_hex(rc.hash()));
      }
      resume_from.emplace(p, std::move(c));
    }
  }

  const Dataset data = load_data(rc);
  write_json(out / "config.json", effective);
  Model<float> model = build_model<float>(rc.model);
  json summary = {{"config_hash", hash_hex(rc.hash())}, {"streams", json::array()}};
  for (Part p : parts) {
    const std::string name = part_name(p);
    const auto it = resume_from.find(p);
    std::ofstream log(out / (name + ".log.jsonl"),
                      it != resume_from.end() ? std::ios::app : std::ios::trunc);
    TrainOptions opts;
    opts.pad = rc.pad;
    opts.run_config = effective;
    opts.log = &log;
    opts.resume = it != resume_from.end() ? &it->second : nullptr;
    opts.on_epoch = [&](const Checkpoint& last, const Checkpoint* best) {
      if (best) save_checkpoint(out / (name + ".best.ckpt"), *best);
      save_checkpoint(out / (name + ".last.ckpt"), last);
    };
    std::cerr << "training " << name << " on " << data.split.train.size() << " sequences\n";
    const TrainResult r = train_stream(model, p, data, rc.train, opts);
    if (r.log.empty()) {
      save_checkpoint(out / (name + ".best.ckpt"), r.best);
      save_checkpoint(out / (name + ".last.ckpt"), r.last);
    }
    summary["streams"].push_back({{"part", name},
                                  {"epochs", r.last.epoch},
                                  {"best_epoch", r.best_epoch},
                                  {"best_val_acc", r.best_val_acc},
                                  {"first_batch_loss", r.first_batch_loss},
                                  {"checkpoint", (out / (name + ".best.ckpt")).generic_string()}});
  }
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const ConfigFlags& flags, const std::vector<std::string>& checkpoints,
             const std::string& weights_text, const std::string& partial_text,
             const std::string& split, const std::string& out) {
  const RunConfig rc = flags.load();
  std::vector<double> weights;
  if (!weights_text.empty()) {
    weights = parse_number_list(weights_text);
    if (weights.size() != rc.model.streams.size()) {
      throw ConfigError("--fusion-weights has " + std::to_string(weights.size()) +
                        " entries for " + std::to_string(rc.model.streams.size()) + " streams");
    }
  }
  std::vector<double> fractions;
  if (!partial_text.empty()) fractions = parse_number_list(partial_text);
  for (double f : fractions) {
    if (!(f > 0 && f <= 1)) throw ConfigError("--partial fractions must lie in (0, 1]");
  }
  for (const auto& c : checkpoints) {
    if (!fs::is_regular_file(c)) throw ConfigError("no such checkpoint: " + c);
  }

  Model<float> model = build_model<float>(rc.model);
  std::map<Part, std::string> loaded;
  for (const auto& c : checkpoints) {
    const Checkpoint ckpt = load_checkpoint(c);
    if (loaded.count(ckpt.part)) {
      throw ConfigError("two checkpoints for the " + std::string(part_name(ckpt.part)) + " stream");
    }
    restore_stream(model, ckpt);
    loaded[ckpt.part] = c;
  }
  // Streams without a checkpoint drop out of the default fusion.
  if (weights.empty()) {
    for (std::size_t i = 0; i < rc.model.streams.size(); ++i) {
      weights.push_back(loaded.count(rc.model.streams[i].part) ? rc.model.fusion_weights[i] : 0.0);
    }
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const Part p = rc.model.streams[i].part;
    if (weights[i] > 0 && !loaded.count(p)) {
      throw ConfigError("stream " + std::string(part_name(p)) +
                        " has a positive fusion weight but no checkpoint");
    }
  }

  const Dataset data = load_data(rc);
  const auto& idx = split == "train" ? data.split.train : data.split.val;
  if (idx.empty()) throw ConfigError("the " + split + " split is empty");
  json ckpts = json::object();
  for (const auto& [p, path] : loaded) ckpts[part_name(p)] = path;
  json result = {{"config", rc.to_json()},
                 {"checkpoints", ckpts},
                 {"split", split},
                 {"fusion_weights", weights},
                 {"report", to_json(evaluate(model, data, idx, weights, rc.pad))}};
  if (!fractions.empty()) {
    json table = json::array();
    for (const auto& pt : evaluate_partial(model, data, idx, fractions, weights, rc.pad)) {
      table.push_back({{"fraction", pt.fraction}, {"frames", pt.frames}, {"top1", pt.top1}});
    }
    result["partial"] = table;
  }
  emit(out, result);
  return 0;
}

// ---------------------------------------------------------------- info

int cmd_info(const ConfigFlags& flags, const std::string& topology, int classes,
             std::int64_t window) {
  ModelConfig cfg;
  json echo;
  if (!flags.config.empty()) {
    const RunConfig rc = flags.load();
    cfg = rc.model;
    echo = rc.to_json();
  } else {
    cfg = default_model_config(topology, classes);
    cfg.window = window;
    echo = {{"model", to_json(cfg)}};
  }
  Model<float> model = build_model<float>(cfg);
  const ModelCount count = count_model(model, cfg.window);
  json streams = json::array();
  for (const auto& s : count.streams) {
    streams.push_back({{"part", part_name(s.part)},
                       {"depth", cfg.stream(s.part)->depth()},
                       {"joints", cfg.parts.group(s.part).size()},
                       {"params", s.params},
                       {"flops", s.flops}});
  }
  std::cout << json{{"config", echo},
                    {"window", cfg.window},
                    {"streams", streams},
                    {"total_params", count.total_params},
                    {"total_flops", count.total_flops}}
                   .dump(2)
            << '\n';
  return 0;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& module, std::uint64_t seed, int seeds, double tol) {
  int failures = 0;
  const auto cases = run_grad_suite(module, seed, seeds, tol, [&](const GradCase& c) {
    const auto& r = c.report;
    if (!r.passed) ++failures;
    std::cout << json{{"module", c.module},
                      {"case", c.name},
                      {"seed", c.seed},
                      {"passed", r.passed},
                      {"max_rel_error", r.max_rel_error},
                      {"checked", r.checked},
                      {"non_smooth", r.non_smooth},
                      {"worst", r.worst}}
                     .dump()
              << '\n';
  });
  std::cerr << cases.size() - failures << "/" << cases.size() << " cases passed\n";
  return failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const ConfigFlags& flags, const std::string& out, bool streams, bool disjoint,
               bool modalities) {
  const RunConfig rc = flags.load();
  const Dataset data = load_data(rc);
  AblationSpec spec{rc.model, rc.train, streams, disjoint, modalities};
  const auto rows = ablation_run(spec, data, &std::cerr);
  if (out.empty()) {
    write_ablation_csv(std::cout, rows);
  } else {
    std::ofstream f(out);
    if (!f) throw LoadError("cannot write " + out);
    write_ablation_csv(f, rows);
    write_json(out + ".config.json", rc.to_json());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part-stream skeleton action recognition"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads (default: all)")->check(CLI::NonNegativeNumber);

  SynthSpec synth;
  std::string synth_out;
  auto* s = app.add_subcommand("synth", "write a synthetic part-dominant dataset");
  s->add_option("--out", synth_out, "output directory")->required();
  s->add_option("--classes", synth.classes, "number of classes")->check(CLI::Range(2, 1 << 20));
  s->add_option("--samples", synth.train_per_class, "training samples per class")->check(CLI::PositiveNumber);
  s->add_option("--val-samples", synth.val_per_class, "validation samples per class")->check(CLI::NonNegativeNumber);
  s->add_option("--topology", synth.topology, "ntu25 | ntux67")->check(CLI::IsMember({"ntu25", "ntux67"}));
  s->add_option("--seed", synth.seed, "generator seed");
  s->add_option("--frames", synth.frames, "frames per sequence")->check(CLI::Range(2, 1 << 16));

  ConfigFlags train_flags;
  std::string train_stream_name = "all", train_out;
  bool resume = false;
  auto* t = app.add_subcommand("train", "train part streams");
  train_flags.add_to(t);
  t->add_option("--stream", train_stream_name, "body | hands | legs | all")
      ->check(CLI::IsMember({"body", "hands", "legs", "all"}));
  t->add_option("--out", train_out, "output directory")->required();
  t->add_flag("--resume", resume, "continue from <out>/<stream>.last.ckpt where present");

  ConfigFlags eval_flags;
  std::vector<std::string> checkpoints;
  std::string weights, partial, split = "val", eval_out;
  auto* e = app.add_subcommand("eval", "evaluate trained streams with late fusion");
  eval_flags.add_to(e);
  e->add_option("--checkpoints", checkpoints, "stream checkpoints")->required();
  e->add_option("--fusion-weights", weights, "one weight per configured stream, e.g. 1,1,0.5");
  e->add_option("--partial", partial, "observed fractions, e.g. 0.2,0.4,0.6,0.8,1.0");
  e->add_option("--split", split, "val | train")->check(CLI::IsMember({"val", "train"}));
  e->add_option("--out", eval_out, "report file (default: stdout)");

  ConfigFlags info_flags;
  std::string info_topology = "ntu25";
  int info_classes = 60;
  std::int64_t info_window = 64;
  auto* i = app.add_subcommand("info", "parameter and FLOP counts per stream");
  info_flags.add_to(i, false);
  i->add_option("--topology", info_topology, "used without --config")->check(CLI::IsMember({"ntu25", "ntux67"}));
  i->add_option("--classes", info_classes, "used without --config")->check(CLI::PositiveNumber);
  i->add_option("--window", info_window, "used without --config")->check(CLI::PositiveNumber);

  std::string module = "all";
  std::uint64_t gc_seed = 0;
  int gc_seeds = 20;
  double gc_tol = 1e-4;
  std::vector<std::string> module_names{"all"};
  for (const auto& m : grad_modules()) module_names.push_back(m);
  auto* g = app.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");
  g->add_option("--module", module, "all | ops | mmdg | samg | trm | strb | stream")
      ->check(CLI::IsMember(module_names));
  g->add_option("--seed", gc_seed, "first seed");
  g->add_option("--seeds", gc_seeds, "number of seeds")->check(CLI::PositiveNumber);
  g->add_option("--tol", gc_tol, "relative tolerance")->check(CLI::PositiveNumber);

  ConfigFlags ablate_flags;
  std::string ablate_out;
  bool no_streams = false, no_disjoint = false, no_modalities = false;
  auto* a = app.add_subcommand("ablate", "individual-stream, disjoint-part and modality table");
  ablate_flags.add_to(a);
  a->add_option("--out", ablate_out, "CSV file (default: stdout)");
  a->add_flag("--no-streams", no_streams, "skip the stream-subset rows");
  a->add_flag("--no-disjoint", no_disjoint, "skip the disjoint-parts row");
  a->add_flag("--no-modalities", no_modalities, "skip the single-modality rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    kernels::set_num_threads(threads);
    if (s->parsed()) return cmd_synth(synth, synth_out);
    if (t->parsed()) return cmd_train(train_flags, train_stream_name, train_out, resume);
    if (e->parsed()) return cmd_eval(eval_flags, checkpoints, weights, partial, split, eval_out);
    if (i->parsed()) return cmd_info(info_flags, info_topology, info_classes, info_window);
    if (g->parsed()) return cmd_gradcheck(module, gc_seed, gc_seeds, gc_tol);
    if (a->parsed()) return cmd_ablate(ablate_flags, ablate_out, !no_streams, !no_disjoint, !no_modalities);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}

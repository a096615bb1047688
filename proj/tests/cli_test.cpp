#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "psumnet/config.hpp"
#include "psumnet/errors.hpp"
#include "psumnet/synth.hpp"

namespace psumnet {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CliRun {
  int code = -1;
  std::string out;  ///< stdout and stderr interleaved
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(PSUMNET_CLI) + " --threads 1 " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf;
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Everything after the last line that does not belong to the JSON document.
json stdout_json(const std::string& out) { return json::parse(out.substr(out.find('{'))); }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "psumnet_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    SynthSpec spec;
    spec.classes = 3;
    spec.train_per_class = 4;
    spec.val_per_class = 2;
    spec.frames = 24;
    synth_dataset(spec, dir_ / "data");

    // Narrow streams so a whole run takes well under a second.
    json model = to_json(default_model_config("ntu25", 3));
    for (auto& s : model["streams"]) s["channels"] = std::vector<int>(s["channels"].size(), 8);
    model["window"] = 20;
    write(dir_ / "tiny.json",
          {{"version", 1},
           {"data", {{"manifest", "data/manifest.json"}}},
           {"model", model},
           {"train", {{"epochs", 2}, {"batch_size", 4}, {"base_lr", 0.05}, {"warmup_epochs", 1}}}});
  }
  static void write(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(1); }
  static std::string path(const std::string& rel) { return (dir_ / rel).string(); }

  static fs::path dir_;
};
fs::path Cli::dir_;

TEST_F(Cli, SynthIsByteReproducibleAndRejectsOneClass) {
  ASSERT_EQ(run("synth --out " + path("s1") + " --classes 2 --samples 3").code, 0);
  ASSERT_EQ(run("synth --out " + path("s2") + " --classes 2 --samples 3").code, 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(path("s1"))) {
    if (e.path().extension() == ".skj") ++files;
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(path("s2")) / e.path().filename()));
  }
  EXPECT_EQ(files, 2 * (3 + 8));
  EXPECT_EQ(run("synth --out " + path("s3") + " --classes 1").code, 2);
}

TEST_F(Cli, TrainAllWritesThreeStreamsDeterministically) {
  const CliRun a = run("train --config " + path("tiny.json") + " --stream all --out " + path("ta"));
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(run("train --config " + path("tiny.json") + " --stream all --out " + path("tb")).code, 0);
  for (const char* part : {"body", "hands", "legs"}) {
    for (const char* kind : {".best.ckpt", ".last.ckpt", ".log.jsonl"}) {
      const std::string f = std::string(part) + kind;
      ASSERT_TRUE(fs::exists(fs::path(path("ta")) / f)) << f;
      EXPECT_EQ(slurp(fs::path(path("ta")) / f), slurp(fs::path(path("tb")) / f)) << f;
    }
    std::ifstream log(fs::path(path("ta")) / (std::string(part) + ".log.jsonl"));
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
      const json e = json::parse(line);
      for (const char* k : {"epoch", "lr", "loss", "train_acc", "val_acc"}) EXPECT_TRUE(e.contains(k));
      ++lines;
    }
    EXPECT_EQ(lines, 2);
  }
  EXPECT_EQ(read_json(fs::path(path("ta")) / "config.json")["train"]["epochs"], 2);
}

TEST_F(Cli, MissingManifestNamesThePath) {
  json cfg = read_json(path("tiny.json"));
  cfg["data"]["manifest"] = "nowhere/manifest.json";
  write(path("missing.json"), cfg);
  const CliRun r = run("train --config " + path("missing.json") + " --out " + path("tm"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("nowhere/manifest.json"), std::string::npos) << r.out;
}

TEST_F(Cli, ResumeRefusesAnotherConfig) {
  const std::string base = "train --config " + path("tiny.json") + " --stream legs --out " + path("tr");
  ASSERT_EQ(run(base).code, 0);
  EXPECT_EQ(run(base + " --resume").code, 0);
  const CliRun r = run(base + " --resume --set train.base_lr=0.01");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("config hash"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalFusionAndPartial) {
  ASSERT_EQ(run("train --config " + path("tiny.json") + " --out " + path("te")).code, 0);
  const std::string ck = " --checkpoints " + path("te/body.best.ckpt") + " " +
                         path("te/hands.best.ckpt") + " " + path("te/legs.best.ckpt");
  const std::string base = "eval --config " + path("tiny.json") + ck;

  ASSERT_EQ(run(base + " --out " + path("full.json")).code, 0);
  ASSERT_EQ(run(base + " --fusion-weights 0,1,0 --out " + path("hands.json")).code, 0);
  ASSERT_EQ(run(base + " --partial 1.0 --out " + path("partial.json")).code, 0);
  const json full = read_json(path("full.json")), hands = read_json(path("hands.json")),
             partial = read_json(path("partial.json"));
  EXPECT_EQ(hands["report"]["fused_top1"], full["report"]["streams"]["hands"]["top1"]);
  EXPECT_EQ(partial["report"], full["report"]);
  EXPECT_EQ(partial["partial"][0]["top1"], full["report"]["fused_top1"]);
  EXPECT_EQ(full["config"]["model"]["window"], 20);

  EXPECT_EQ(run(base + " --fusion-weights 1,,2").code, 2);
  EXPECT_EQ(run(base + " --fusion-weights 1,1").code, 2);
  EXPECT_EQ(run(base + " --partial 0").code, 2);
}

TEST_F(Cli, InfoOnDefaultModel) {
  const CliRun r = run("info --topology ntu25");
  ASSERT_EQ(r.code, 0) << r.out;
  const json j = stdout_json(r.out);
  EXPECT_NEAR(j["total_params"].get<double>(), 2.8e6, 0.25 * 2.8e6);
  EXPECT_EQ(j["streams"].size(), 3u);
}

TEST_F(Cli, GradcheckModuleAndUsageErrors) {
  const CliRun r = run("gradcheck --module samg --seeds 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("3/3 cases passed"), std::string::npos);
  EXPECT_EQ(run("gradcheck --module nonsense").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train --out " + path("x")).code, 2);
}

TEST_F(Cli, AblateWritesTable) {
  const CliRun r = run("ablate --config " + path("tiny.json") + " --set train.epochs=1 --no-streams --out " +
                    path("abl.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream in(path("abl.csv"));
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, "config,params,top1");
  int rows = 0;
  while (std::getline(in, row)) ++rows;
  EXPECT_EQ(rows, 5);  // disjoint + four modalities
  EXPECT_TRUE(fs::exists(path("abl.csv.config.json")));
}

// ---- RunConfig without the binary

TEST_F(Cli, RunConfigOverridesAndStrictKeys) {
  const json base = read_json(path("tiny.json"));
  const RunConfig rc = run_config_from_json(base, dir_, {"train.epochs=7", "model.seed=3"});
  EXPECT_EQ(rc.train.epochs, 7);
  EXPECT_EQ(rc.model.seed, 3u);
  EXPECT_TRUE(fs::equivalent(rc.manifest, dir_ / "data" / "manifest.json"));
  EXPECT_NE(rc.hash(), run_config_from_json(base, dir_).hash());
  EXPECT_EQ(run_config_from_json(base, dir_).hash(), run_config_from_json(base, dir_).hash());

  EXPECT_THROW(run_config_from_json(base, dir_, {"train.learning_rate=1"}), ConfigError);
  EXPECT_THROW(run_config_from_json(base, dir_, {"extra=1"}), ConfigError);
  EXPECT_THROW(run_config_from_json(base, dir_, {"version=2"}), ConfigError);
  EXPECT_THROW(run_config_from_json(base, dir_, {"data.pad=mirror"}), ConfigError);
  EXPECT_THROW(run_config_from_json(base, dir_, {"noequals"}), ConfigError);
  json no_version = base;
  no_version.erase("version");
  EXPECT_THROW(run_config_from_json(no_version, dir_), ConfigError);
}

TEST_F(Cli, ShortModelFormExpandsDefaults) {
  json j = {{"version", 1},
            {"data", {{"manifest", "data/manifest.json"}}},
            {"model", {{"streams", {"body", "legs"}}, {"modalities", "joint,bone"}, {"window", 20}}}};
  const RunConfig rc = run_config_from_json(j, dir_);
  ASSERT_EQ(rc.model.streams.size(), 2u);
  EXPECT_EQ(rc.model.streams[1].part, Part::kLegs);
  EXPECT_EQ(rc.model.streams[0].num_classes, 3);
  EXPECT_EQ(rc.model.streams[0].in_channels(), 6);
  EXPECT_EQ(rc.model.fusion_weights, (std::vector<double>{1.0, 0.5}));
  // The expanded form round-trips to the same effective config.
  const RunConfig again = run_config_from_json(rc.to_json(), dir_);
  EXPECT_EQ(again.to_json(), rc.to_json());

  j["model"]["num_classes"] = 5;
  EXPECT_THROW(run_config_from_json(j, dir_), ConfigError);
  j["model"].erase("num_classes");
  j["model"]["topology"] = "ntux67";
  EXPECT_THROW(run_config_from_json(j, dir_), ConfigError);
}

TEST(NumberList, ParsesAndRejects) {
  EXPECT_EQ(parse_number_list("1,0.5,0"), (std::vector<double>{1, 0.5, 0}));
  for (const char* bad : {"", "1,", ",1", "a", "1;2", "1,,2", "nan"}) {
    EXPECT_THROW(parse_number_list(bad), ConfigError) << bad;
  }
}

}  // namespace
}  // namespace psumnet

#include "psumnet/dataset.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "psumnet/errors.hpp"
#include "psumnet/synth.hpp"

namespace psumnet {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("psumnet_test_" + std::to_string(std::random_device{}()) + "_" +
             std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_raw(const fs::path& p, const std::string& header, const std::vector<float>& values) {
  std::ofstream out(p, std::ios::binary);
  out << header << '\n';
  out.write(reinterpret_cast<const char*>(values.data()), values.size() * 4);
}

float at(const ActionSequence& s, int c, int t, int n, int m) {
  return s.coords.data()[((c * s.frames() + t) * s.joints() + n) * s.persons() + m];
}

TEST(Skj, MinimalCustomTopology) {
  TempDir dir;
  const SkeletonTopology tri{"tri", {0, 0, 1}};
  write_raw(dir.path() / "a.skj", R"({"skj":1,"topology":"tri","T":1,"N":3,"M":1,"label":2})",
            {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto s = load_sequence(dir.path() / "a.skj", tri);
  EXPECT_EQ(s.coords.shape(), (Shape{3, 1, 3, 1}));
  EXPECT_EQ(s.label, 2);
  EXPECT_EQ(at(s, 0, 0, 1, 0), 4.0f);
  EXPECT_EQ(at(s, 2, 0, 2, 0), 9.0f);
}

TEST(Skj, RejectsBadFiles) {
  TempDir dir;
  const auto& ntu = builtin_topology("ntu25");
  write_raw(dir.path() / "short.skj", R"({"skj":1,"topology":"ntu25","T":1,"N":24,"M":1,"label":0})",
            std::vector<float>(72, 0.f));
  EXPECT_THROW(load_sequence(dir.path() / "short.skj", ntu), LoadError);
  write_raw(dir.path() / "bad.skj", R"({"skj":1,"topology":"ntu25","T":1,)", {});
  EXPECT_THROW(load_sequence(dir.path() / "bad.skj", ntu), LoadError);
  std::vector<float> v(75, 0.f);
  v[10] = std::nanf("");
  write_raw(dir.path() / "nan.skj", R"({"skj":1,"topology":"ntu25","T":1,"N":25,"M":1,"label":0})", v);
  try {
    load_sequence(dir.path() / "nan.skj", ntu);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("joint 3"), std::string::npos) << e.what();
  }
  write_raw(dir.path() / "trunc.skj", R"({"skj":1,"topology":"ntu25","T":2,"N":25,"M":1,"label":0})",
            std::vector<float>(75, 0.f));
  EXPECT_THROW(load_sequence(dir.path() / "trunc.skj", ntu), LoadError);
  try {
    write_raw(dir.path() / "nolabel.skj", R"({"skj":1,"topology":"ntu25","T":1,"N":25,"M":1})", v);
    load_sequence(dir.path() / "nolabel.skj", ntu);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("'label'"), std::string::npos);
  }
}

TEST(Skj, RoundTripIsLossless) {
  TempDir dir;
  SynthSpec spec;
  auto s = synth_sequence(spec, 3, 1);
  s.coords.data()[7] = 1.0f / 3.0f;
  save_sequence(dir.path() / "x.skj", s);
  const auto r = load_sequence(dir.path() / "x.skj", builtin_topology("ntu25"));
  ASSERT_EQ(r.coords.shape(), s.coords.shape());
  EXPECT_EQ(r.label, 3);
  for (std::int64_t i = 0; i < s.coords.numel(); ++i) ASSERT_EQ(r.coords.data()[i], s.coords.data()[i]);
}

TEST(Skj, PersonsAreZeroPadded) {
  TempDir dir;
  const SkeletonTopology two{"two", {0, 0}};
  write_raw(dir.path() / "p.skj", R"({"skj":1,"topology":"two","T":2,"N":2,"M":1,"label":0})",
            {1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4});
  const auto s = load_sequence(dir.path() / "p.skj", two, 2);
  EXPECT_EQ(s.persons(), 2);
  EXPECT_TRUE(s.person_present(0));
  EXPECT_FALSE(s.person_present(1));
  EXPECT_EQ(at(s, 1, 1, 1, 0), 4.0f);
}

TEST(Manifest, LoadValidatesEntries) {
  TempDir dir;
  SynthSpec spec{.classes = 3, .train_per_class = 2, .val_per_class = 1, .frames = 8};
  synth_dataset(spec, dir.path());
  const auto m = load_manifest(dir.path() / "manifest.json");
  EXPECT_EQ(m.num_classes(), 3);
  EXPECT_EQ(m.topology, "ntu25");
  EXPECT_EQ(m.entries.size(), 9u);
  EXPECT_EQ(m.split_indices("val").size(), 3u);
  EXPECT_EQ(m.class_categories[1], "leg");

  std::ofstream(dir.path() / "bad.json") << R"([{"path":"missing.skj","label":0,"split":"train"}])";
  try {
    load_manifest(dir.path() / "bad.json");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.skj"), std::string::npos);
  }
  std::ofstream(dir.path() / "label.json") << R"([{"path":"c000_s0000.skj","label":9,"split":"train"}])";
  EXPECT_THROW(load_manifest(dir.path() / "label.json"), LoadError);
}

TEST(Manifest, StratifiedCarveOut) {
  DatasetManifest m;
  m.class_names = {"a", "b"};
  for (int i = 0; i < 20; ++i) m.entries.push_back({"x", i % 2, "train"});
  const auto s = train_val_split(m, 0.2, 7);
  EXPECT_EQ(s.val.size(), 4u);
  EXPECT_EQ(s.train.size(), 16u);
  int class0 = 0;
  for (auto i : s.val) class0 += m.entries[i].label == 0;
  EXPECT_EQ(class0, 2);
  const auto again = train_val_split(m, 0.2, 7);
  EXPECT_EQ(again.val, s.val);
}

TEST(Normalize, RemovesTranslationAndWindows) {
  const SkeletonTopology chain{"chain", {0, 0}};
  std::vector<float> v(3 * 10 * 2);
  for (int c = 0; c < 3; ++c)
    for (int t = 0; t < 10; ++t)
      for (int n = 0; n < 2; ++n) v[(c * 10 + t) * 2 + n] = 5.0f + c + t + 0.5f * n;
  ActionSequence s{Tensor<float>(Shape{3, 10, 2, 1}, v), 0, "chain"};
  const auto w = normalize_sequence(s, chain, 64);
  EXPECT_EQ(w.frames(), 64);
  for (int t = 0; t < 64; ++t) {
    const int src = t % 10;
    for (int c = 0; c < 3; ++c) {
      EXPECT_FLOAT_EQ(at(w, c, t, 0, 0), float(src));
      EXPECT_FLOAT_EQ(at(w, c, t, 1, 0), float(src) + 0.5f);
    }
  }
  const auto z = normalize_sequence(s, chain, 12, PadMode::kZero);
  EXPECT_EQ(at(z, 0, 11, 1, 0), 0.0f);
  const auto sub = normalize_sequence(s, chain, 4);
  EXPECT_FLOAT_EQ(at(sub, 0, 3, 0, 0), 7.0f);  // frame floor(3*10/4) = 7
  EXPECT_EQ(window_source_frame(5, 10, 10, PadMode::kLoop), 5);

  // Already centred and already W frames: unchanged.
  const auto again = normalize_sequence(w, chain, 64);
  for (std::int64_t i = 0; i < w.coords.numel(); ++i) ASSERT_EQ(again.coords.data()[i], w.coords.data()[i]);
}

TEST(Normalize, AbsentPersonStaysZero) {
  const SkeletonTopology one{"one", {0}};
  ActionSequence s{Tensor<float>(Shape{3, 2, 1, 2}, {1, 0, 2, 0, 3, 0, 4, 0, 5, 0, 6, 0}), 0, "one"};
  const auto n = normalize_sequence(s, one, 2);
  EXPECT_FALSE(n.person_present(1));
  EXPECT_FLOAT_EQ(at(n, 0, 1, 0, 0), 1.0f);
}

TEST(Truncate, CeilFractionAndMinimumLength) {
  SynthSpec spec{.frames = 10};
  const auto s = synth_sequence(spec, 0, 0);
  EXPECT_EQ(truncate_sequence(s, 0.25).frames(), 3);
  EXPECT_EQ(truncate_sequence(s, 1.0).frames(), 10);
  EXPECT_THROW(truncate_sequence(s, 0.1), ConfigError);
  EXPECT_THROW(truncate_sequence(s, 0.0), ConfigError);
}

TEST(Factorize, GroupSizesAndGlobalRegistration) {
  SynthSpec spec;
  const auto s = synth_sequence(spec, 2, 0);
  const auto ntu = default_part_spec("ntu25");
  const auto parts = factorize_parts(s, ntu);
  EXPECT_EQ(parts[0]->joints(), 25);
  EXPECT_EQ(parts[1]->joints(), 13);
  EXPECT_EQ(parts[2]->joints(), 9);
  // Throat (20) is body joint 20 and hands joint 0; hip (0) is body 0 and legs 0.
  for (int c = 0; c < 3; ++c)
    for (int t = 0; t < 32; ++t) {
      ASSERT_EQ(at(*parts[0], c, t, 20, 0), at(*parts[1], c, t, 0, 0));
      ASSERT_EQ(at(*parts[0], c, t, 0, 0), at(*parts[2], c, t, 0, 0));
      ASSERT_EQ(at(*parts[0], c, t, 0, 0), at(s, c, t, 0, 0));
    }
  SynthSpec x{.topology = "ntux67"};
  const auto px = factorize_parts(synth_sequence(x, 0, 0), default_part_spec("ntux67"));
  EXPECT_EQ(px[0]->joints(), 37);
  EXPECT_EQ(px[1]->joints(), 48);
  EXPECT_EQ(px[2]->joints(), 13);
  const auto ps = factorize_parts(synth_sequence({.topology = "shrec22"}, 0, 0),
                                  default_part_spec("shrec22"));
  EXPECT_FALSE(ps[0].has_value());
  EXPECT_EQ(ps[1]->joints(), 22);
  EXPECT_THROW(select_joints(s, {0, 40}), DimensionError);
}

TEST(Factorize, SharedJointsAgreeAcrossAnyTwoGroups) {
  for (const char* topo : {"ntu25", "ntux67"}) {
    const auto spec = default_part_spec(topo);
    const auto s = synth_sequence({.topology = topo}, 4, 2);
    const auto parts = factorize_parts(s, spec);
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b) {
        const auto& ga = spec.group(static_cast<Part>(a));
        const auto& gb = spec.group(static_cast<Part>(b));
        for (std::size_t i = 0; i < ga.size(); ++i)
          for (std::size_t k = 0; k < gb.size(); ++k) {
            if (ga[i] != gb[k]) continue;
            for (int c = 0; c < 3; ++c)
              for (int t = 0; t < s.frames(); ++t)
                ASSERT_EQ(at(*parts[a], c, t, i, 0), at(*parts[b], c, t, k, 0));
          }
      }
  }
}

TEST(LocalFrame, ComponentRootsBecomeOrigin) {
  const auto& topo = builtin_topology("ntu25");
  const auto d = disjoint_part_spec("ntu25");
  const auto g = part_subgraph(topo, d.hands, true);
  const auto s = select_joints(synth_sequence({}, 0, 0), d.hands);
  const auto l = to_local_frame(s, g);
  for (int r : g.roots)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(at(l, c, 5, r, 0), 0.0f);
  EXPECT_FLOAT_EQ(at(l, 1, 5, 1, 0), at(s, 1, 5, 1, 0) - at(s, 1, 5, 0, 0));
}

TEST(Synth, DominanceByConstruction) {
  const auto& topo = builtin_topology("ntu25");
  const auto spec = default_part_spec("ntu25");
  SynthSpec sp;
  for (int label = 0; label < 8; ++label) {
    const std::string cat = synth_category("ntu25", label);
    if (cat == "whole") continue;
    const auto& still = cat == "hand" ? spec.legs : spec.hands;
    const auto& moving = cat == "hand" ? spec.hands : spec.legs;
    for (int i = 0; i < 4; ++i) {
      const auto s = synth_sequence(sp, label, i);
      auto variance = [&](const std::vector<int>& joints) {
        double worst = 0;
        for (int j : joints)
          for (int c = 0; c < 3; ++c) {
            double mean = 0, sq = 0;
            for (int t = 0; t < s.frames(); ++t) mean += at(s, c, t, j, 0);
            mean /= s.frames();
            for (int t = 0; t < s.frames(); ++t) sq += std::pow(at(s, c, t, j, 0) - mean, 2);
            worst = std::max(worst, sq / s.frames());
          }
        return worst;
      };
      EXPECT_LT(variance(still), 1e-8) << "label " << label;
      EXPECT_GT(variance(moving), 1e-3) << "label " << label;
    }
  }
  (void)topo;
}

TEST(Synth, DeterministicFilesAndTiming) {
  TempDir a, b;
  SynthSpec spec;
  const auto start = std::chrono::steady_clock::now();
  synth_dataset({.classes = 8, .train_per_class = 16, .val_per_class = 0, .frames = 32}, a.path());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(secs, 5.0);
  synth_dataset({.classes = 8, .train_per_class = 16, .val_per_class = 0, .frames = 32}, b.path());
  int files = 0;
  for (const auto& e : fs::directory_iterator(a.path())) {
    ASSERT_EQ(read_bytes(e.path()), read_bytes(b.path() / e.path().filename())) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 8 * 16 + 2);
  EXPECT_THROW(synth_dataset({.classes = 1}, a.path()), ConfigError);
}

}  // namespace
}  // namespace psumnet

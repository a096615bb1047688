#include "psumnet/synth.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "psumnet/errors.hpp"

namespace psumnet {

namespace fs = std::filesystem;

namespace {

using Vec3 = std::array<double, 3>;

enum class Kind { kLimbs, kBounce, kWholeRotation };

struct Primitive {
  std::string category;
  Kind kind = Kind::kLimbs;
  std::vector<int> pivots;  // limb roots; their descendants rotate about them
  int axis = 0;             // 0 = x (left-right), 1 = y (vertical), 2 = z (front-back)
  bool alternate = false;   // second limb runs half a period behind
};

std::vector<Vec3> rest_pose(const std::string& topology) {
  if (topology == "ntu25") {
    std::vector<Vec3> p(25);
    p[0] = {0, 0, 0};
    p[1] = {0, 0.25, 0};
    p[20] = {0, 0.5, 0};
    p[2] = {0, 0.6, 0};
    p[3] = {0, 0.72, 0};
    for (int side = 0; side < 2; ++side) {
      const double s = side == 0 ? 1.0 : -1.0;
      const int sh = side == 0 ? 4 : 8;
      p[sh] = {0.18 * s, 0.48, 0};
      p[sh + 1] = {0.22 * s, 0.22, 0};
      p[sh + 2] = {0.24 * s, 0.0, 0};
      p[sh + 3] = {0.25 * s, -0.07, 0};
      const int tip = side == 0 ? 21 : 23;
      p[tip] = {0.26 * s, -0.14, 0};
      p[tip + 1] = {0.22 * s, -0.08, 0.03};
      const int hip = side == 0 ? 12 : 16;
      p[hip] = {0.1 * s, -0.02, 0};
      p[hip + 1] = {0.11 * s, -0.45, 0};
      p[hip + 2] = {0.12 * s, -0.85, 0};
      p[hip + 3] = {0.12 * s, -0.9, 0.1};
    }
    return p;
  }
  if (topology == "ntux67") {
    std::vector<Vec3> p(67);
    p[0] = {0, 0, 0};
    p[1] = {0, 0.5, 0};
    p[2] = {0, 0.65, 0.08};
    p[3] = {0.03, 0.68, 0.07};
    p[4] = {-0.03, 0.68, 0.07};
    p[5] = {0.07, 0.66, 0};
    p[6] = {-0.07, 0.66, 0};
    for (int side = 0; side < 2; ++side) {
      const double s = side == 0 ? 1.0 : -1.0;
      const int sh = side == 0 ? 7 : 10;
      p[sh] = {0.18 * s, 0.48, 0};
      p[sh + 1] = {0.22 * s, 0.22, 0};
      p[sh + 2] = {0.24 * s, 0.0, 0};
      const int hip = side == 0 ? 13 : 19;
      p[hip] = {0.1 * s, -0.02, 0};
      p[hip + 1] = {0.11 * s, -0.45, 0};
      p[hip + 2] = {0.12 * s, -0.85, 0};
      p[hip + 3] = {0.12 * s, -0.88, -0.04};
      p[hip + 4] = {0.1 * s, -0.9, 0.12};
      p[hip + 5] = {0.15 * s, -0.9, 0.1};
      const int root = side == 0 ? 25 : 46;
      p[root] = {0.245 * s, -0.01, 0};
      for (int f = 0; f < 5; ++f) {
        const double spread = (f - 2) * 0.35;
        for (int j = 0; j < 4; ++j) {
          const double r = 0.03 + 0.022 * j;
          p[root + 1 + 4 * f + j] = {p[root][0] + s * r * std::sin(spread) * 0.6,
                                     p[root][1] - r * std::cos(spread), 0.01 * f};
        }
      }
    }
    return p;
  }
  if (topology == "shrec22") {
    std::vector<Vec3> p(22);
    p[0] = {0, -0.04, 0};
    p[1] = {0, 0, 0};
    for (int f = 0; f < 5; ++f) {
      const double spread = (f - 2) * 0.3;
      for (int j = 0; j < 4; ++j) {
        const double r = 0.02 + 0.025 * j + (f == 0 ? 0.0 : 0.03);
        p[2 + 4 * f + j] = {r * std::sin(spread), r * std::cos(spread) - (f == 0 ? 0.03 : 0.0),
                            0.005 * j};
      }
    }
    return p;
  }
  throw ConfigError("no synthetic rest pose for topology '" + topology + "'");
}

std::vector<Primitive> primitives(const std::string& topology) {
  if (topology == "ntu25" || topology == "ntux67") {
    const bool x = topology == "ntux67";
    const int ls = x ? 7 : 4, rs = x ? 10 : 8, lh = x ? 13 : 12, rh = x ? 19 : 16;
    return {
        {"hand", Kind::kLimbs, {rs}, 2, false},       {"leg", Kind::kLimbs, {rh}, 0, false},
        {"whole", Kind::kBounce, {}, 1, false},       {"hand", Kind::kLimbs, {ls}, 2, false},
        {"leg", Kind::kLimbs, {lh}, 0, false},        {"whole", Kind::kWholeRotation, {}, 0, false},
        {"hand", Kind::kLimbs, {ls, rs}, 0, true},    {"leg", Kind::kLimbs, {lh, rh}, 0, true},
        {"whole", Kind::kWholeRotation, {}, 1, false}, {"hand", Kind::kLimbs, {ls, rs}, 2, false},
        {"leg", Kind::kLimbs, {rh}, 2, false},         {"whole", Kind::kWholeRotation, {}, 2, false},
    };
  }
  if (topology == "shrec22") {
    std::vector<Primitive> p;
    for (int f = 0; f < 5; ++f) p.push_back({"hand", Kind::kLimbs, {2 + 4 * f}, 0, false});
    p.push_back({"hand", Kind::kWholeRotation, {}, 2, false});
    p.push_back({"hand", Kind::kWholeRotation, {}, 1, false});
    return p;
  }
  throw ConfigError("no synthetic motions for topology '" + topology + "'");
}

// Primitive and frequency band of a class. Classes beyond the primitive list
// reuse it at higher frequencies.
std::pair<Primitive, int> class_motion(const std::string& topology, int label) {
  const auto list = primitives(topology);
  const int n = static_cast<int>(list.size());
  return {list[label % n], label / n};
}

Vec3 rotate(const Vec3& v, int axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  switch (axis) {
    case 0: return {v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]};
    case 1: return {c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]};
    default: return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
  }
}

std::vector<int> descendants(const SkeletonTopology& topo, int pivot) {
  std::vector<int> out;
  for (int j = 0; j < topo.num_joints(); ++j) {
    if (j == pivot) continue;
    for (int a = j; topo.parent[a] != a;) {
      a = topo.parent[a];
      if (a == pivot) {
        out.push_back(j);
        break;
      }
    }
  }
  return out;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

std::string synth_category(const std::string& topology, int label) {
  return class_motion(topology, label).first.category;
}

ActionSequence synth_sequence(const SynthSpec& spec, int label, int index) {
  const SkeletonTopology& topo = builtin_topology(spec.topology);
  if (spec.frames < 2) throw ConfigError("synthetic sequences need at least 2 frames");
  const auto [prim, band] = class_motion(spec.topology, label);
  std::mt19937_64 rng(mix(mix(mix(spec.seed) ^ static_cast<std::uint64_t>(label)) ^
                          static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 0.01);

  const int n = topo.num_joints();
  const int root = topo.root();
  const double size = 0.9 + 0.2 * u(rng);
  std::vector<Vec3> base = rest_pose(spec.topology);
  for (auto& p : base)
    for (double& c : p) c = c * size + jitter(rng);
  const double amplitude = 0.6 + 0.4 * u(rng);
  const double freq = (0.8 + 0.5 * u(rng)) * (1 + band);
  const double phase = 2.0 * std::numbers::pi * u(rng);
  const double yaw = 0.6 * (u(rng) - 0.5);
  const Vec3 offset = {u(rng) - 0.5, 0.2 * (u(rng) - 0.5), 2.0 + u(rng)};

  std::vector<std::vector<int>> moving;
  for (int pivot : prim.pivots) moving.push_back(descendants(topo, pivot));

  const std::int64_t t_len = spec.frames;
  std::vector<float> data(static_cast<std::size_t>(3 * t_len * n));
  for (std::int64_t t = 0; t < t_len; ++t) {
    const double w = 2.0 * std::numbers::pi * freq * static_cast<double>(t) /
                     static_cast<double>(t_len);
    std::vector<Vec3> pose = base;
    switch (prim.kind) {
      case Kind::kLimbs:
        for (std::size_t l = 0; l < prim.pivots.size(); ++l) {
          const double shift = prim.alternate && l == 1 ? std::numbers::pi : 0.0;
          const double angle = amplitude * std::sin(w + phase + shift);
          const Vec3& pivot = base[prim.pivots[l]];
          for (int j : moving[l]) {
            const Vec3 rel = {base[j][0] - pivot[0], base[j][1] - pivot[1], base[j][2] - pivot[2]};
            const Vec3 r = rotate(rel, prim.axis, angle);
            pose[j] = {pivot[0] + r[0], pivot[1] + r[1], pivot[2] + r[2]};
          }
        }
        break;
      case Kind::kBounce: {
        const double dy = 0.15 * amplitude * std::sin(w + phase);
        for (auto& p : pose) p[1] += dy;
        break;
      }
      case Kind::kWholeRotation: {
        const double angle = 0.6 * amplitude * std::sin(w + phase);
        const Vec3 c = base[root];
        for (auto& p : pose) {
          const Vec3 r = rotate({p[0] - c[0], p[1] - c[1], p[2] - c[2]}, prim.axis, angle);
          p = {c[0] + r[0], c[1] + r[1], c[2] + r[2]};
        }
        break;
      }
    }
    for (int j = 0; j < n; ++j) {
      const Vec3 g = rotate(pose[j], 1, yaw);
      for (int c = 0; c < 3; ++c) {
        data[(c * t_len + t) * n + j] = static_cast<float>(g[c] + offset[c]);
      }
    }
  }
  ActionSequence seq;
  seq.coords = Tensor<float>(Shape{3, t_len, n, 1}, std::move(data));
  seq.label = label;
  seq.topology = spec.topology;
  return seq;
}

DatasetManifest synth_dataset(const SynthSpec& spec, const fs::path& dir) {
  if (spec.classes < 2) {
    throw ConfigError("synthetic dataset needs at least 2 classes, got " +
                      std::to_string(spec.classes));
  }
  if (spec.train_per_class < 1 || spec.val_per_class < 0) {
    throw ConfigError("synthetic dataset needs >= 1 training sample per class");
  }
  fs::create_directories(dir);
  DatasetManifest m;
  m.file = dir / "manifest.json";
  m.topology = spec.topology;
  for (int k = 0; k < spec.classes; ++k) {
    const std::string cat = synth_category(spec.topology, k);
    m.class_names.push_back(cat + std::to_string(k));
    m.class_categories.push_back(cat);
    for (int i = 0; i < spec.train_per_class + spec.val_per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "c%03d_s%04d.skj", k, i);
      save_sequence(dir / name, synth_sequence(spec, k, i));
      m.entries.push_back({name, k, i < spec.train_per_class ? "train" : "val"});
    }
  }
  save_manifest(m);
  return m;
}

}  // namespace psumnet

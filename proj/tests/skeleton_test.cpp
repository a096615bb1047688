#include "psumnet/skeleton.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <functional>
#include <set>

#include "psumnet/errors.hpp"

namespace psumnet {
namespace {

// Cyclic Jacobi rotations; returns the eigenvalues of a symmetric matrix.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, int n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-22) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (int i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

// Adjacency straight from the formula, one entry at a time.
double adjacency_entry(const std::vector<int>& parent, int i, int j) {
  const int n = static_cast<int>(parent.size());
  auto linked = [&](int a, int b) { return a == b || parent[a] == b || parent[b] == a; };
  auto degree = [&](int a) {
    int d = 0;
    for (int b = 0; b < n; ++b) d += linked(a, b);
    return d;
  };
  return linked(i, j) ? 1.0 / std::sqrt(double(degree(i)) * degree(j)) : 0.0;
}

TEST(Topology, BuiltinsAreTreesOfTheRightSize) {
  EXPECT_EQ(builtin_topology("ntu25").num_joints(), 25);
  EXPECT_EQ(builtin_topology("ntux67").num_joints(), 67);
  EXPECT_EQ(builtin_topology("shrec22").num_joints(), 22);
  for (const char* name : {"ntu25", "ntux67", "shrec22"}) {
    const auto& t = builtin_topology(name);
    EXPECT_NO_THROW(t.validate()) << name;
    EXPECT_EQ(t.edges().size(), static_cast<std::size_t>(t.num_joints() - 1));
  }
  EXPECT_EQ(builtin_topology("ntu25").root(), 0);
  EXPECT_EQ(builtin_topology("shrec22").root(), 1);
  EXPECT_THROW(builtin_topology("kinect"), ConfigError);
}

TEST(Topology, ValidateRejectsCyclesAndForests) {
  EXPECT_THROW((SkeletonTopology{"c", {1, 2, 0}}.validate()), ConfigError);
  EXPECT_THROW((SkeletonTopology{"f", {0, 1, 1}}.validate()), ConfigError);
  EXPECT_THROW((SkeletonTopology{"r", {0, 5}}.validate()), ConfigError);
  EXPECT_THROW((SkeletonTopology{"loop", {0, 2, 1}}.validate()), ConfigError);
}

TEST(PartGroups, CountsAnchorsAndConnectivity) {
  const auto ntu = default_part_spec("ntu25");
  EXPECT_EQ(ntu.body.size(), 25u);
  EXPECT_EQ(ntu.hands.size(), 13u);
  EXPECT_EQ(ntu.legs.size(), 9u);
  const auto x = default_part_spec("ntux67");
  EXPECT_EQ(x.body.size(), 37u);
  EXPECT_EQ(x.hands.size(), 48u);
  EXPECT_EQ(x.legs.size(), 13u);
  const auto shrec = default_part_spec("shrec22");
  EXPECT_TRUE(shrec.body.empty());
  EXPECT_TRUE(shrec.legs.empty());
  EXPECT_EQ(shrec.hands.size(), 22u);
  for (const char* name : {"ntu25", "ntux67", "shrec22"}) {
    const auto& topo = builtin_topology(name);
    const auto spec = default_part_spec(name);
    EXPECT_NO_THROW(validate_part_spec(topo, spec)) << name;
    for (Part p : kAllParts) {
      const auto& g = spec.group(p);
      if (g.empty()) continue;
      EXPECT_EQ(part_subgraph(topo, g).roots.size(), 1u) << name << " " << part_name(p);
      EXPECT_EQ(std::set<int>(g.begin(), g.end()).size(), g.size());
    }
  }
  // Anchors: throat = spine shoulder in ntu25, neck in ntux67; hip = spine base / mid-hip.
  EXPECT_EQ(ntu.throat_anchor, 20);
  EXPECT_EQ(ntu.hip_anchor, 0);
  EXPECT_EQ(part_subgraph(builtin_topology("ntu25"), ntu.hands).joints[part_subgraph(builtin_topology("ntu25"), ntu.hands).roots[0]], 20);
}

TEST(PartGroups, DisjointGroupsPartitionNtu25) {
  const auto d = disjoint_part_spec("ntu25");
  std::multiset<int> all;
  for (Part p : kAllParts) all.insert(d.group(p).begin(), d.group(p).end());
  EXPECT_EQ(all.size(), 25u);
  EXPECT_EQ(std::set<int>(all.begin(), all.end()).size(), 25u);
  const auto& topo = builtin_topology("ntu25");
  EXPECT_NO_THROW(validate_part_spec(topo, d));
  EXPECT_EQ(part_subgraph(topo, d.hands, true).roots.size(), 2u);
  EXPECT_THROW(part_subgraph(topo, d.hands), ConfigError);
  EXPECT_THROW(disjoint_part_spec("ntux67"), ConfigError);
}

TEST(PartGroups, BadSpecsAreRejected) {
  const auto& topo = builtin_topology("ntu25");
  EXPECT_THROW(part_subgraph(topo, {0, 25}), ConfigError);
  EXPECT_THROW(part_subgraph(topo, {0, 0}), ConfigError);
  EXPECT_THROW(part_subgraph(topo, {5, 17}), ConfigError);  // arm + leg: two trees
  auto spec = default_part_spec("ntu25");
  spec.throat_anchor = 3;
  EXPECT_THROW(validate_part_spec(topo, spec), ConfigError);
}

TEST(PartGroups, SkippedJointsAreContracted) {
  // ntux67 body keeps fingertips but not the joints between tip and hand root.
  const auto& topo = builtin_topology("ntux67");
  const auto spec = default_part_spec("ntux67");
  const auto g = part_subgraph(topo, spec.body);
  const auto local = [&](int j) {
    return static_cast<int>(std::find(g.joints.begin(), g.joints.end(), j) - g.joints.begin());
  };
  EXPECT_EQ(g.parent[local(29)], local(25));
}

TEST(Adjacency, ChainHandValues) {
  const auto a = build_adjacency<double>({0, 0, 1});
  auto d = a.data();
  EXPECT_NEAR(d[0], 0.5, 1e-15);
  EXPECT_NEAR(d[1], 1 / std::sqrt(6.0), 1e-15);
  EXPECT_NEAR(d[4], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(d[2], 0.0);
  const auto one = build_adjacency<double>({0});
  EXPECT_EQ(one.data()[0], 1.0);
}

TEST(Adjacency, MatchesFormulaOnAllSmallTrees) {
  // Every parent array over up to 6 joints with root 0 and parent[i] < i.
  int trees = 0;
  for (int n = 1; n <= 6; ++n) {
    std::vector<int> parent(n, 0);
    std::function<void(int)> rec = [&](int i) {
      if (i == n) {
        const auto a = build_adjacency<double>(parent);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < n; ++c)
            ASSERT_NEAR(a.data()[r * n + c], adjacency_entry(parent, r, c), 1e-15);
        ++trees;
        return;
      }
      for (int p = 0; p < i; ++p) {
        parent[i] = p;
        rec(i + 1);
      }
    };
    rec(1);
  }
  EXPECT_EQ(trees, 1 + 1 + 2 + 6 + 24 + 120);
}

TEST(Adjacency, SymmetricWithSpectrumInUnitInterval) {
  for (const char* name : {"ntu25", "ntux67", "shrec22"}) {
    const auto& topo = builtin_topology(name);
    const auto spec = default_part_spec(name);
    std::vector<std::vector<int>> parents{topo.parent};
    for (Part p : kAllParts)
      if (!spec.group(p).empty()) parents.push_back(part_subgraph(topo, spec.group(p)).parent);
    for (const auto& parent : parents) {
      const int n = static_cast<int>(parent.size());
      const auto a = build_adjacency<double>(parent);
      std::vector<double> m(a.data().begin(), a.data().end());
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) ASSERT_EQ(m[i * n + j], m[j * n + i]);
      for (double ev : symmetric_eigenvalues(m, n)) {
        EXPECT_LE(ev, 1.0 + 1e-9) << name;
        EXPECT_GE(ev, -1.0 - 1e-9) << name;
      }
    }
  }
}

}  // namespace
}  // namespace psumnet

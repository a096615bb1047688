#include "psumnet/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "psumnet/errors.hpp"

namespace psumnet {

int SkeletonTopology::root() const {
  for (int i = 0; i < num_joints(); ++i) {
    if (parent[i] == i) return i;
  }
  throw ConfigError("topology " + name + " has no root");
}

std::vector<std::pair<int, int>> SkeletonTopology::edges() const {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < num_joints(); ++i) {
    if (parent[i] != i) e.emplace_back(i, parent[i]);
  }
  return e;
}

void SkeletonTopology::validate() const {
  const int n = num_joints();
  if (n == 0) throw ConfigError("topology " + name + " has no joints");
  int roots = 0;
  for (int i = 0; i < n; ++i) {
    if (parent[i] < 0 || parent[i] >= n) {
      throw ConfigError("topology " + name + ": parent of joint " + std::to_string(i) +
                        " out of range");
    }
    if (parent[i] == i) ++roots;
  }
  if (roots != 1) {
    throw ConfigError("topology " + name + " must have exactly one root, found " +
                      std::to_string(roots));
  }
  // With one fixed point, every walk reaches the root within n steps unless it cycles.
  for (int i = 0; i < n; ++i) {
    int j = i;
    for (int steps = 0; parent[j] != j; ++steps) {
      if (steps > n) throw ConfigError("topology " + name + " contains a cycle");
      j = parent[j];
    }
  }
}

namespace {

SkeletonTopology make_ntu25() {
  // Kinect v2 joint order. Root is the spine base (0); 20 is the spine
  // shoulder, used as the throat anchor.
  return {"ntu25", {0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0,
                    12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11}};
}

SkeletonTopology make_ntux67() {
  // 25 body joints followed by two 21-joint hands (hand root, then four
  // joints per finger from thumb to little finger).
  std::vector<int> p = {0, 0, 1, 2, 2, 3, 4,      // mid-hip, neck, nose, eyes, ears
                        1, 7, 8, 1, 10, 11,       // left arm, right arm
                        0, 13, 14, 15, 15, 17,    // left leg and foot
                        0, 19, 20, 21, 21, 23};   // right leg and foot
  for (int side = 0; side < 2; ++side) {
    const int wrist = side == 0 ? 9 : 12;
    const int hand_root = static_cast<int>(p.size());
    p.push_back(wrist);
    for (int f = 0; f < 5; ++f) {
      for (int j = 0; j < 4; ++j) p.push_back(j == 0 ? hand_root : static_cast<int>(p.size()) - 1);
    }
  }
  return {"ntux67", p};
}

SkeletonTopology make_shrec22() {
  // 0 wrist, 1 palm (root), then four joints per finger, thumb first.
  std::vector<int> p = {1, 1};
  for (int f = 0; f < 5; ++f) {
    for (int j = 0; j < 4; ++j) {
      const int self = static_cast<int>(p.size());
      p.push_back(j > 0 ? self - 1 : (f == 0 ? 0 : 1));
    }
  }
  return {"shrec22", p};
}

}  // namespace

const SkeletonTopology& builtin_topology(const std::string& name) {
  static const std::map<std::string, SkeletonTopology> table = {
      {"ntu25", make_ntu25()}, {"ntux67", make_ntux67()}, {"shrec22", make_shrec22()}};
  const auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown topology '" + name + "'");
  return it->second;
}

bool is_builtin_topology(const std::string& name) {
  return name == "ntu25" || name == "ntux67" || name == "shrec22";
}

const char* part_name(Part part) {
  switch (part) {
    case Part::kBody: return "body";
    case Part::kHands: return "hands";
    case Part::kLegs: return "legs";
  }
  return "?";
}

Part parse_part(const std::string& name) {
  if (name == "body") return Part::kBody;
  if (name == "hands") return Part::kHands;
  if (name == "legs") return Part::kLegs;
  throw ConfigError("unknown part '" + name + "' (expected body, hands or legs)");
}

const std::vector<int>& PartGroupSpec::group(Part part) const {
  switch (part) {
    case Part::kBody: return body;
    case Part::kHands: return hands;
    case Part::kLegs: return legs;
  }
  return body;
}

PartGroupSpec default_part_spec(const std::string& topology) {
  PartGroupSpec s;
  if (topology == "ntu25") {
    s.body.resize(25);
    std::iota(s.body.begin(), s.body.end(), 0);
    s.hands = {20, 4, 5, 6, 7, 21, 22, 8, 9, 10, 11, 23, 24};
    s.legs = {0, 12, 13, 14, 15, 16, 17, 18, 19};
    s.throat_anchor = 20;
    s.hip_anchor = 0;
  } else if (topology == "ntux67") {
    for (int j = 0; j < 25; ++j) s.body.push_back(j);
    for (int hand_root : {25, 46}) {
      s.body.push_back(hand_root);
      for (int f = 0; f < 5; ++f) s.body.push_back(hand_root + 4 * f + 4);  // finger tips
    }
    // Hand root joints sit on the wrists, so the body wrists are left out.
    s.hands = {1, 2, 7, 8, 10, 11};
    for (int j = 25; j < 67; ++j) s.hands.push_back(j);
    s.legs = {0};
    for (int j = 13; j < 25; ++j) s.legs.push_back(j);
    s.throat_anchor = 1;
    s.hip_anchor = 0;
  } else if (topology == "shrec22") {
    s.hands.resize(22);
    std::iota(s.hands.begin(), s.hands.end(), 0);
    s.throat_anchor = 1;
  } else {
    throw ConfigError("no default part groups for topology '" + topology + "'");
  }
  return s;
}

PartGroupSpec disjoint_part_spec(const std::string& topology) {
  if (topology != "ntu25") {
    throw ConfigError("disjoint part groups are only defined for ntu25, not '" + topology + "'");
  }
  PartGroupSpec s;
  s.body = {0, 1, 20, 2, 3, 4, 8, 12, 16};
  s.hands = {5, 6, 7, 21, 22, 9, 10, 11, 23, 24};
  s.legs = {13, 14, 15, 17, 18, 19};
  s.disjoint = true;
  return s;
}

PartSubgraph part_subgraph(const SkeletonTopology& topo, const std::vector<int>& joints,
                           bool allow_forest) {
  const int n = topo.num_joints();
  std::vector<int> local(n, -1);
  for (std::size_t k = 0; k < joints.size(); ++k) {
    const int j = joints[k];
    if (j < 0 || j >= n) {
      throw ConfigError("part group index " + std::to_string(j) + " out of range for " +
                        topo.name);
    }
    if (local[j] >= 0) {
      throw ConfigError("part group lists joint " + std::to_string(j) + " twice");
    }
    local[j] = static_cast<int>(k);
  }
  PartSubgraph g;
  g.joints = joints;
  g.parent.resize(joints.size());
  for (std::size_t k = 0; k < joints.size(); ++k) {
    int a = joints[k];
    int found = -1;
    while (topo.parent[a] != a) {
      a = topo.parent[a];
      if (local[a] >= 0) {
        found = local[a];
        break;
      }
    }
    g.parent[k] = found >= 0 ? found : static_cast<int>(k);
    if (found < 0) g.roots.push_back(static_cast<int>(k));
  }
  if (!allow_forest && g.roots.size() > 1) {
    throw ConfigError("part group over " + topo.name + " is disconnected (" +
                      std::to_string(g.roots.size()) + " components)");
  }
  return g;
}

void validate_part_spec(const SkeletonTopology& topo, const PartGroupSpec& spec) {
  for (Part part : kAllParts) {
    const auto& group = spec.group(part);
    if (!group.empty()) part_subgraph(topo, group, spec.disjoint);
  }
  if (spec.disjoint) return;
  auto contains = [](const std::vector<int>& v, int j) {
    return std::find(v.begin(), v.end(), j) != v.end();
  };
  if (!spec.hands.empty() && !contains(spec.hands, spec.throat_anchor)) {
    throw ConfigError("throat anchor " + std::to_string(spec.throat_anchor) +
                      " is not in the hands group");
  }
  if (!spec.legs.empty() && !contains(spec.legs, spec.hip_anchor)) {
    throw ConfigError("hip anchor " + std::to_string(spec.hip_anchor) +
                      " is not in the legs group");
  }
}

template <typename T>
Tensor<T> build_adjacency(const std::vector<int>& parent) {
  const int n = static_cast<int>(parent.size());
  if (n == 0) throw ConfigError("build_adjacency: empty graph");
  std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    const int p = parent[i];
    if (p < 0 || p >= n) throw ConfigError("build_adjacency: parent index out of range");
    a[i * n + i] = 1.0;
    if (p != i) a[i * n + p] = a[p * n + i] = 1.0;
  }
  std::vector<double> inv_sqrt_deg(n);
  for (int i = 0; i < n; ++i) {
    double d = 0.0;
    for (int j = 0; j < n; ++j) d += a[i * n + j];
    inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
  }
  std::vector<T> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out[i * n + j] = static_cast<T>(inv_sqrt_deg[i] * a[i * n + j] * inv_sqrt_deg[j]);
  return Tensor<T>(Shape{n, n}, std::move(out));
}

template Tensor<float> build_adjacency<float>(const std::vector<int>&);
template Tensor<double> build_adjacency<double>(const std::vector<int>&);

}  // namespace psumnet

#pragma once

// Skeleton topologies, part groups and the normalized adjacency built on them.

#include <string>
#include <utility>
#include <vector>

#include "psumnet/tensor.hpp"

namespace psumnet {

/// A joint tree given by parent links; parent[root] == root.
struct SkeletonTopology {
  std::string name;
  std::vector<int> parent;

  int num_joints() const { return static_cast<int>(parent.size()); }
  int root() const;
  /// Undirected (child, parent) pairs, one per non-root joint.
  std::vector<std::pair<int, int>> edges() const;
  /// Throws ConfigError unless `parent` is a single tree.
  void validate() const;
};

/// "ntu25", "ntux67" or "shrec22". Throws ConfigError for other names.
const SkeletonTopology& builtin_topology(const std::string& name);
bool is_builtin_topology(const std::string& name);

enum class Part { kBody = 0, kHands = 1, kLegs = 2 };
inline constexpr Part kAllParts[] = {Part::kBody, Part::kHands, Part::kLegs};
const char* part_name(Part part);
/// "body" | "hands" | "legs"; throws ConfigError otherwise.
Part parse_part(const std::string& name);

/// Joint index lists into the full topology. Groups overlap at their anchors
/// and need not cover every joint. An empty group means "no such stream".
struct PartGroupSpec {
  std::vector<int> body;
  std::vector<int> hands;
  std::vector<int> legs;
  int throat_anchor = -1;  ///< member of `hands`; -1 when hands is empty
  int hip_anchor = -1;     ///< member of `legs`; -1 when legs is empty
  /// Non-overlapping groups whose parts may be forests (ablation only).
  bool disjoint = false;

  const std::vector<int>& group(Part part) const;
};

/// Globally registered groups used by the default model.
///   ntu25:  body 25, hands 13 (throat 20), legs 9 (hip 0)
///   ntux67: body 37, hands 48 (throat 1), legs 13 (hip 0)
///   shrec22: hands 22 (palm 1), body and legs empty
PartGroupSpec default_part_spec(const std::string& topology);
/// Non-overlapping locally rooted groups for the disjoint-parts ablation
/// (ntu25 only): body 9 torso/head/limb-root joints, hands 10 (two arm
/// trees below the shoulders), legs 6 (two leg trees below the hips).
PartGroupSpec disjoint_part_spec(const std::string& topology);

/// A group's joints as a tree (or forest) of its own. Parents are the nearest
/// ancestor inside the group, so skipped joints (e.g. intermediate finger
/// joints of the ntux67 body group) are contracted away.
struct PartSubgraph {
  std::vector<int> joints;  ///< global indices, in group order
  std::vector<int> parent;  ///< local indices; parent[r] == r for roots
  std::vector<int> roots;   ///< local indices
};

/// Throws ConfigError on out-of-range or duplicate indices, and when the
/// group splits into several trees unless `allow_forest`.
PartSubgraph part_subgraph(const SkeletonTopology& topo, const std::vector<int>& joints,
                           bool allow_forest = false);

/// Checks counts-independent invariants of a spec against its topology:
/// valid indices, anchors inside their groups, connected groups.
void validate_part_spec(const SkeletonTopology& topo, const PartGroupSpec& spec);

/// D^{-1/2} (A + I) D^{-1/2} over the tree edges given by `parent`
/// (parent[i] == i marks a root). Returns [N, N].
template <typename T>
Tensor<T> build_adjacency(const std::vector<int>& parent);

}  // namespace psumnet

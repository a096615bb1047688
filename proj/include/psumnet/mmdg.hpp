#pragma once

// Multi-modality input: joints, bones, and their frame-to-frame velocities,
// stacked along channels. Inputs are [C, T, N, M] or batched [B, C, T, N, M].

#include <string>
#include <vector>

#include "psumnet/tensor.hpp"

namespace psumnet {

struct ModalitySelection {
  bool joint = true;
  bool bone = true;
  bool joint_vel = true;
  bool bone_vel = true;

  int count() const { return joint + bone + joint_vel + bone_vel; }
  /// Parses "joint,bone,joint_vel,bone_vel" (any non-empty subset).
  static ModalitySelection parse(const std::string& list);
  std::string str() const;
};

/// out[..., i, :] = x[..., i, :] - x[..., parent[i], :] along the joint axis;
/// the root (parent[r] == r) gets a zero bone.
template <typename T>
Tensor<T> compute_bone(const Tensor<T>& x, const std::vector<int>& parent);

/// out[:, t] = x[:, t+1] - x[:, t] for t < T-1, zero at t = T-1.
/// Throws ConfigError when T < 2.
template <typename T>
Tensor<T> compute_velocity(const Tensor<T>& x);

/// [joint, bone, joint_vel, bone_vel] restricted to `sel`, concatenated on
/// the channel axis. Bone velocity differences consecutive bones.
template <typename T>
Tensor<T> assemble(const Tensor<T>& x, const std::vector<int>& parent,
                   const ModalitySelection& sel);

/// [B, C, T, N, M] -> [B*M, C, T, N], person-major within each sample.
template <typename T>
Tensor<T> fold_persons(const Tensor<T>& x);

}  // namespace psumnet

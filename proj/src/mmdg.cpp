#include "psumnet/mmdg.hpp"

#include <sstream>

#include "psumnet/errors.hpp"
#include "psumnet/ops.hpp"

namespace psumnet {

namespace {

void require_layout(const Shape& s, const char* op) {
  if (s.rank() != 4 && s.rank() != 5) {
    throw DimensionError(std::string(op) + ": expected [C,T,N,M] or [B,C,T,N,M], got " + s.str());
  }
}

}  // namespace

ModalitySelection ModalitySelection::parse(const std::string& list) {
  ModalitySelection s{false, false, false, false};
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item == "joint") s.joint = true;
    else if (item == "bone") s.bone = true;
    else if (item == "joint_vel") s.joint_vel = true;
    else if (item == "bone_vel") s.bone_vel = true;
    else throw ConfigError("unknown modality '" + item + "'");
  }
  if (s.count() == 0) throw ConfigError("modality selection is empty");
  return s;
}

std::string ModalitySelection::str() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ",";
    s += name;
  };
  add(joint, "joint");
  add(bone, "bone");
  add(joint_vel, "joint_vel");
  add(bone_vel, "bone_vel");
  return s;
}

template <typename T>
Tensor<T> compute_bone(const Tensor<T>& x, const std::vector<int>& parent) {
  require_layout(x.shape(), "compute_bone");
  const auto r = x.rank();
  const std::int64_t n = x.dim(r - 2), m = x.dim(r - 1);
  if (static_cast<std::int64_t>(parent.size()) != n) {
    throw DimensionError("compute_bone: " + std::to_string(parent.size()) +
                         " parent links for " + std::to_string(n) + " joints");
  }
  for (int p : parent) {
    if (p < 0 || p >= n) throw DimensionError("compute_bone: parent index out of range");
  }
  const std::int64_t planes = x.numel() / (n * m);
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto d = x.data();
  for (std::int64_t pl = 0; pl < planes; ++pl)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t k = 0; k < m; ++k)
        o[(pl * n + i) * m + k] = d[(pl * n + i) * m + k] - d[(pl * n + parent[i]) * m + k];
  out.attach_backward({x}, [x, parent, planes, n, m](std::span<const T> g) {
    auto gx = x.mutable_grad();
    for (std::int64_t pl = 0; pl < planes; ++pl)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < m; ++k) {
          const T v = g[(pl * n + i) * m + k];
          gx[(pl * n + i) * m + k] += v;
          gx[(pl * n + parent[i]) * m + k] -= v;
        }
  });
  return out;
}

template <typename T>
Tensor<T> compute_velocity(const Tensor<T>& x) {
  require_layout(x.shape(), "compute_velocity");
  const auto r = x.rank();
  const std::int64_t t = x.dim(r - 3), nm = x.dim(r - 2) * x.dim(r - 1);
  if (t < 2) throw ConfigError("compute_velocity: needs at least 2 frames, got " + std::to_string(t));
  const std::int64_t planes = x.numel() / (t * nm);
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto d = x.data();
  for (std::int64_t pl = 0; pl < planes; ++pl)
    for (std::int64_t f = 0; f + 1 < t; ++f)
      for (std::int64_t j = 0; j < nm; ++j)
        o[(pl * t + f) * nm + j] = d[(pl * t + f + 1) * nm + j] - d[(pl * t + f) * nm + j];
  out.attach_backward({x}, [x, planes, t, nm](std::span<const T> g) {
    auto gx = x.mutable_grad();
    for (std::int64_t pl = 0; pl < planes; ++pl)
      for (std::int64_t f = 0; f + 1 < t; ++f)
        for (std::int64_t j = 0; j < nm; ++j) {
          const T v = g[(pl * t + f) * nm + j];
          gx[(pl * t + f + 1) * nm + j] += v;
          gx[(pl * t + f) * nm + j] -= v;
        }
  });
  return out;
}

template <typename T>
Tensor<T> assemble(const Tensor<T>& x, const std::vector<int>& parent,
                   const ModalitySelection& sel) {
  require_layout(x.shape(), "assemble");
  if (sel.count() == 0) throw ConfigError("assemble: modality selection is empty");
  std::vector<Tensor<T>> parts;
  Tensor<T> bone;
  if (sel.bone || sel.bone_vel) bone = compute_bone(x, parent);
  if (sel.joint) parts.push_back(x);
  if (sel.bone) parts.push_back(bone);
  if (sel.joint_vel) parts.push_back(compute_velocity(x));
  if (sel.bone_vel) parts.push_back(compute_velocity(bone));
  if (parts.size() == 1) return parts.front();
  return concat(parts, static_cast<int>(x.rank()) - 4);
}

template <typename T>
Tensor<T> fold_persons(const Tensor<T>& x) {
  if (x.rank() != 5) throw DimensionError("fold_persons: expected [B,C,T,N,M], got " + x.shape().str());
  const int order[] = {0, 4, 1, 2, 3};
  Tensor<T> p = permute(x, order);
  return reshape(p, Shape{x.dim(0) * x.dim(4), x.dim(1), x.dim(2), x.dim(3)});
}

#define PSUMNET_INSTANTIATE_MMDG(T)                                                    \
  template Tensor<T> compute_bone(const Tensor<T>&, const std::vector<int>&);          \
  template Tensor<T> compute_velocity(const Tensor<T>&);                               \
  template Tensor<T> assemble(const Tensor<T>&, const std::vector<int>&,               \
                              const ModalitySelection&);                               \
  template Tensor<T> fold_persons(const Tensor<T>&);

PSUMNET_INSTANTIATE_MMDG(float)
PSUMNET_INSTANTIATE_MMDG(double)

}  // namespace psumnet

#pragma once

// Spatio-temporal relational blocks: a spatial attention map generator
// (SAMG) that mixes joints through A_hyb = alpha * M(x) + A, followed by a
// multi-branch dilated temporal module (TRM) and a residual connection.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "psumnet/tensor.hpp"

namespace psumnet {

/// Callback over a module's named tensors. `trainable` is false for
/// batch-norm running statistics.
template <typename T>
using TensorVisitor = std::function<void(const std::string& name, Tensor<T>& t, bool trainable)>;

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void visit(const std::string& prefix, const TensorVisitor<T>& fn);

  Tensor<T> weight, bias, running_mean, running_var;
};

/// How the pooled joint difference is squashed before channel expansion.
enum class SigmaMode { kTanh, kConv };
/// One N x N map per output channel, or a single map shared by all channels.
enum class AttentionMode { kChannelwise, kShared };

struct SamgOptions {
  SigmaMode sigma = SigmaMode::kTanh;
  AttentionMode attention = AttentionMode::kChannelwise;
};

/// Width of the reduced embedding used for the attention map.
std::int64_t reduced_channels(std::int64_t in_channels);

template <typename T>
class Samg {
 public:
  Samg() = default;
  Samg(std::int64_t in_channels, std::int64_t out_channels, Tensor<T> adjacency,
       SamgOptions opts, std::mt19937_64& rng);

  /// M: [B, Cout, N, N] (channel-wise) or [B, 1, N, N] (shared).
  Tensor<T> attention(const Tensor<T>& x) const;
  /// out[b,c,t,i] = sum_j (alpha * M[b,c,i,j] + A[i,j]) * theta(x)[b,c,t,j]
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn);

  std::int64_t in_channels = 0, out_channels = 0, reduced = 0;
  SamgOptions opts;
  Tensor<T> theta, phi, psi, sigma, expand, alpha;
  Tensor<T> adjacency;  ///< fixed normalized A, [N, N]; not trained
};

struct TrmBranchSpec {
  enum class Kind { kConv, kMaxPool, kPointwise };
  Kind kind = Kind::kPointwise;
  std::int64_t kernel = 1;
  std::int64_t dilation = 1;
};

/// (kt=5, d=1), (kt=5, d=2), max-pool over 3 frames, pointwise.
std::vector<TrmBranchSpec> default_trm_branches();

template <typename T>
class Trm {
 public:
  Trm() = default;
  Trm(std::int64_t channels_in, std::int64_t channels_out, std::int64_t stride,
      std::vector<TrmBranchSpec> branches, std::mt19937_64& rng);

  /// Throws ConfigError when T is shorter than the largest padded reach.
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void visit(const std::string& prefix, const TensorVisitor<T>& fn);
  /// Frames needed by the widest dilated kernel: d * (kt - 1) / 2 + 1.
  std::int64_t min_frames() const;

  struct Branch {
    TrmBranchSpec spec;
    std::int64_t channels = 0;
    Tensor<T> reduce;  ///< [Cb, Cin, 1, 1]
    BatchNorm2d<T> reduce_bn;
    Tensor<T> temporal;  ///< [Cb, Cb, kt, 1] for conv branches
    BatchNorm2d<T> out_bn;
  };
  std::int64_t stride = 1;
  std::vector<Branch> branches;
};

struct StrbConfig {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t stride = 1;
  SamgOptions samg;
  std::vector<TrmBranchSpec> trm = default_trm_branches();
};

template <typename T>
class Strb {
 public:
  Strb() = default;
  Strb(const StrbConfig& cfg, Tensor<T> adjacency, std::mt19937_64& rng);

  /// ReLU( TRM( ReLU(BN(SAMG(x))) ) + residual(x) )
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void visit(const std::string& prefix, const TensorVisitor<T>& fn);
  bool has_projection() const { return residual.defined(); }

  StrbConfig cfg;
  Samg<T> samg;
  BatchNorm2d<T> samg_bn;
  Trm<T> trm;
  Tensor<T> residual;  ///< [Cout, Cin, 1, 1] when Cin != Cout or stride != 1
  BatchNorm2d<T> residual_bn;
};

/// Blocks applied in order.
template <typename T>
Tensor<T> strm_forward(const Tensor<T>& x, std::vector<Strb<T>>& blocks, bool training);

/// Kaiming-normal draw scaled by fan-out = shape[0] * prod(shape[2:]).
template <typename T>
Tensor<T> kaiming_fan_out(Shape shape, std::mt19937_64& rng);

}  // namespace psumnet

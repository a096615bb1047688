#pragma once

// Differentiable tensor operations. Activation layout is [B, C, T, N]
// (batch, channels, frames, joints) unless an op says otherwise.

#include <cstdint>
#include <span>
#include <vector>

#include "psumnet/tensor.hpp"

namespace psumnet {

// Elementwise arithmetic with trailing-axis (numpy-style) broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);

/// Batched matrix product over the last two axes; leading axes broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::span<const int> order);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

struct Conv2dOptions {
  std::int64_t stride_t = 1;
  std::int64_t dilation_t = 1;
  std::int64_t pad_t = 0;
};

/// Cross-correlation of x[B,Cin,T,N] with w[Cout,Cin,kt,kn]; no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dOptions opts = {});

/// Per-position channel mixing: x[B,Cin,H,W], w[Cout,Cin] -> [B,Cout,H,W].
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w);

/// Mean over the frame axis: [B,C,T,N] -> [B,C,N].
template <typename T>
Tensor<T> temporal_pool(const Tensor<T>& x);

/// Mean over frames and joints: [B,C,T,N] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Max over `kernel` frames with stride and symmetric padding; [B,C,T,N].
template <typename T>
Tensor<T> temporal_max_pool(const Tensor<T>& x, std::int64_t kernel, std::int64_t stride,
                            std::int64_t pad);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Per-channel normalization over every axis but 1. In training mode batch
/// statistics are used and the running estimates are updated in place.
template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                        T momentum = T(0.1), T eps = T(1e-5));

/// Mean negative log-likelihood of `labels` under softmax(logits[B,K]).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// x[B,Cin] -> x W^T + bias, with w[Cout,Cin] and bias[Cout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Rows of x[G*M, K] averaged within each group of M with fixed weights[G,M]:
/// out[g] = sum_m weights[g,m] x[g*M+m] / sum_m weights[g,m].
template <typename T>
Tensor<T> weighted_group_mean(const Tensor<T>& x, std::span<const T> weights,
                              std::int64_t group_size);

}  // namespace psumnet

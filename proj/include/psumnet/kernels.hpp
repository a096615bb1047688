#pragma once

// Raw compute kernels over contiguous row-major buffers.
//
// Every kernel comes in two flavours: the default OpenMP-parallel version used
// by the tensor ops, and a serial naive version in `kernels::reference` that is
// kept for testing and benchmarking. Parallel versions split work over
// disjoint output regions only, so results do not depend on the thread count.

#include <cstdint>

namespace psumnet::kernels {

enum class Trans { kNo, kYes };

/// C = alpha * op(A) * op(B) + beta * C, where op(A) is m x k and op(B) is k x n.
template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

/// Geometry of a 2D cross-correlation over [B, Cin, T, N] inputs. The second
/// spatial axis (joints) is never padded or strided.
struct ConvGeometry {
  std::int64_t batch = 1;
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t in_t = 1;
  std::int64_t in_n = 1;
  std::int64_t kernel_t = 1;
  std::int64_t kernel_n = 1;
  std::int64_t stride_t = 1;
  std::int64_t dilation_t = 1;
  std::int64_t pad_t = 0;

  std::int64_t out_t() const;
  std::int64_t out_n() const;
  bool is_pointwise() const;
  /// Throws ConfigError when the output would be empty or a field is nonpositive.
  void validate() const;
};

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y);
/// dx += conv2d^T(dy)
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);
/// dw += sum over batch of dy (x) x
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw);

/// Max over a temporal window of `kernel` frames; padded frames never win.
/// `argmax` receives the flat input index of each output's maximum.
struct PoolGeometry {
  std::int64_t batch = 1;
  std::int64_t channels = 1;
  std::int64_t in_t = 1;
  std::int64_t in_n = 1;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t pad = 0;

  std::int64_t out_t() const;
  void validate() const;
};

template <typename T>
void temporal_max_pool_forward(const PoolGeometry& g, const T* x, T* y, std::int64_t* argmax);

namespace reference {

template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw);

template <typename T>
void temporal_max_pool_forward(const PoolGeometry& g, const T* x, T* y, std::int64_t* argmax);

}  // namespace reference

/// Number of OpenMP threads the kernels will use (1 without OpenMP).
int max_threads();
void set_num_threads(int n);

}  // namespace psumnet::kernels

#include "psumnet/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "psumnet/errors.hpp"

namespace psumnet::kernels {

namespace {

// Register tile of the GEMM micro-kernel: MR rows by NR columns of C.
template <typename T>
struct Tile;
template <>
struct Tile<float> {
  static constexpr int kMr = 8;
  static constexpr int kNr = 32;
};
template <>
struct Tile<double> {
  static constexpr int kMr = 8;
  static constexpr int kNr = 16;
};

constexpr std::int64_t kKc = 256;
constexpr std::int64_t kMc = 128;
constexpr std::int64_t kNc = 2048;
constexpr std::int64_t kSmallGemm = 16 * 1024;

template <typename T>
inline T elem(const T* p, std::int64_t ld, Trans t, std::int64_t r, std::int64_t c) {
  return t == Trans::kNo ? p[r * ld + c] : p[c * ld + r];
}

template <typename T, int MR, int NR>
inline void micro_kernel(std::int64_t kc, const T* __restrict a, const T* __restrict b, T alpha,
                         T* __restrict c, std::int64_t ldc, std::int64_t m, std::int64_t n) {
  T acc[MR][NR];
  for (int i = 0; i < MR; ++i) {
    for (int j = 0; j < NR; ++j) acc[i][j] = T(0);
  }
  for (std::int64_t p = 0; p < kc; ++p) {
#pragma GCC unroll 16
    for (int i = 0; i < MR; ++i) {
      const T ai = a[p * MR + i];
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[i][j] += ai * b[p * NR + j];
    }
  }
  if (m == MR && n == NR) {
    for (int i = 0; i < MR; ++i) {
#pragma omp simd
      for (int j = 0; j < NR; ++j) c[i * ldc + j] += alpha * acc[i][j];
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) c[i * ldc + j] += alpha * acc[i][j];
    }
  }
}

template <typename T>
void scale_c(std::int64_t m, std::int64_t n, T beta, T* c, std::int64_t ldc) {
  if (beta == T(1)) return;
  for (std::int64_t i = 0; i < m; ++i) {
    T* row = c + i * ldc;
    if (beta == T(0)) {
      std::fill(row, row + n, T(0));
    } else {
      for (std::int64_t j = 0; j < n; ++j) row[j] *= beta;
    }
  }
}

// Direct loops for tiny products where packing costs more than it saves.
template <typename T>
void gemm_small(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
                const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T* c,
                std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = alpha * elem(a, lda, ta, i, p);
      if (tb == Trans::kNo) {
        const T* brow = b + p * ldb;
#pragma omp simd
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * b[j * ldb + p];
      }
    }
  }
}

template <typename T>
void gemm_packed(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
                 const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T* c,
                 std::int64_t ldc) {
  constexpr int MR = Tile<T>::kMr;
  constexpr int NR = Tile<T>::kNr;
  std::vector<T> packed_b;
  for (std::int64_t jc = 0; jc < n; jc += kNc) {
    const std::int64_t nc = std::min(kNc, n - jc);
    const std::int64_t n_panels = (nc + NR - 1) / NR;
    for (std::int64_t pc = 0; pc < k; pc += kKc) {
      const std::int64_t kc = std::min(kKc, k - pc);
      packed_b.assign(static_cast<std::size_t>(n_panels * NR * kc), T(0));
#pragma omp parallel for schedule(static)
      for (std::int64_t jp = 0; jp < n_panels; ++jp) {
        T* dst = packed_b.data() + jp * NR * kc;
        const std::int64_t cols = std::min<std::int64_t>(NR, nc - jp * NR);
        for (std::int64_t p = 0; p < kc; ++p) {
          for (std::int64_t j = 0; j < cols; ++j) {
            dst[p * NR + j] = elem(b, ldb, tb, pc + p, jc + jp * NR + j);
          }
        }
      }
      const std::int64_t m_blocks = (m + kMc - 1) / kMc;
#pragma omp parallel
      {
        std::vector<T> packed_a(static_cast<std::size_t>(kMc * kc));
#pragma omp for schedule(static)
        for (std::int64_t ib = 0; ib < m_blocks; ++ib) {
          const std::int64_t ic = ib * kMc;
          const std::int64_t mc = std::min(kMc, m - ic);
          const std::int64_t m_panels = (mc + MR - 1) / MR;
          for (std::int64_t ip = 0; ip < m_panels; ++ip) {
            T* dst = packed_a.data() + ip * MR * kc;
            const std::int64_t rows = std::min<std::int64_t>(MR, mc - ip * MR);
            for (std::int64_t p = 0; p < kc; ++p) {
              for (std::int64_t i = 0; i < MR; ++i) {
                dst[p * MR + i] = i < rows ? elem(a, lda, ta, ic + ip * MR + i, pc + p) : T(0);
              }
            }
          }
          for (std::int64_t jp = 0; jp < n_panels; ++jp) {
            const std::int64_t cols = std::min<std::int64_t>(NR, nc - jp * NR);
            for (std::int64_t ip = 0; ip < m_panels; ++ip) {
              const std::int64_t rows = std::min<std::int64_t>(MR, mc - ip * MR);
              micro_kernel<T, MR, NR>(kc, packed_a.data() + ip * MR * kc,
                                      packed_b.data() + jp * NR * kc, alpha,
                                      c + (ic + ip * MR) * ldc + jc + jp * NR, ldc, rows, cols);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::int64_t ot = g.out_t(), on = g.out_n();
  const std::int64_t p = ot * on;
  for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
    for (std::int64_t kt = 0; kt < g.kernel_t; ++kt) {
      for (std::int64_t kn = 0; kn < g.kernel_n; ++kn) {
        T* dst = col + ((ci * g.kernel_t + kt) * g.kernel_n + kn) * p;
        for (std::int64_t t = 0; t < ot; ++t) {
          const std::int64_t it = t * g.stride_t + kt * g.dilation_t - g.pad_t;
          T* row = dst + t * on;
          if (it < 0 || it >= g.in_t) {
            std::fill(row, row + on, T(0));
          } else {
            const T* src = x + (ci * g.in_t + it) * g.in_n + kn;
            std::copy(src, src + on, row);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::int64_t ot = g.out_t(), on = g.out_n();
  const std::int64_t p = ot * on;
  for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
    for (std::int64_t kt = 0; kt < g.kernel_t; ++kt) {
      for (std::int64_t kn = 0; kn < g.kernel_n; ++kn) {
        const T* src = col + ((ci * g.kernel_t + kt) * g.kernel_n + kn) * p;
        for (std::int64_t t = 0; t < ot; ++t) {
          const std::int64_t it = t * g.stride_t + kt * g.dilation_t - g.pad_t;
          if (it < 0 || it >= g.in_t) continue;
          T* dst = dx + (ci * g.in_t + it) * g.in_n + kn;
          const T* row = src + t * on;
          for (std::int64_t n = 0; n < on; ++n) dst[n] += row[n];
        }
      }
    }
  }
}

}  // namespace

std::int64_t ConvGeometry::out_t() const {
  return (in_t + 2 * pad_t - dilation_t * (kernel_t - 1) - 1) / stride_t + 1;
}

std::int64_t ConvGeometry::out_n() const { return in_n - kernel_n + 1; }

bool ConvGeometry::is_pointwise() const {
  return kernel_t == 1 && kernel_n == 1 && stride_t == 1 && pad_t == 0;
}

void ConvGeometry::validate() const {
  if (batch <= 0 || in_channels <= 0 || out_channels <= 0 || in_t <= 0 || in_n <= 0 ||
      kernel_t <= 0 || kernel_n <= 0 || stride_t <= 0 || dilation_t <= 0 || pad_t < 0) {
    throw ConfigError("conv2d: nonpositive extent, stride or dilation");
  }
  const std::int64_t span = in_t + 2 * pad_t - dilation_t * (kernel_t - 1) - 1;
  if (span < 0 || out_n() < 1) {
    throw ConfigError("conv2d: output extent would be nonpositive (T=" + std::to_string(in_t) +
                      ", kt=" + std::to_string(kernel_t) + ", dilation=" +
                      std::to_string(dilation_t) + ", pad=" + std::to_string(pad_t) +
                      ", N=" + std::to_string(in_n) + ", kn=" + std::to_string(kernel_n) + ")");
  }
}

std::int64_t PoolGeometry::out_t() const { return (in_t + 2 * pad - kernel) / stride + 1; }

void PoolGeometry::validate() const {
  if (batch <= 0 || channels <= 0 || in_t <= 0 || in_n <= 0 || kernel <= 0 || stride <= 0 ||
      pad < 0 || pad >= kernel) {
    throw ConfigError("temporal_max_pool: invalid geometry");
  }
  if (in_t + 2 * pad - kernel < 0) {
    throw ConfigError("temporal_max_pool: output extent would be nonpositive");
  }
}

template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  if (m <= 0 || n <= 0) return;
  scale_c(m, n, beta, c, ldc);
  if (k <= 0 || alpha == T(0)) return;
  if (m * n * k <= kSmallGemm) {
    gemm_small(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, c, ldc);
  } else {
    gemm_packed(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, c, ldc);
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  g.validate();
  const std::int64_t in_size = g.in_channels * g.in_t * g.in_n;
  const std::int64_t p = g.out_t() * g.out_n();
  const std::int64_t out_size = g.out_channels * p;
  const std::int64_t ckk = g.in_channels * g.kernel_t * g.kernel_n;
  if (g.is_pointwise()) {
#pragma omp parallel for schedule(static) if (g.batch > 1)
    for (std::int64_t b = 0; b < g.batch; ++b) {
      gemm(Trans::kNo, Trans::kNo, g.out_channels, p, g.in_channels, T(1), w, g.in_channels,
           x + b * in_size, p, T(0), y + b * out_size, p);
    }
    return;
  }
#pragma omp parallel if (g.batch > 1)
  {
    std::vector<T> col(static_cast<std::size_t>(ckk * p));
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < g.batch; ++b) {
      im2col(g, x + b * in_size, col.data());
      gemm(Trans::kNo, Trans::kNo, g.out_channels, p, ckk, T(1), w, ckk, col.data(), p, T(0),
           y + b * out_size, p);
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  g.validate();
  const std::int64_t in_size = g.in_channels * g.in_t * g.in_n;
  const std::int64_t p = g.out_t() * g.out_n();
  const std::int64_t out_size = g.out_channels * p;
  const std::int64_t ckk = g.in_channels * g.kernel_t * g.kernel_n;
  if (g.is_pointwise()) {
#pragma omp parallel for schedule(static) if (g.batch > 1)
    for (std::int64_t b = 0; b < g.batch; ++b) {
      gemm(Trans::kYes, Trans::kNo, g.in_channels, p, g.out_channels, T(1), w, g.in_channels,
           dy + b * out_size, p, T(1), dx + b * in_size, p);
    }
    return;
  }
#pragma omp parallel if (g.batch > 1)
  {
    std::vector<T> col(static_cast<std::size_t>(ckk * p));
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < g.batch; ++b) {
      gemm(Trans::kYes, Trans::kNo, ckk, p, g.out_channels, T(1), w, ckk, dy + b * out_size, p,
           T(0), col.data(), p);
      col2im_add(g, col.data(), dx + b * in_size);
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw) {
  g.validate();
  const std::int64_t in_size = g.in_channels * g.in_t * g.in_n;
  const std::int64_t p = g.out_t() * g.out_n();
  const std::int64_t out_size = g.out_channels * p;
  const std::int64_t ckk = g.in_channels * g.kernel_t * g.kernel_n;
  // Serial over the batch so the reduction order is fixed; the GEMM itself is parallel.
  if (g.is_pointwise()) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      gemm(Trans::kNo, Trans::kYes, g.out_channels, g.in_channels, p, T(1), dy + b * out_size, p,
           x + b * in_size, p, T(1), dw, g.in_channels);
    }
    return;
  }
  std::vector<T> col(static_cast<std::size_t>(ckk * p));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    im2col(g, x + b * in_size, col.data());
    gemm(Trans::kNo, Trans::kYes, g.out_channels, ckk, p, T(1), dy + b * out_size, p, col.data(),
         p, T(1), dw, ckk);
  }
}

template <typename T>
void temporal_max_pool_forward(const PoolGeometry& g, const T* x, T* y, std::int64_t* argmax) {
  g.validate();
  const std::int64_t ot = g.out_t();
  const std::int64_t planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const std::int64_t in_base = pl * g.in_t * g.in_n;
    const std::int64_t out_base = pl * ot * g.in_n;
    for (std::int64_t t = 0; t < ot; ++t) {
      for (std::int64_t n = 0; n < g.in_n; ++n) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = -1;
        for (std::int64_t k = 0; k < g.kernel; ++k) {
          const std::int64_t it = t * g.stride + k - g.pad;
          if (it < 0 || it >= g.in_t) continue;
          const std::int64_t idx = in_base + it * g.in_n + n;
          if (best_idx < 0 || x[idx] > best) {
            best = x[idx];
            best_idx = idx;
          }
        }
        y[out_base + t * g.in_n + n] = best;
        argmax[out_base + t * g.in_n + n] = best_idx;
      }
    }
  }
}

namespace reference {

template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T sum = T(0);
      for (std::int64_t p = 0; p < k; ++p) {
        sum += elem(a, lda, trans_a, i, p) * elem(b, ldb, trans_b, p, j);
      }
      c[i * ldc + j] = alpha * sum + (beta == T(0) ? T(0) : beta * c[i * ldc + j]);
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  g.validate();
  const std::int64_t ot = g.out_t(), on = g.out_n();
  for (std::int64_t b = 0; b < g.batch; ++b)
    for (std::int64_t co = 0; co < g.out_channels; ++co)
      for (std::int64_t t = 0; t < ot; ++t)
        for (std::int64_t n = 0; n < on; ++n) {
          T sum = T(0);
          for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
            for (std::int64_t kt = 0; kt < g.kernel_t; ++kt) {
              const std::int64_t it = t * g.stride_t + kt * g.dilation_t - g.pad_t;
              if (it < 0 || it >= g.in_t) continue;
              for (std::int64_t kn = 0; kn < g.kernel_n; ++kn) {
                sum += w[((co * g.in_channels + ci) * g.kernel_t + kt) * g.kernel_n + kn] *
                       x[((b * g.in_channels + ci) * g.in_t + it) * g.in_n + n + kn];
              }
            }
          y[((b * g.out_channels + co) * ot + t) * on + n] = sum;
        }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  g.validate();
  const std::int64_t ot = g.out_t(), on = g.out_n();
  for (std::int64_t b = 0; b < g.batch; ++b)
    for (std::int64_t co = 0; co < g.out_channels; ++co)
      for (std::int64_t t = 0; t < ot; ++t)
        for (std::int64_t n = 0; n < on; ++n) {
          const T gy = dy[((b * g.out_channels + co) * ot + t) * on + n];
          for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
            for (std::int64_t kt = 0; kt < g.kernel_t; ++kt) {
              const std::int64_t it = t * g.stride_t + kt * g.dilation_t - g.pad_t;
              if (it < 0 || it >= g.in_t) continue;
              for (std::int64_t kn = 0; kn < g.kernel_n; ++kn) {
                dx[((b * g.in_channels + ci) * g.in_t + it) * g.in_n + n + kn] +=
                    gy * w[((co * g.in_channels + ci) * g.kernel_t + kt) * g.kernel_n + kn];
              }
            }
        }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw) {
  g.validate();
  const std::int64_t ot = g.out_t(), on = g.out_n();
  for (std::int64_t b = 0; b < g.batch; ++b)
    for (std::int64_t co = 0; co < g.out_channels; ++co)
      for (std::int64_t t = 0; t < ot; ++t)
        for (std::int64_t n = 0; n < on; ++n) {
          const T gy = dy[((b * g.out_channels + co) * ot + t) * on + n];
          for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
            for (std::int64_t kt = 0; kt < g.kernel_t; ++kt) {
              const std::int64_t it = t * g.stride_t + kt * g.dilation_t - g.pad_t;
              if (it < 0 || it >= g.in_t) continue;
              for (std::int64_t kn = 0; kn < g.kernel_n; ++kn) {
                dw[((co * g.in_channels + ci) * g.kernel_t + kt) * g.kernel_n + kn] +=
                    gy * x[((b * g.in_channels + ci) * g.in_t + it) * g.in_n + n + kn];
              }
            }
        }
}

template <typename T>
void temporal_max_pool_forward(const PoolGeometry& g, const T* x, T* y, std::int64_t* argmax) {
  g.validate();
  const std::int64_t ot = g.out_t();
  for (std::int64_t pl = 0; pl < g.batch * g.channels; ++pl)
    for (std::int64_t t = 0; t < ot; ++t)
      for (std::int64_t n = 0; n < g.in_n; ++n) {
        std::int64_t best = -1;
        for (std::int64_t k = 0; k < g.kernel; ++k) {
          const std::int64_t it = t * g.stride + k - g.pad;
          if (it < 0 || it >= g.in_t) continue;
          const std::int64_t idx = (pl * g.in_t + it) * g.in_n + n;
          if (best < 0 || x[idx] > x[best]) best = idx;
        }
        y[(pl * ot + t) * g.in_n + n] = x[best];
        argmax[(pl * ot + t) * g.in_n + n] = best;
      }
}

}  // namespace reference

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

#define PSUMNET_INSTANTIATE_KERNELS(T)                                                        \
  template void gemm<T>(Trans, Trans, std::int64_t, std::int64_t, std::int64_t, T, const T*,  \
                        std::int64_t, const T*, std::int64_t, T, T*, std::int64_t);           \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, T*);               \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);        \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*);       \
  template void temporal_max_pool_forward<T>(const PoolGeometry&, const T*, T*,               \
                                             std::int64_t*);                                  \
  namespace reference {                                                                       \
  template void gemm<T>(Trans, Trans, std::int64_t, std::int64_t, std::int64_t, T, const T*,  \
                        std::int64_t, const T*, std::int64_t, T, T*, std::int64_t);           \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, T*);               \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);        \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*);       \
  template void temporal_max_pool_forward<T>(const PoolGeometry&, const T*, T*,               \
                                             std::int64_t*);                                  \
  }

PSUMNET_INSTANTIATE_KERNELS(float)
PSUMNET_INSTANTIATE_KERNELS(double)

#undef PSUMNET_INSTANTIATE_KERNELS

}  // namespace psumnet::kernels

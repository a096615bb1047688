#include "psumnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "psumnet/errors.hpp"
#include "psumnet/kernels.hpp"

namespace psumnet {

namespace {

using kernels::Trans;

std::vector<std::int64_t> row_major_strides(const std::vector<std::int64_t>& dims) {
  std::vector<std::int64_t> s(dims.size(), 1);
  for (int i = static_cast<int>(dims.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * dims[i + 1];
  return s;
}

// Maps each output element of a broadcast binary op to its two input offsets.
struct BroadcastPlan {
  std::vector<std::int64_t> out_dims;
  std::vector<std::int64_t> a_strides;
  std::vector<std::int64_t> b_strides;

  BroadcastPlan(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b,
                const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    out_dims.assign(r, 1);
    a_strides.assign(r, 0);
    b_strides.assign(r, 0);
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    for (std::size_t i = 0; i < r; ++i) {
      const std::int64_t ia = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - a.size());
      const std::int64_t ib = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - b.size());
      const std::int64_t da = ia >= 0 ? a[ia] : 1;
      const std::int64_t db = ib >= 0 ? b[ib] : 1;
      if (da != db && da != 1 && db != 1) {
        throw DimensionError(std::string(op) + ": cannot broadcast " + Shape(a).str() + " with " +
                             Shape(b).str());
      }
      out_dims[i] = std::max(da, db);
      if (ia >= 0 && da != 1) a_strides[i] = sa[ia];
      if (ib >= 0 && db != 1) b_strides[i] = sb[ib];
    }
  }

  std::int64_t numel() const {
    return std::accumulate(out_dims.begin(), out_dims.end(), std::int64_t{1},
                           std::multiplies<>());
  }

  template <typename F>
  void for_each(F&& f) const {
    const std::size_t r = out_dims.size();
    if (r == 0) {
      f(0, 0, 0);
      return;
    }
    const std::int64_t inner = out_dims[r - 1];
    const std::int64_t sa = a_strides[r - 1], sb = b_strides[r - 1];
    const std::int64_t outer = numel() / inner;
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t j = 0; j < inner; ++j) f(o * inner + j, ia + j * sa, ib + j * sb);
      for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
        ++idx[ax];
        ia += a_strides[ax];
        ib += b_strides[ax];
        if (idx[ax] < out_dims[ax]) break;
        ia -= a_strides[ax] * out_dims[ax];
        ib -= b_strides[ax] * out_dims[ax];
        idx[ax] = 0;
      }
    }
  }
};

template <typename T>
Tensor<T> finish(Tensor<T> out, const char* op) {
  check_finite(out, op);
  return out;
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + s.str());
  }
}

// Double-precision reductions over float runs, split across 8 fixed lanes so
// the loop vectorizes while the summation order stays the same on every run.
constexpr int kLanes = 8;

template <typename T, typename F>
double lane_reduce(std::int64_t n, F term) {
  double acc[kLanes] = {};
  std::int64_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (int l = 0; l < kLanes; ++l) acc[l] += term(i + l);
  }
  for (; i < n; ++i) acc[i % kLanes] += term(i);
  double total = 0.0;
  for (double a : acc) total += a;
  return total;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  BroadcastPlan plan(a.shape().dims(), b.shape().dims(), op);
  Tensor<T> out(Shape(plan.out_dims));
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  if (a.shape() == b.shape()) {
    const std::int64_t n = out.numel();
    switch (kind) {
      case BinaryKind::kAdd:
        for (std::int64_t i = 0; i < n; ++i) o[i] = ad[i] + bd[i];
        break;
      case BinaryKind::kSub:
        for (std::int64_t i = 0; i < n; ++i) o[i] = ad[i] - bd[i];
        break;
      case BinaryKind::kMul:
        for (std::int64_t i = 0; i < n; ++i) o[i] = ad[i] * bd[i];
        break;
    }
  } else {
    plan.for_each([&](std::int64_t oi, std::int64_t ia, std::int64_t ib) {
      switch (kind) {
        case BinaryKind::kAdd: o[oi] = ad[ia] + bd[ib]; break;
        case BinaryKind::kSub: o[oi] = ad[ia] - bd[ib]; break;
        case BinaryKind::kMul: o[oi] = ad[ia] * bd[ib]; break;
      }
    });
  }
  out.attach_backward({a, b}, [a, b, plan, kind](std::span<const T> g) mutable {
    const bool ga_on = a.requires_grad(), gb_on = b.requires_grad();
    std::span<T> ga = ga_on ? a.mutable_grad() : std::span<T>{};
    std::span<T> gb = gb_on ? b.mutable_grad() : std::span<T>{};
    auto ad = a.data();
    auto bd = b.data();
    if (a.shape() == b.shape()) {
      const auto n = static_cast<std::int64_t>(g.size());
      T* __restrict pa = ga.data();
      T* __restrict pb = gb.data();
      const T* __restrict pg = g.data();
      const T* __restrict xa = ad.data();
      const T* __restrict xb = bd.data();
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga_on) for (std::int64_t i = 0; i < n; ++i) pa[i] += pg[i];
          if (gb_on) for (std::int64_t i = 0; i < n; ++i) pb[i] += pg[i];
          break;
        case BinaryKind::kSub:
          if (ga_on) for (std::int64_t i = 0; i < n; ++i) pa[i] += pg[i];
          if (gb_on) for (std::int64_t i = 0; i < n; ++i) pb[i] -= pg[i];
          break;
        case BinaryKind::kMul:
          if (ga_on) for (std::int64_t i = 0; i < n; ++i) pa[i] += pg[i] * xb[i];
          if (gb_on) for (std::int64_t i = 0; i < n; ++i) pb[i] += pg[i] * xa[i];
          break;
      }
      return;
    }
    plan.for_each([&](std::int64_t oi, std::int64_t ia, std::int64_t ib) {
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga_on) ga[ia] += g[oi];
          if (gb_on) gb[ib] += g[oi];
          break;
        case BinaryKind::kSub:
          if (ga_on) ga[ia] += g[oi];
          if (gb_on) gb[ib] -= g[oi];
          break;
        case BinaryKind::kMul:
          if (ga_on) ga[ia] += g[oi] * bd[ib];
          if (gb_on) gb[ib] += g[oi] * ad[ia];
          break;
      }
    });
  });
  return finish(std::move(out), op);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto in = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * factor;
  out.attach_backward({a}, [a, factor](std::span<const T> g) mutable {
    auto ga = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
  return finish(std::move(out), "scale");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  out.attach_backward({a}, [a](std::span<const T> g) mutable {
    auto ga = a.mutable_grad();
    for (auto& v : ga) v += g[0];
  });
  return finish(std::move(out), "sum");
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape().dims();
  const auto& sb = b.shape().dims();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + a.shape().str() + " and " +
                         b.shape().str());
  }
  const std::int64_t m = sa[sa.size() - 2], k = sa.back();
  const std::int64_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ, " + a.shape().str() + " x " +
                         b.shape().str());
  }
  std::vector<std::int64_t> batch_a(sa.begin(), sa.end() - 2);
  std::vector<std::int64_t> batch_b(sb.begin(), sb.end() - 2);
  BroadcastPlan plan(batch_a, batch_b, "matmul");
  std::vector<std::int64_t> out_dims = plan.out_dims;
  out_dims.push_back(m);
  out_dims.push_back(n);

  struct Offsets {
    std::int64_t out, a, b;
  };
  std::vector<Offsets> offs;
  offs.reserve(static_cast<std::size_t>(plan.numel()));
  plan.for_each([&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    offs.push_back({o * m * n, ia * m * k, ib * k * n});
  });

  Tensor<T> out{Shape(out_dims)};
  T* od = out.data().data();
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  const auto nb = static_cast<std::int64_t>(offs.size());
#pragma omp parallel for schedule(static) if (nb > 1)
  for (std::int64_t i = 0; i < nb; ++i) {
    kernels::gemm(Trans::kNo, Trans::kNo, m, n, k, T(1), ad + offs[i].a, k, bd + offs[i].b, n,
                  T(0), od + offs[i].out, n);
  }

  const bool a_unique = plan.numel() == Shape(batch_a).numel();
  const bool b_unique = plan.numel() == Shape(batch_b).numel();
  out.attach_backward({a, b}, [a, b, offs, m, n, k, a_unique, b_unique](
                                  std::span<const T> g) mutable {
    const T* gd = g.data();
    const auto nb = static_cast<std::int64_t>(offs.size());
    if (a.requires_grad()) {
      T* ga = a.mutable_grad().data();
      const T* bd = b.data().data();
#pragma omp parallel for schedule(static) if (nb > 1 && a_unique)
      for (std::int64_t i = 0; i < nb; ++i) {
        kernels::gemm(Trans::kNo, Trans::kYes, m, k, n, T(1), gd + offs[i].out, n,
                      bd + offs[i].b, n, T(1), ga + offs[i].a, k);
      }
    }
    if (b.requires_grad()) {
      T* gb = b.mutable_grad().data();
      const T* ad = a.data().data();
#pragma omp parallel for schedule(static) if (nb > 1 && b_unique)
      for (std::int64_t i = 0; i < nb; ++i) {
        kernels::gemm(Trans::kYes, Trans::kNo, k, n, m, T(1), ad + offs[i].a, k,
                      gd + offs[i].out, n, T(1), gb + offs[i].b, n);
      }
    }
  });
  return finish(std::move(out), "matmul");
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  const std::size_t r = a.rank();
  if (r < 2) throw DimensionError("transpose_last2: rank < 2, got " + a.shape().str());
  std::vector<std::int64_t> dims = a.shape().dims();
  const std::int64_t rows = dims[r - 2], cols = dims[r - 1];
  const std::int64_t mats = a.numel() / (rows * cols);
  std::swap(dims[r - 1], dims[r - 2]);
  Tensor<T> out{Shape(dims)};
  auto od = out.data();
  auto ad = a.data();
  for (std::int64_t m = 0; m < mats; ++m) {
    const std::int64_t base = m * rows * cols;
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j) od[base + j * rows + i] = ad[base + i * cols + j];
  }
  out.attach_backward({a}, [a, mats, rows, cols](std::span<const T> g) mutable {
    auto ga = a.mutable_grad();
    for (std::int64_t m = 0; m < mats; ++m) {
      const std::int64_t base = m * rows * cols;
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) ga[base + i * cols + j] += g[base + j * rows + i];
    }
  });
  return finish(std::move(out), "transpose_last2");
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::span<const int> order) {
  const std::size_t r = a.rank();
  if (order.size() != r) {
    throw DimensionError("permute: order has " + std::to_string(order.size()) +
                         " axes for tensor " + a.shape().str());
  }
  std::vector<bool> seen(r, false);
  for (int ax : order) {
    if (ax < 0 || static_cast<std::size_t>(ax) >= r || seen[ax]) {
      throw DimensionError("permute: invalid axis order for " + a.shape().str());
    }
    seen[ax] = true;
  }
  const auto& in_dims = a.shape().dims();
  const auto in_strides = row_major_strides(in_dims);
  std::vector<std::int64_t> out_dims(r), gather_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_dims[i] = in_dims[order[i]];
    gather_strides[i] = in_strides[order[i]];
  }
  // Reuse the broadcast walker: output index -> input offset.
  BroadcastPlan plan(out_dims, out_dims, "permute");
  plan.a_strides = gather_strides;
  std::vector<std::int64_t> src(static_cast<std::size_t>(a.numel()));
  plan.for_each([&](std::int64_t o, std::int64_t ia, std::int64_t) { src[o] = ia; });

  Tensor<T> out{Shape(out_dims)};
  auto od = out.data();
  auto ad = a.data();
  for (std::size_t o = 0; o < src.size(); ++o) od[o] = ad[src[o]];
  out.attach_backward({a}, [a, src = std::move(src)](std::span<const T> g) mutable {
    auto ga = a.mutable_grad();
    for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += g[o];
  });
  return finish(std::move(out), "permute");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape.numel() != a.numel()) {
    throw DimensionError("reshape: cannot view " + a.shape().str() + " as " + shape.str());
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  out.attach_backward({a}, [a](std::span<const T> g) mutable {
    auto ga = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& first = parts.front().shape().dims();
  if (axis < 0 || static_cast<std::size_t>(axis) >= first.size()) {
    throw DimensionError("concat: axis out of range for " + parts.front().shape().str());
  }
  std::vector<std::int64_t> out_dims = first;
  out_dims[axis] = 0;
  for (const auto& p : parts) {
    const auto& d = p.shape().dims();
    bool ok = d.size() == first.size();
    for (std::size_t i = 0; ok && i < d.size(); ++i) {
      if (static_cast<int>(i) != axis && d[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: " + p.shape().str() + " incompatible with " +
                           parts.front().shape().str() + " along axis " + std::to_string(axis));
    }
    out_dims[axis] += d[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::int64_t out_row = out_dims[axis] * inner;

  Tensor<T> out{Shape(out_dims)};
  auto od = out.data();
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t row = p.dim(axis) * inner;
    auto pd = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(pd.begin() + o * row, pd.begin() + (o + 1) * row,
                od.begin() + o * out_row + off);
    }
    off += row;
  }
  out.attach_backward(parts, [parts, offsets, outer, inner, out_row, axis](
                                 std::span<const T> g) mutable {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!parts[i].requires_grad()) continue;
      auto gp = parts[i].mutable_grad();
      const std::int64_t row = parts[i].dim(axis) * inner;
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < row; ++j) gp[o * row + j] += g[o * out_row + offsets[i] + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dOptions opts) {
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(w.shape(), 4, "conv2d", "weight");
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input " + x.shape().str() + " has " +
                         std::to_string(x.dim(1)) + " channels but weight " + w.shape().str() +
                         " expects " + std::to_string(w.dim(1)));
  }
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_t = x.dim(2);
  g.in_n = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel_t = w.dim(2);
  g.kernel_n = w.dim(3);
  g.stride_t = opts.stride_t;
  g.dilation_t = opts.dilation_t;
  g.pad_t = opts.pad_t;
  g.validate();

  Tensor<T> out(Shape{g.batch, g.out_channels, g.out_t(), g.out_n()});
  kernels::conv2d_forward(g, x.data().data(), w.data().data(), out.data().data());
  out.attach_backward({x, w}, [x, w, g](std::span<const T> grad) mutable {
    if (x.requires_grad()) {
      kernels::conv2d_backward_input(g, grad.data(), w.data().data(), x.mutable_grad().data());
    }
    if (w.requires_grad()) {
      kernels::conv2d_backward_weight(g, x.data().data(), grad.data(), w.mutable_grad().data());
    }
  });
  return finish(std::move(out), "conv2d");
}

template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w) {
  require_rank(x.shape(), 4, "pointwise_conv", "input");
  require_rank(w.shape(), 2, "pointwise_conv", "weight");
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("pointwise_conv: input " + x.shape().str() + " has " +
                         std::to_string(x.dim(1)) + " channels but weight " + w.shape().str() +
                         " expects " + std::to_string(w.dim(1)));
  }
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_t = x.dim(2);
  g.in_n = x.dim(3);
  g.out_channels = w.dim(0);

  Tensor<T> out(Shape{g.batch, g.out_channels, g.in_t, g.in_n});
  kernels::conv2d_forward(g, x.data().data(), w.data().data(), out.data().data());
  out.attach_backward({x, w}, [x, w, g](std::span<const T> grad) mutable {
    if (x.requires_grad()) {
      kernels::conv2d_backward_input(g, grad.data(), w.data().data(), x.mutable_grad().data());
    }
    if (w.requires_grad()) {
      kernels::conv2d_backward_weight(g, x.data().data(), grad.data(), w.mutable_grad().data());
    }
  });
  return finish(std::move(out), "pointwise_conv");
}

template <typename T>
Tensor<T> temporal_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "temporal_pool", "input");
  const std::int64_t planes = x.dim(0) * x.dim(1), t = x.dim(2), n = x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), n});
  auto od = out.data();
  auto xd = x.data();
  const T inv = T(1) / static_cast<T>(t);
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t f = 0; f < t; ++f) {
      for (std::int64_t j = 0; j < n; ++j) od[p * n + j] += xd[(p * t + f) * n + j];
    }
    for (std::int64_t j = 0; j < n; ++j) od[p * n + j] *= inv;
  }
  out.attach_backward({x}, [x, planes, t, n, inv](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t f = 0; f < t; ++f)
        for (std::int64_t j = 0; j < n; ++j) gx[(p * t + f) * n + j] += g[p * n + j] * inv;
  });
  return finish(std::move(out), "temporal_pool");
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::int64_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  auto od = out.data();
  auto xd = x.data();
  const T inv = T(1) / static_cast<T>(area);
  for (std::int64_t p = 0; p < planes; ++p) {
    T s = T(0);
    for (std::int64_t i = 0; i < area; ++i) s += xd[p * area + i];
    od[p] = s * inv;
  }
  out.attach_backward({x}, [x, planes, area, inv](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t i = 0; i < area; ++i) gx[p * area + i] += g[p] * inv;
  });
  return finish(std::move(out), "global_avg_pool");
}

template <typename T>
Tensor<T> temporal_max_pool(const Tensor<T>& x, std::int64_t kernel, std::int64_t stride,
                            std::int64_t pad) {
  require_rank(x.shape(), 4, "temporal_max_pool", "input");
  kernels::PoolGeometry g;
  g.batch = x.dim(0);
  g.channels = x.dim(1);
  g.in_t = x.dim(2);
  g.in_n = x.dim(3);
  g.kernel = kernel;
  g.stride = stride;
  g.pad = pad;
  g.validate();
  Tensor<T> out(Shape{g.batch, g.channels, g.out_t(), g.in_n});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  kernels::temporal_max_pool_forward(g, x.data().data(), out.data().data(), argmax.data());
  out.attach_backward({x}, [x, argmax = std::move(argmax)](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
  });
  return finish(std::move(out), "temporal_max_pool");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto od = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::max(xd[i], T(0));
  out.attach_backward({x}, [x](std::span<const T> g) mutable {
    T* __restrict gx = x.mutable_grad().data();
    const T* __restrict xd = x.data().data();
    const T* __restrict gd = g.data();
    const auto n = static_cast<std::int64_t>(g.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += xd[i] > T(0) ? gd[i] : T(0);
  });
  return finish(std::move(out), "relu");
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto od = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::tanh(xd[i]);
  std::vector<T> y(od.begin(), od.end());
  out.attach_backward({x}, [x, y = std::move(y)](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
  return finish(std::move(out), "tanh");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("softmax: needs rank >= 1");
  const std::int64_t k = x.shape().dims().back();
  const std::int64_t rows = x.numel() / k;
  Tensor<T> out(x.shape());
  auto od = out.data();
  auto xd = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * k;
    T* o = od.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T total = T(0);
    for (std::int64_t j = 0; j < k; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::int64_t j = 0; j < k; ++j) o[j] /= total;
  }
  std::vector<T> y(od.begin(), od.end());
  out.attach_backward({x}, [x, y = std::move(y), rows, k](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::int64_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
      for (std::int64_t j = 0; j < k; ++j) gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
    }
  });
  return finish(std::move(out), "softmax");
}

template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                        T momentum, T eps) {
  if (x.rank() < 2) throw DimensionError("batch_norm_2d: input rank < 2, " + x.shape().str());
  const std::int64_t b = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.numel() / (b * c);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->numel() != c) {
      throw DimensionError("batch_norm_2d: per-channel tensor " + p->shape().str() +
                           " does not match input " + x.shape().str());
    }
  }
  const std::int64_t count = b * s;
  std::vector<T> mean(c), invstd(c);
  auto xd = x.data();
  if (training) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* p = xd.data() + (bi * c + ch) * s;
        acc += lane_reduce<T>(s, [p](std::int64_t i) { return static_cast<double>(p[i]); });
      }
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* p = xd.data() + (bi * c + ch) * s;
        sq += lane_reduce<T>(s, [p, mu](std::int64_t i) {
          const double d = p[i] - mu;
          return d * d;
        });
      }
      const double var = sq / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      rm[ch] = static_cast<T>((1.0 - momentum) * rm[ch] + momentum * mu);
      rv[ch] = static_cast<T>((1.0 - momentum) * rv[ch] + momentum * unbiased);
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      invstd[ch] = T(1) / std::sqrt(rv[ch] + eps);
    }
  }

  Tensor<T> out(x.shape());
  auto od = out.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t base = (bi * c + ch) * s;
      for (std::int64_t i = 0; i < s; ++i) {
        const T h = (xd[base + i] - mean[ch]) * invstd[ch];
        xhat[base + i] = h;
        od[base + i] = gm[ch] * h + bt[ch];
      }
    }
  }
  out.attach_backward(
      {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), b, c, s, count,
       training](std::span<const T> g) mutable {
        auto gm = gamma.data();
        std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
#pragma omp parallel for schedule(static)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          for (std::int64_t bi = 0; bi < b; ++bi) {
            const T* gp = g.data() + (bi * c + ch) * s;
            const T* hp = xhat.data() + (bi * c + ch) * s;
            sum_g[ch] += lane_reduce<T>(s, [gp](std::int64_t i) { return static_cast<double>(gp[i]); });
            sum_gh[ch] += lane_reduce<T>(s, [gp, hp](std::int64_t i) {
              return static_cast<double>(gp[i]) * hp[i];
            });
          }
        }
        if (gamma.requires_grad()) {
          auto gg = gamma.mutable_grad();
          for (std::int64_t ch = 0; ch < c; ++ch) gg[ch] += static_cast<T>(sum_gh[ch]);
        }
        if (beta.requires_grad()) {
          auto gb = beta.mutable_grad();
          for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<T>(sum_g[ch]);
        }
        if (!x.requires_grad()) return;
        auto gx = x.mutable_grad();
        const T inv_count = T(1) / static_cast<T>(count);
#pragma omp parallel for schedule(static) collapse(2)
        for (std::int64_t bi = 0; bi < b; ++bi) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t base = (bi * c + ch) * s;
            const T k = gm[ch] * invstd[ch];
            if (training) {
              const T mg = static_cast<T>(sum_g[ch]) * inv_count;
              const T mgh = static_cast<T>(sum_gh[ch]) * inv_count;
              for (std::int64_t i = 0; i < s; ++i) {
                gx[base + i] += k * (g[base + i] - mg - xhat[base + i] * mgh);
              }
            } else {
              for (std::int64_t i = 0; i < s; ++i) gx[base + i] += k * g[base + i];
            }
          }
        }
      });
  return finish(std::move(out), "batch_norm_2d");
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy", "logits");
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + logits.shape().str());
  }
  auto ld = logits.data();
  std::vector<T> prob(static_cast<std::size_t>(b * k));
  double loss = 0.0;
  for (std::int64_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || labels[r] >= k) {
      throw DimensionError("cross_entropy: label " + std::to_string(labels[r]) +
                           " out of range for " + std::to_string(k) + " classes");
    }
    const T* in = ld.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::int64_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(in[j] - mx));
    const double lse = std::log(total) + mx;
    loss += lse - in[labels[r]];
    for (std::int64_t j = 0; j < k; ++j) {
      prob[r * k + j] = static_cast<T>(std::exp(static_cast<double>(in[j]) - lse));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(b)));
  std::vector<int> lab(labels.begin(), labels.end());
  out.attach_backward({logits}, [logits, prob = std::move(prob), lab = std::move(lab), b,
                                 k](std::span<const T> g) mutable {
    auto gl = logits.mutable_grad();
    const T f = g[0] / static_cast<T>(b);
    for (std::int64_t r = 0; r < b; ++r) {
      for (std::int64_t j = 0; j < k; ++j) {
        gl[r * k + j] += f * (prob[r * k + j] - (j == lab[r] ? T(1) : T(0)));
      }
    }
  });
  return finish(std::move(out), "cross_entropy");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "linear", "input");
  require_rank(w.shape(), 2, "linear", "weight");
  const std::int64_t b = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  if (w.dim(1) != cin) {
    throw DimensionError("linear: input " + x.shape().str() + " does not match weight " +
                         w.shape().str());
  }
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("linear: bias " + bias.shape().str() + " does not match weight " +
                         w.shape().str());
  }
  Tensor<T> out(Shape{b, cout});
  kernels::gemm(Trans::kNo, Trans::kYes, b, cout, cin, T(1), x.data().data(), cin,
                w.data().data(), cin, T(0), out.data().data(), cout);
  if (bias.defined()) {
    auto od = out.data();
    auto bd = bias.data();
    for (std::int64_t r = 0; r < b; ++r)
      for (std::int64_t j = 0; j < cout; ++j) od[r * cout + j] += bd[j];
  }
  out.attach_backward({x, w, bias}, [x, w, bias, b, cin, cout](std::span<const T> g) mutable {
    if (x.requires_grad()) {
      kernels::gemm(Trans::kNo, Trans::kNo, b, cin, cout, T(1), g.data(), cout, w.data().data(),
                    cin, T(1), x.mutable_grad().data(), cin);
    }
    if (w.requires_grad()) {
      kernels::gemm(Trans::kYes, Trans::kNo, cout, cin, b, T(1), g.data(), cout,
                    x.data().data(), cin, T(1), w.mutable_grad().data(), cin);
    }
    if (bias.defined() && bias.requires_grad()) {
      auto gb = bias.mutable_grad();
      for (std::int64_t r = 0; r < b; ++r)
        for (std::int64_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
    }
  });
  return finish(std::move(out), "linear");
}

template <typename T>
Tensor<T> weighted_group_mean(const Tensor<T>& x, std::span<const T> weights,
                              std::int64_t group_size) {
  require_rank(x.shape(), 2, "weighted_group_mean", "input");
  if (group_size <= 0 || x.dim(0) % group_size != 0 ||
      static_cast<std::int64_t>(weights.size()) != x.dim(0)) {
    throw DimensionError("weighted_group_mean: " + std::to_string(weights.size()) +
                         " weights, group size " + std::to_string(group_size) + " for input " +
                         x.shape().str());
  }
  const std::int64_t groups = x.dim(0) / group_size, k = x.dim(1);
  std::vector<T> norm(weights.begin(), weights.end());
  for (std::int64_t gi = 0; gi < groups; ++gi) {
    T total = T(0);
    for (std::int64_t m = 0; m < group_size; ++m) total += norm[gi * group_size + m];
    if (!(total > T(0))) {
      throw ConfigError("weighted_group_mean: group " + std::to_string(gi) +
                        " has no positive weight");
    }
    for (std::int64_t m = 0; m < group_size; ++m) norm[gi * group_size + m] /= total;
  }
  Tensor<T> out(Shape{groups, k});
  auto od = out.data();
  auto xd = x.data();
  for (std::int64_t gi = 0; gi < groups; ++gi)
    for (std::int64_t m = 0; m < group_size; ++m) {
      const T wgt = norm[gi * group_size + m];
      if (wgt == T(0)) continue;
      for (std::int64_t j = 0; j < k; ++j) od[gi * k + j] += wgt * xd[(gi * group_size + m) * k + j];
    }
  out.attach_backward({x}, [x, norm = std::move(norm), groups, group_size,
                            k](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::int64_t gi = 0; gi < groups; ++gi)
      for (std::int64_t m = 0; m < group_size; ++m) {
        const T wgt = norm[gi * group_size + m];
        for (std::int64_t j = 0; j < k; ++j) gx[(gi * group_size + m) * k + j] += wgt * g[gi * k + j];
      }
  });
  return finish(std::move(out), "weighted_group_mean");
}

#define PSUMNET_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                         \
  template Tensor<T> permute(const Tensor<T>&, std::span<const int>);                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, Conv2dOptions);                 \
  template Tensor<T> pointwise_conv(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> temporal_pool(const Tensor<T>&);                                           \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                         \
  template Tensor<T> temporal_max_pool(const Tensor<T>&, std::int64_t, std::int64_t,            \
                                       std::int64_t);                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> tanh(const Tensor<T>&);                                                    \
  template Tensor<T> softmax(const Tensor<T>&);                                                 \
  template Tensor<T> batch_norm_2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                   Tensor<T>&, Tensor<T>&, bool, T, T);                         \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> weighted_group_mean(const Tensor<T>&, std::span<const T>, std::int64_t);

PSUMNET_INSTANTIATE_OPS(float)
PSUMNET_INSTANTIATE_OPS(double)

#undef PSUMNET_INSTANTIATE_OPS

}  // namespace psumnet

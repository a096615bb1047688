// Parallel kernels against their serial reference versions on shapes taken
// from the default body stream (25 joints, 64-frame window).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "psumnet/kernels.hpp"

namespace {

using psumnet::kernels::ConvGeometry;
using psumnet::kernels::Trans;

std::vector<float> random_vec(std::size_t n) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool kReference>
void BM_Gemm(benchmark::State& state) {
  const std::int64_t m = state.range(0), n = state.range(1), k = state.range(2);
  const auto a = random_vec(m * k), b = random_vec(k * n);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (kReference) {
      psumnet::kernels::reference::gemm(Trans::kNo, Trans::kNo, m, n, k, 1.f, a.data(), k,
                                        b.data(), n, 0.f, c.data(), n);
    } else {
      psumnet::kernels::gemm(Trans::kNo, Trans::kNo, m, n, k, 1.f, a.data(), k, b.data(), n,
                             0.f, c.data(), n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

ConvGeometry temporal_geometry(std::int64_t channels, std::int64_t t) {
  ConvGeometry g;
  g.batch = 4;
  g.in_channels = channels;
  g.out_channels = channels;
  g.in_t = t;
  g.in_n = 25;
  g.kernel_t = 5;
  g.dilation_t = 2;
  g.pad_t = 4;
  return g;
}

template <bool kReference>
void BM_TemporalConv(benchmark::State& state) {
  const ConvGeometry g = temporal_geometry(state.range(0), state.range(1));
  const auto x = random_vec(g.batch * g.in_channels * g.in_t * g.in_n);
  const auto w = random_vec(g.out_channels * g.in_channels * g.kernel_t);
  std::vector<float> y(g.batch * g.out_channels * g.out_t() * g.out_n());
  for (auto _ : state) {
    if constexpr (kReference) {
      psumnet::kernels::reference::conv2d_forward(g, x.data(), w.data(), y.data());
    } else {
      psumnet::kernels::conv2d_forward(g, x.data(), w.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool kReference>
void BM_TemporalConvBackwardWeight(benchmark::State& state) {
  const ConvGeometry g = temporal_geometry(state.range(0), state.range(1));
  const auto x = random_vec(g.batch * g.in_channels * g.in_t * g.in_n);
  const auto dy = random_vec(g.batch * g.out_channels * g.out_t() * g.out_n());
  std::vector<float> dw(g.out_channels * g.in_channels * g.kernel_t);
  for (auto _ : state) {
    if constexpr (kReference) {
      psumnet::kernels::reference::conv2d_backward_weight(g, x.data(), dy.data(), dw.data());
    } else {
      psumnet::kernels::conv2d_backward_weight(g, x.data(), dy.data(), dw.data());
    }
    benchmark::DoNotOptimize(dw.data());
  }
}

}  // namespace

BENCHMARK_TEMPLATE(BM_Gemm, true)->Args({128, 1600, 80})->Args({320, 400, 320});
BENCHMARK_TEMPLATE(BM_Gemm, false)->Args({128, 1600, 80})->Args({320, 400, 320});
BENCHMARK_TEMPLATE(BM_TemporalConv, true)->Args({20, 64})->Args({40, 32});
BENCHMARK_TEMPLATE(BM_TemporalConv, false)->Args({20, 64})->Args({40, 32});
BENCHMARK_TEMPLATE(BM_TemporalConvBackwardWeight, true)->Args({20, 64})->Args({40, 32});
BENCHMARK_TEMPLATE(BM_TemporalConvBackwardWeight, false)->Args({20, 64})->Args({40, 32});

BENCHMARK_MAIN();

#include "psumnet/kernels.hpp"

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "psumnet/errors.hpp"

namespace psumnet::kernels {
namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

template <typename T>
double max_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
  return m;
}

// Straight from the definition; independent of both library versions.
void naive_conv(const ConvGeometry& g, const std::vector<double>& x, const std::vector<double>& w,
                std::vector<double>& y) {
  const auto to = g.out_t(), no = g.out_n();
  y.assign(g.batch * g.out_channels * to * no, 0.0);
  for (std::int64_t b = 0; b < g.batch; ++b)
    for (std::int64_t co = 0; co < g.out_channels; ++co)
      for (std::int64_t t = 0; t < to; ++t)
        for (std::int64_t n = 0; n < no; ++n) {
          double acc = 0.0;
          for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
            for (std::int64_t i = 0; i < g.kernel_t; ++i)
              for (std::int64_t j = 0; j < g.kernel_n; ++j) {
                const std::int64_t ti = t * g.stride_t + i * g.dilation_t - g.pad_t;
                if (ti < 0 || ti >= g.in_t) continue;
                acc += x[((b * g.in_channels + ci) * g.in_t + ti) * g.in_n + n + j] *
                       w[((co * g.in_channels + ci) * g.kernel_t + i) * g.kernel_n + j];
              }
          y[((b * g.out_channels + co) * to + t) * no + n] = acc;
        }
}

TEST(Gemm, MatchesReferenceAcrossShapesAndTransposes) {
  std::mt19937_64 rng(1);
  const std::int64_t sizes[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 96, 300}, {130, 70, 260}};
  for (auto [m, n, k] : sizes) {
    for (Trans ta : {Trans::kNo, Trans::kYes}) {
      for (Trans tb : {Trans::kNo, Trans::kYes}) {
        const auto a = random_vec<float>(m * k, rng);
        const auto b = random_vec<float>(k * n, rng);
        auto c = random_vec<float>(m * n, rng);
        auto c_ref = c;
        const std::int64_t lda = ta == Trans::kNo ? k : m;
        const std::int64_t ldb = tb == Trans::kNo ? n : k;
        gemm(ta, tb, m, n, k, 0.5f, a.data(), lda, b.data(), ldb, 2.0f, c.data(), n);
        reference::gemm(ta, tb, m, n, k, 0.5f, a.data(), lda, b.data(), ldb, 2.0f, c_ref.data(),
                        n);
        EXPECT_LT(max_diff(c, c_ref), 1e-3 * std::sqrt(double(k))) << m << "x" << n << "x" << k;
      }
    }
  }
}

TEST(Gemm, DoubleLargeMatchesReference) {
  std::mt19937_64 rng(2);
  const std::int64_t m = 70, n = 50, k = 600;
  const auto a = random_vec<double>(m * k, rng);
  const auto b = random_vec<double>(k * n, rng);
  std::vector<double> c(m * n), c_ref(m * n);
  gemm(Trans::kNo, Trans::kNo, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, c.data(), n);
  reference::gemm(Trans::kNo, Trans::kNo, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0,
                  c_ref.data(), n);
  EXPECT_LT(max_diff(c, c_ref), 1e-11);
}

TEST(Conv, HandExample) {
  ConvGeometry g;
  g.in_t = 3;
  g.kernel_t = 3;
  g.pad_t = 1;
  std::vector<double> x{1, 2, 3}, w{1, 1, 1}, y(3);
  conv2d_forward(g, x.data(), w.data(), y.data());
  EXPECT_EQ(y, (std::vector<double>{3, 6, 5}));
}

TEST(Conv, DilatedOutputLength) {
  ConvGeometry g;
  g.in_t = 5;
  g.kernel_t = 3;
  g.dilation_t = 2;
  g.pad_t = 2;
  EXPECT_EQ(g.out_t(), 5);
}

TEST(Conv, NonpositiveOutputIsConfigError) {
  ConvGeometry g;
  g.in_t = 2;
  g.kernel_t = 5;
  EXPECT_THROW(g.validate(), ConfigError);
  g.pad_t = 1;
  EXPECT_THROW(g.validate(), ConfigError);
  g.pad_t = 2;
  EXPECT_NO_THROW(g.validate());
}

// Exhaustive sweep over small extents against the nested-loop oracle.
TEST(Conv, ForwardMatchesNaiveOracleOnSmallShapes) {
  std::mt19937_64 rng(3);
  int cases = 0;
  for (std::int64_t ci = 1; ci <= 3; ++ci)
    for (std::int64_t co = 1; co <= 3; ++co)
      for (std::int64_t t = 1; t <= 6; ++t)
        for (std::int64_t n = 1; n <= 4; ++n)
          for (std::int64_t kt = 1; kt <= 5; kt += 2)
            for (std::int64_t kn = 1; kn <= n; kn += 2)
              for (std::int64_t s = 1; s <= 2; ++s)
                for (std::int64_t d = 1; d <= 2; ++d) {
                  ConvGeometry g{2, ci, co, t, n, kt, kn, s, d, d * (kt - 1) / 2};
                  if (g.out_t() < 1) continue;
                  const auto x = random_vec<double>(2 * ci * t * n, rng);
                  const auto w = random_vec<double>(co * ci * kt * kn, rng);
                  std::vector<double> y(2 * co * g.out_t() * g.out_n()), y_naive;
                  conv2d_forward(g, x.data(), w.data(), y.data());
                  naive_conv(g, x, w, y_naive);
                  ASSERT_LT(max_diff(y, y_naive), 1e-12);
                  ++cases;
                }
  EXPECT_GT(cases, 1000);
}

TEST(Conv, BackwardMatchesReference) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    std::uniform_int_distribution<int> ext(1, 6);
    ConvGeometry g;
    g.batch = ext(rng) % 3 + 1;
    g.in_channels = ext(rng);
    g.out_channels = ext(rng);
    g.in_t = ext(rng) + 3;
    g.in_n = ext(rng);
    g.kernel_t = (trial % 3) * 2 + 1;
    g.kernel_n = 1;
    g.stride_t = trial % 2 + 1;
    g.dilation_t = (trial / 2) % 2 + 1;
    g.pad_t = g.dilation_t * (g.kernel_t - 1) / 2;
    const auto x = random_vec<double>(g.batch * g.in_channels * g.in_t * g.in_n, rng);
    const auto w = random_vec<double>(g.out_channels * g.in_channels * g.kernel_t, rng);
    const auto dy = random_vec<double>(g.batch * g.out_channels * g.out_t() * g.out_n(), rng);
    std::vector<double> dx(x.size(), 0.5), dx_ref(x.size(), 0.5);
    std::vector<double> dw(w.size(), 0.25), dw_ref(w.size(), 0.25);
    conv2d_backward_input(g, dy.data(), w.data(), dx.data());
    reference::conv2d_backward_input(g, dy.data(), w.data(), dx_ref.data());
    conv2d_backward_weight(g, x.data(), dy.data(), dw.data());
    reference::conv2d_backward_weight(g, x.data(), dy.data(), dw_ref.data());
    EXPECT_LT(max_diff(dx, dx_ref), 1e-12);
    EXPECT_LT(max_diff(dw, dw_ref), 1e-12);
  }
}

TEST(Conv, PointwisePathMatchesReference) {
  std::mt19937_64 rng(5);
  ConvGeometry g{3, 16, 24, 12, 25, 1, 1, 1, 1, 0};
  const auto x = random_vec<float>(3 * 16 * 12 * 25, rng);
  const auto w = random_vec<float>(24 * 16, rng);
  std::vector<float> y(3 * 24 * 12 * 25), y_ref(y.size());
  conv2d_forward(g, x.data(), w.data(), y.data());
  reference::conv2d_forward(g, x.data(), w.data(), y_ref.data());
  EXPECT_LT(max_diff(y, y_ref), 1e-4);
}

TEST(MaxPool, MatchesReferenceAndSkipsPadding) {
  PoolGeometry g{1, 1, 4, 1, 3, 1, 1};
  std::vector<double> x{-5, -1, -3, -2}, y(4);
  std::vector<std::int64_t> arg(4);
  temporal_max_pool_forward(g, x.data(), y.data(), arg.data());
  EXPECT_EQ(y, (std::vector<double>{-1, -1, -1, -2}));
  EXPECT_EQ(arg, (std::vector<std::int64_t>{1, 1, 1, 3}));

  std::mt19937_64 rng(6);
  PoolGeometry g2{2, 3, 9, 5, 3, 2, 1};
  const auto x2 = random_vec<double>(2 * 3 * 9 * 5, rng);
  std::vector<double> y2(2 * 3 * g2.out_t() * 5), y2_ref(y2.size());
  std::vector<std::int64_t> a2(y2.size()), a2_ref(y2.size());
  temporal_max_pool_forward(g2, x2.data(), y2.data(), a2.data());
  reference::temporal_max_pool_forward(g2, x2.data(), y2_ref.data(), a2_ref.data());
  EXPECT_EQ(y2, y2_ref);
  EXPECT_EQ(a2, a2_ref);
}

}  // namespace
}  // namespace psumnet::kernels

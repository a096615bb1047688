#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "psumnet/errors.hpp"
#include "psumnet/gradcheck.hpp"
#include "psumnet/ops.hpp"
#include "psumnet/optim.hpp"
#include "test_util.hpp"

namespace psumnet {
namespace {

using testing::rand_int;
using testing::random_tensor;
using Td = Tensor<double>;

void expect_values(const Td& t, std::vector<double> want, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), static_cast<std::int64_t>(want.size()));
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << i;
}

void expect_grad_ok(const ScalarFn& f, std::vector<Td> inputs, double tol = 1e-6) {
  const auto r = grad_check(f, std::move(inputs), {.eps = 1e-6, .tol = tol});
  EXPECT_TRUE(r.passed) << "max rel " << r.max_rel_error << " at " << r.worst << ", "
                        << r.non_smooth << "/" << r.checked << " non-smooth";
}

TEST(Shape, RejectsNonpositiveExtent) {
  EXPECT_THROW(Shape({2, 0}), DimensionError);
  EXPECT_EQ(Shape({2, 3, 4}).numel(), 24);
  EXPECT_EQ(Shape{}.numel(), 1);
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Td(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, CopiesAliasDetachDoesNot) {
  Td a(Shape{2}, 1.0);
  Td b = a;
  b.data()[0] = 5.0;
  EXPECT_EQ(a.data()[0], 5.0);
  Td c = a.detach();
  c.data()[0] = 7.0;
  EXPECT_EQ(a.data()[0], 5.0);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Td a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(add(a, a).requires_grad());
  }
  EXPECT_TRUE(add(a, a).requires_grad());
}

TEST(Matmul, IdentityAndHandExample) {
  Td eye(Shape{2, 2}, {1, 0, 0, 1});
  Td m(Shape{2, 2}, {1.5, -2, 3, 4});
  expect_values(matmul(eye, m), {1.5, -2, 3, 4});
  Td a(Shape{2, 2}, {1, 2, 3, 4});
  Td b(Shape{2, 1}, {5, 6});
  expect_values(matmul(a, b), {17, 39});
}

TEST(Matmul, MismatchNamesBothShapes) {
  Td a(Shape{2, 3});
  Td b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] x [2,3]"), std::string::npos);
  }
}

TEST(Matmul, BroadcastsBatchAxes) {
  std::mt19937_64 rng(1);
  Td a = random_tensor(Shape{2, 3, 4, 5}, rng);
  Td b = random_tensor(Shape{1, 3, 5, 2}, rng);
  Td c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 4, 2}));
  // element [1,2,3,1]
  double want = 0;
  for (int k = 0; k < 5; ++k) want += a.data()[((1 * 3 + 2) * 4 + 3) * 5 + k] * b.data()[(2 * 5 + k) * 2 + 1];
  EXPECT_NEAR(c.data()[((1 * 3 + 2) * 4 + 3) * 2 + 1], want, 1e-12);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(matmul(in[0], in[1]), 9); },
                 {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{4, 2}, rng)});
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(matmul(in[0], in[1]), 9); },
                 {random_tensor(Shape{2, 2, 3, 4}, rng), random_tensor(Shape{2, 1, 4, 3}, rng)});
}

TEST(Conv2d, IdentityChannelAndHandExample) {
  std::mt19937_64 rng(3);
  Td x = random_tensor(Shape{2, 3, 4, 5}, rng);
  Td w(Shape{3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Td y = conv2d(x, w);
  EXPECT_EQ(y.shape(), x.shape());
  expect_values(y, std::vector<double>(x.data().begin(), x.data().end()));
  Td x1(Shape{1, 1, 3, 1}, {1, 2, 3});
  Td w1(Shape{1, 1, 3, 1}, {1, 1, 1});
  expect_values(conv2d(x1, w1, {.pad_t = 1}), {3, 6, 5});
}

TEST(Conv2d, ChannelMismatchAndEmptyOutput) {
  EXPECT_THROW(conv2d(Td(Shape{1, 2, 4, 1}), Td(Shape{1, 3, 1, 1})), DimensionError);
  EXPECT_THROW(conv2d(Td(Shape{1, 1, 2, 1}), Td(Shape{1, 1, 5, 1})), ConfigError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (Conv2dOptions o : {Conv2dOptions{1, 1, 1}, Conv2dOptions{2, 2, 2}, Conv2dOptions{1, 2, 0}}) {
    expect_grad_ok(
        [o](const std::vector<Td>& in) { return random_projection(conv2d(in[0], in[1], o), 3); },
        {random_tensor(Shape{2, 2, 7, 3}, rng), random_tensor(Shape{3, 2, 3, 2}, rng)});
  }
}

TEST(PointwiseConv, IdentityAndBitwiseEqualToConv2d) {
  std::mt19937_64 rng(5);
  Td x = random_tensor(Shape{2, 4, 6, 5}, rng);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  expect_values(pointwise_conv(x, Td(Shape{4, 4}, eye)),
                std::vector<double>(x.data().begin(), x.data().end()), 0.0);
  Td w = random_tensor(Shape{7, 4}, rng);
  Td w4(Shape{7, 4, 1, 1}, std::vector<double>(w.data().begin(), w.data().end()));
  Td a = pointwise_conv(x, w);
  Td b = conv2d(x, w4);
  for (std::int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
  EXPECT_THROW(pointwise_conv(x, Td(Shape{3, 5})), DimensionError);
}

TEST(PointwiseConv, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  expect_grad_ok(
      [](const std::vector<Td>& in) { return random_projection(pointwise_conv(in[0], in[1]), 4); },
      {random_tensor(Shape{2, 3, 4, 5}, rng), random_tensor(Shape{2, 3}, rng)});
}

TEST(Pooling, TemporalAndGlobalMeans) {
  Td x(Shape{1, 1, 2, 1}, {1, 3});
  expect_values(temporal_pool(x), {2});
  Td c(Shape{2, 3, 4, 5}, 1.25);
  Td tp = temporal_pool(c), gp = global_avg_pool(c);
  for (double v : tp.data()) EXPECT_DOUBLE_EQ(v, 1.25);
  for (double v : gp.data()) EXPECT_DOUBLE_EQ(v, 1.25);
  Td s(Shape{2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(global_avg_pool(s).shape(), (Shape{2, 3}));
  expect_values(global_avg_pool(s), {1, 2, 3, 4, 5, 6});
}

TEST(Pooling, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(temporal_pool(in[0]), 1); },
                 {random_tensor(Shape{2, 3, 4, 5}, rng)});
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(global_avg_pool(in[0]), 1); },
                 {random_tensor(Shape{2, 3, 4, 5}, rng)});
  expect_grad_ok(
      [](const std::vector<Td>& in) { return random_projection(temporal_max_pool(in[0], 3, 2, 1), 1); },
      {random_tensor(Shape{2, 3, 7, 2}, rng)});
}

TEST(Activations, HandValues) {
  expect_values(softmax(Td(Shape{2}, {0, 0})), {0.5, 0.5});
  expect_values(relu(Td(Shape{2}, {-1, 2})), {0, 2});
  expect_values(tanh(Td(Shape{1}, {0.5})), {std::tanh(0.5)});
}

TEST(Activations, SoftmaxRowsAreProbabilityVectors) {
  std::mt19937_64 rng(8);
  for (int seed = 0; seed < 20; ++seed) {
    Td x = random_tensor(Shape{4, 9}, rng, -50, 50);
    Td p = softmax(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 9; ++j) {
        EXPECT_GE(p.data()[r * 9 + j], 0.0);
        s += p.data()[r * 9 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(tanh(in[0]), 2); },
                 {random_tensor(Shape{3, 4}, rng, -2, 2)});
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(relu(in[0]), 2); },
                 {random_tensor(Shape{3, 4}, rng)});
  expect_grad_ok([](const std::vector<Td>& in) { return random_projection(softmax(in[0]), 2); },
                 {random_tensor(Shape{3, 4}, rng, -3, 3)});
}

TEST(BatchNorm, NormalizedInputUnchangedAndZeroVarianceFinite) {
  Td x(Shape{2, 1, 1, 2}, {-1, 1, -1, 1});
  Td g(Shape{1}, 1.0), b(Shape{1}, 0.0), rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
  expect_values(batch_norm_2d(x, g, b, rm, rv, true), {-1, 1, -1, 1}, 1e-5);
  EXPECT_NEAR(rm.data()[0], 0.0, 1e-12);
  EXPECT_NEAR(rv.data()[0], 0.9 + 0.1 * 4.0 / 3.0, 1e-12);
  Td c(Shape{2, 1, 2, 2}, 3.0);
  Td y = batch_norm_2d(c, g, b, rm, rv, true);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, EvalBeforeTrainingUsesInitialStats) {
  Td x(Shape{1, 2, 1, 1}, {0.5, -2});
  Td g(Shape{2}, 1.0), b(Shape{2}, 0.0), rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
  const double k = 1.0 / std::sqrt(1.0 + 1e-5);
  expect_values(batch_norm_2d(x, g, b, rm, rv, false), {0.5 * k, -2 * k});
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (bool training : {true, false}) {
    expect_grad_ok(
        [training](const std::vector<Td>& in) {
          Td rm(Shape{3}, 0.1), rv(Shape{3}, 0.8);
          return random_projection(batch_norm_2d(in[0], in[1], in[2], rm, rv, training), 5);
        },
        {random_tensor(Shape{2, 3, 4, 2}, rng), random_tensor(Shape{3}, rng, 0.5, 1.5),
         random_tensor(Shape{3}, rng)});
  }
}

TEST(CrossEntropy, HandValues) {
  Td confident(Shape{1, 3}, {0, 1e6, 0});
  std::vector<int> label{1};
  EXPECT_NEAR(cross_entropy(confident, label).item(), 0.0, 1e-12);
  Td uniform(Shape{2, 5}, 0.3);
  std::vector<int> labels{0, 4};
  EXPECT_NEAR(cross_entropy(uniform, labels).item(), std::log(5.0), 1e-12);
  std::vector<int> bad{7, 0};
  EXPECT_THROW(cross_entropy(uniform, bad), DimensionError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::vector<int> labels{2, 0, 3};
  expect_grad_ok([&](const std::vector<Td>& in) { return cross_entropy(in[0], labels); },
                 {random_tensor(Shape{3, 4}, rng, -2, 2)});
}

TEST(Linear, ShapeAndGradient) {
  std::mt19937_64 rng(12);
  Td x = random_tensor(Shape{3, 4}, rng);
  Td w = random_tensor(Shape{2, 4}, rng);
  Td b(Shape{2}, {0.5, -0.5});
  Td y = linear(x, w, b);
  double want = b.data()[1];
  for (int k = 0; k < 4; ++k) want += x.data()[2 * 4 + k] * w.data()[4 + k];
  EXPECT_NEAR(y.data()[2 * 2 + 1], want, 1e-12);
  expect_grad_ok(
      [](const std::vector<Td>& in) { return random_projection(linear(in[0], in[1], in[2]), 8); },
      {x, w, b});
}

TEST(Shapes, PermuteReshapeConcatTranspose) {
  std::mt19937_64 rng(13);
  Td x = random_tensor(Shape{2, 3, 4}, rng);
  const int order[] = {2, 0, 1};
  Td p = permute(x, order);
  ASSERT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
  Td t = transpose_last2(x);
  EXPECT_EQ(t.data()[(1 * 4 + 3) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
  EXPECT_THROW(reshape(x, Shape{5, 5}), DimensionError);
  Td y = random_tensor(Shape{2, 1, 4}, rng);
  Td c = concat(std::vector<Td>{x, y}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 4}));
  EXPECT_EQ(c.data()[(1 * 4 + 3) * 4 + 2], y.data()[1 * 4 + 2]);
  EXPECT_THROW(concat(std::vector<Td>{x, random_tensor(Shape{2, 3, 5}, rng)}, 1), DimensionError);

  expect_grad_ok(
      [](const std::vector<Td>& in) {
        const int ord[] = {1, 2, 0};
        Td a = permute(in[0], ord);
        Td b = reshape(transpose_last2(in[1]), Shape{3, 4, 2});
        return random_projection(concat(std::vector<Td>{a, b}, 2), 6);
      },
      {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{2, 3, 4}, rng)});
}

TEST(Elementwise, BroadcastingAndGradients) {
  Td a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Td b(Shape{3}, {10, 20, 30});
  expect_values(add(a, b), {11, 22, 33, 14, 25, 36});
  expect_values(sub(a, Td(Shape{2, 1}, {1, 2})), {0, 1, 2, 2, 3, 4});
  EXPECT_THROW(add(a, Td(Shape{2})), DimensionError);
  std::mt19937_64 rng(14);
  expect_grad_ok(
      [](const std::vector<Td>& in) {
        return sum(mul(scale(sub(in[0], in[1]), 1.7), add(in[0], in[2])));
      },
      {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{3, 1}, rng),
       random_tensor(Shape{4}, rng)});
}

TEST(WeightedGroupMean, AveragesValidMembers) {
  Td x(Shape{4, 2}, {1, 2, 3, 4, 5, 6, 0, 0});
  std::vector<double> w{1, 1, 1, 0};
  expect_values(weighted_group_mean(x, std::span<const double>(w), 2), {2, 3, 5, 6});
  std::vector<double> none{0, 0, 1, 1};
  EXPECT_THROW(weighted_group_mean(x, std::span<const double>(none), 2), ConfigError);
}

TEST(Numerics, NonFiniteOutputThrows) {
  Td big(Shape{1}, {1e200});
  EXPECT_THROW(mul(big, big), NumericError);
}

TEST(GradCheck, SumOfSquaresAndLinear) {
  Td x(Shape{2}, {1, 2});
  const auto r = grad_check([](const std::vector<Td>& in) { return sum(mul(in[0], in[0])); }, {x});
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.checked, 2);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  const auto lin = grad_check(
      [](const std::vector<Td>& in) { return sum(scale(in[0], 3.0)); },
      {Td(Shape{3}, {0.1, -4, 7})});
  EXPECT_LT(lin.max_rel_error, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A broken op: forward 2x, backward claims 3x.
  auto broken = [](const std::vector<Td>& in) {
    Td out(in[0].shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out.data()[i] = 2 * in[0].data()[i];
    Td x = in[0];
    out.attach_backward({x}, [x](std::span<const double> g) mutable {
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3 * g[i];
    });
    return sum(out);
  };
  EXPECT_FALSE(grad_check(broken, {Td(Shape{2}, {1, 2})}).passed);
}

// Randomized shapes, 20 seeds, every differentiable op chained.
TEST(GradCheck, RandomizedOpsAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const auto b = rand_int(rng, 1, 2), c = rand_int(rng, 1, 3), t = rand_int(rng, 3, 6),
               n = rand_int(rng, 1, 4), co = rand_int(rng, 1, 3);
    std::vector<Td> inputs{random_tensor(Shape{b, c, t, n}, rng),
                           random_tensor(Shape{co, c, 3, 1}, rng),
                           random_tensor(Shape{co, co}, rng), random_tensor(Shape{n, n}, rng)};
    const auto r = grad_check(
        [&](const std::vector<Td>& in) {
          Td rm(Shape{co}, 0.0), rv(Shape{co}, 1.0), g(Shape{co}, 1.0), be(Shape{co}, 0.0);
          Td y = conv2d(in[0], in[1], {1, 1, 1});
          y = batch_norm_2d(y, g, be, rm, rv, true);
          y = tanh(pointwise_conv(y, in[2]));
          y = matmul(y, in[3]);
          y = temporal_max_pool(y, 3, 1, 1);
          Td pooled = global_avg_pool(y);
          return random_projection(softmax(pooled), seed);
        },
        inputs, {.eps = 1e-6, .tol = 1e-4, .seed = seed});
    EXPECT_TRUE(r.passed) << "seed " << seed << " rel " << r.max_rel_error << " at " << r.worst;
  }
}

TEST(Sgd, PlainStepAndMomentumTrace) {
  std::vector<Parameter<double>> ps{{"w", Td(Shape{1}, {1.0})}};
  ps[0].tensor.mutable_grad()[0] = 0.5;
  std::vector<std::vector<double>> buf;
  sgd_step(ps, buf, {.lr = 0.1, .weight_decay = 0.0, .momentum = 0.0});
  EXPECT_DOUBLE_EQ(ps[0].tensor.data()[0], 1.0 - 0.1 * 0.5);

  // Two steps at momentum 0.9, wd 0.01, constant g = 1, p0 = 2, lr = 0.5:
  // v1 = 1 + 0.02 = 1.02, p1 = 2 - 0.51 = 1.49
  // v2 = 0.918 + 1 + 0.0149 = 1.9329, p2 = 1.49 - 0.96645 = 0.52355
  std::vector<Parameter<double>> q{{"w", Td(Shape{1}, {2.0})}};
  q[0].tensor.mutable_grad()[0] = 1.0;
  std::vector<std::vector<double>> vb;
  SgdOptions o{.lr = 0.5, .weight_decay = 0.01, .momentum = 0.9};
  sgd_step(q, vb, o);
  EXPECT_NEAR(q[0].tensor.data()[0], 1.49, 1e-15);
  sgd_step(q, vb, o);
  EXPECT_NEAR(q[0].tensor.data()[0], 0.52355, 1e-14);
}

TEST(Sgd, WeightDecayShrinksAndLrZeroIsIdentity) {
  std::vector<Parameter<double>> ps{{"w", Td(Shape{2}, {1.0, -3.0})}};
  std::vector<std::vector<double>> buf;
  sgd_step(ps, buf, {.lr = 0.1, .weight_decay = 0.1, .momentum = 0.9});
  EXPECT_LT(ps[0].tensor.data()[0], 1.0);
  EXPECT_GT(ps[0].tensor.data()[1], -3.0);

  std::mt19937_64 rng(15);
  std::vector<Parameter<double>> r{{"a", random_tensor(Shape{5}, rng)}};
  const std::vector<double> before(r[0].tensor.data().begin(), r[0].tensor.data().end());
  r[0].tensor.mutable_grad()[2] = 4.0;
  std::vector<std::vector<double>> rb;
  sgd_step(r, rb, {.lr = 0.0, .weight_decay = 5e-4, .momentum = 0.9});
  EXPECT_EQ(std::vector<double>(r[0].tensor.data().begin(), r[0].tensor.data().end()), before);
  EXPECT_THROW(sgd_step(r, rb, {.lr = -0.1}), ConfigError);
}

}  // namespace
}  // namespace psumnet

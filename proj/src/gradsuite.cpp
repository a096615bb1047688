#include "psumnet/gradsuite.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "psumnet/errors.hpp"
#include "psumnet/mmdg.hpp"
#include "psumnet/model.hpp"
#include "psumnet/ops.hpp"
#include "psumnet/skeleton.hpp"
#include "psumnet/strb.hpp"

namespace psumnet {

namespace {

using Td = Tensor<double>;
using Inputs = std::vector<Td>;

std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

Td random_input(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = u(rng);
  return Td(std::move(shape), std::move(v));
}

std::vector<int> random_tree(int n, std::mt19937_64& rng) {
  std::vector<int> parent(n, 0);
  for (int i = 1; i < n; ++i) parent[i] = static_cast<int>(uniform_int(rng, 0, i - 1));
  return parent;
}

// Appends every trainable tensor of a module to `inputs`. The tensors are
// shared handles, so perturbing the input perturbs the module.
template <typename Module>
void add_parameters(Module& m, Inputs& inputs) {
  m.visit("m", [&](const std::string&, Td& t, bool trainable) {
    if (trainable) inputs.push_back(t);
  });
}

class Runner {
 public:
  Runner(std::uint64_t seed, double tol, std::vector<GradCase>& out,
         const std::function<void(const GradCase&)>& progress)
      : seed_(seed), tol_(tol), out_(out), progress_(progress) {}

  void check(const std::string& module, const std::string& name, const ScalarFn& f,
             Inputs inputs, GradCheckOptions opts = {}) {
    opts.tol = tol_;
    opts.seed = seed_;
    GradCase c{module, name, seed_, grad_check(f, std::move(inputs), opts)};
    if (progress_) progress_(c);
    out_.push_back(std::move(c));
  }
  // Scalar probe of a tensor-valued function.
  void check_op(const std::string& name, const std::function<Td(const Inputs&)>& f,
                Inputs inputs) {
    const std::uint64_t s = seed_;
    check("ops", name, [f, s](const Inputs& in) { return random_projection(f(in), s); },
          std::move(inputs));
  }

 private:
  std::uint64_t seed_;
  double tol_;
  std::vector<GradCase>& out_;
  const std::function<void(const GradCase&)>& progress_;
};

void ops_cases(Runner& r, std::mt19937_64& rng) {
  const auto b = uniform_int(rng, 1, 3), c = uniform_int(rng, 1, 4), t = uniform_int(rng, 3, 6),
             n = uniform_int(rng, 1, 4);
  const Shape x4{b, c, t, n};

  r.check_op("add", [](const Inputs& in) { return add(in[0], in[1]); },
             {random_input(x4, rng), random_input(Shape{t, n}, rng)});
  r.check_op("sub", [](const Inputs& in) { return sub(in[0], in[1]); },
             {random_input(x4, rng), random_input(Shape{n}, rng)});
  r.check_op("mul", [](const Inputs& in) { return mul(in[0], in[1]); },
             {random_input(x4, rng), random_input(x4, rng)});
  const double factor = std::uniform_real_distribution<double>(-2, 2)(rng);
  r.check_op("scale", [factor](const Inputs& in) { return scale(in[0], factor); },
             {random_input(x4, rng)});
  r.check("ops", "sum", [](const Inputs& in) { return sum(in[0]); }, {random_input(x4, rng)});
  const auto k = uniform_int(rng, 1, 4), m = uniform_int(rng, 1, 4);
  r.check_op("matmul", [](const Inputs& in) { return matmul(in[0], in[1]); },
             {random_input(Shape{b, m, k}, rng), random_input(Shape{k, n}, rng)});
  r.check_op("transpose_last2", [](const Inputs& in) { return transpose_last2(in[0]); },
             {random_input(x4, rng)});
  std::vector<int> order{0, 1, 2, 3};
  std::shuffle(order.begin(), order.end(), rng);
  r.check_op("permute", [order](const Inputs& in) { return permute(in[0], order); },
             {random_input(x4, rng)});
  r.check_op("reshape", [=](const Inputs& in) { return reshape(in[0], Shape{b * c, t * n}); },
             {random_input(x4, rng)});
  const int axis = static_cast<int>(uniform_int(rng, 0, 3));
  std::vector<std::int64_t> dims = x4.dims();
  dims[axis] = uniform_int(rng, 1, 3);
  const Shape other(dims);
  r.check_op("concat", [axis](const Inputs& in) { return concat<double>({in[0], in[1]}, axis); },
             {random_input(x4, rng), random_input(other, rng)});

  Conv2dOptions conv{.stride_t = uniform_int(rng, 1, 2), .dilation_t = uniform_int(rng, 1, 2),
                     .pad_t = uniform_int(rng, 0, 2)};
  const auto co = uniform_int(rng, 1, 4), kt = uniform_int(rng, 1, 3), kn = uniform_int(rng, 1, n);
  const auto frames = std::max<std::int64_t>(t, conv.dilation_t * (kt - 1) + 1);
  r.check_op("conv2d", [conv](const Inputs& in) { return conv2d(in[0], in[1], conv); },
             {random_input(Shape{b, c, frames, n}, rng), random_input(Shape{co, c, kt, kn}, rng)});
  r.check_op("pointwise_conv", [](const Inputs& in) { return pointwise_conv(in[0], in[1]); },
             {random_input(x4, rng), random_input(Shape{co, c}, rng)});
  r.check_op("temporal_pool", [](const Inputs& in) { return temporal_pool(in[0]); },
             {random_input(x4, rng)});
  r.check_op("global_avg_pool", [](const Inputs& in) { return global_avg_pool(in[0]); },
             {random_input(x4, rng)});
  const auto pool_stride = uniform_int(rng, 1, 2);
  r.check_op("temporal_max_pool",
             [pool_stride](const Inputs& in) { return temporal_max_pool(in[0], 3, pool_stride, 1); },
             {random_input(x4, rng)});
  r.check_op("relu", [](const Inputs& in) { return relu(in[0]); }, {random_input(x4, rng)});
  r.check_op("tanh", [](const Inputs& in) { return tanh(in[0]); }, {random_input(x4, rng)});
  r.check_op("softmax", [](const Inputs& in) { return softmax(in[0]); },
             {random_input(Shape{b, k + 1}, rng)});
  for (bool training : {true, false}) {
    Td mean = random_input(Shape{c}, rng);
    Td var(Shape{c}, 1.0);
    for (auto& v : var.data()) v = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
    r.check_op(training ? "batch_norm_2d.train" : "batch_norm_2d.eval",
               [=](const Inputs& in) {
                 Td m = mean.clone(), v = var.clone();
                 return batch_norm_2d(in[0], in[1], in[2], m, v, training);
               },
               {random_input(Shape{b + 1, c, t, n}, rng), random_input(Shape{c}, rng),
                random_input(Shape{c}, rng)});
  }
  std::vector<int> labels(b);
  for (auto& l : labels) l = static_cast<int>(uniform_int(rng, 0, k));
  r.check("ops", "cross_entropy", [labels](const Inputs& in) { return cross_entropy(in[0], labels); },
          {random_input(Shape{b, k + 1}, rng)});
  r.check_op("linear", [](const Inputs& in) { return linear(in[0], in[1], in[2]); },
             {random_input(Shape{b, c}, rng), random_input(Shape{co, c}, rng),
              random_input(Shape{co}, rng)});
  const auto group = uniform_int(rng, 1, 3);
  std::vector<double> weights(static_cast<std::size_t>(b * group));
  for (auto& w : weights) w = std::uniform_real_distribution<double>(0.1, 1)(rng);
  r.check_op("weighted_group_mean",
             [weights, group](const Inputs& in) { return weighted_group_mean<double>(in[0], weights, group); },
             {random_input(Shape{b * group, k}, rng)});
}

void mmdg_cases(Runner& r, std::mt19937_64& rng) {
  const auto b = uniform_int(rng, 1, 2), t = uniform_int(rng, 2, 5), n = uniform_int(rng, 1, 6),
             m = uniform_int(rng, 1, 2);
  const auto parent = random_tree(static_cast<int>(n), rng);
  const Shape x{b, 3, t, n, m};
  auto run = [&](const std::string& name, const std::function<Td(const Inputs&)>& f) {
    const std::uint64_t s = rng();
    r.check("mmdg", name, [f, s](const Inputs& in) { return random_projection(f(in), s); },
            {random_input(x, rng)});
  };
  run("compute_bone", [parent](const Inputs& in) { return compute_bone(in[0], parent); });
  run("compute_velocity", [](const Inputs& in) { return compute_velocity(in[0]); });
  ModalitySelection sel;
  do {
    const auto bits = rng();
    sel = {bool(bits & 1), bool(bits & 2), bool(bits & 4), bool(bits & 8)};
  } while (sel.count() == 0);
  run("assemble[" + sel.str() + "]",
      [parent, sel](const Inputs& in) { return assemble(in[0], parent, sel); });
  run("fold_persons", [](const Inputs& in) { return fold_persons(in[0]); });
}

void samg_cases(Runner& r, std::mt19937_64& rng, std::uint64_t seed) {
  const auto n = uniform_int(rng, 2, 6), cin = uniform_int(rng, 1, 6), cout = uniform_int(rng, 1, 6);
  SamgOptions opts;
  opts.attention = seed % 2 ? AttentionMode::kShared : AttentionMode::kChannelwise;
  opts.sigma = seed % 3 == 2 ? SigmaMode::kConv : SigmaMode::kTanh;
  Samg<double> samg(cin, cout, build_adjacency<double>(random_tree(static_cast<int>(n), rng)), opts, rng);
  samg.alpha.data()[0] = 0.5;
  Inputs inputs{random_input(Shape{uniform_int(rng, 1, 2), cin, uniform_int(rng, 1, 5), n}, rng)};
  add_parameters(samg, inputs);
  r.check("samg", "samg_forward",
          [&samg, seed](const Inputs& in) { return random_projection(samg.forward(in[0]), seed); },
          std::move(inputs));
}

void trm_cases(Runner& r, std::mt19937_64& rng, std::uint64_t seed) {
  const auto stride = uniform_int(rng, 1, 2), cin = uniform_int(rng, 2, 6);
  Trm<double> trm(cin, 4 * uniform_int(rng, 1, 2), stride, default_trm_branches(), rng);
  Inputs inputs{random_input(Shape{2, cin, uniform_int(rng, 5, 8), uniform_int(rng, 1, 4)}, rng)};
  add_parameters(trm, inputs);
  r.check("trm", "trm_forward",
          [&trm, seed](const Inputs& in) { return random_projection(trm.forward(in[0], true), seed); },
          std::move(inputs));
}

void strb_cases(Runner& r, std::mt19937_64& rng, std::uint64_t seed) {
  const int n = static_cast<int>(uniform_int(rng, 2, 4));
  Strb<double> block({.in_channels = 4, .out_channels = 8, .stride = seed % 2 ? 2 : 1},
                     build_adjacency<double>(random_tree(n, rng)), rng);
  block.samg.alpha.data()[0] = 0.6;
  Inputs inputs{random_input(Shape{2, 4, 6, n}, rng)};
  add_parameters(block, inputs);
  r.check("strb", "strb_forward",
          [&block, seed](const Inputs& in) { return random_projection(block.forward(in[0], true), seed); },
          std::move(inputs));
}

// Six narrow blocks on the 13-joint hands group, two samples with three
// person rows, through the cross-entropy loss.
void stream_cases(Runner& r, std::mt19937_64& rng, std::uint64_t seed) {
  ModelConfig cfg = default_model_config("ntu25", 3);
  cfg.window = 20;
  cfg.streams = {default_stream_config(Part::kHands, 3)};
  cfg.streams[0].channels.assign(6, 8);
  cfg.fusion_weights = {1};
  cfg.seed = seed;
  Model<double> model(cfg);
  Stream<double>& s = *model.stream(Part::kHands);
  for (auto& b : s.blocks) b.samg.alpha.data()[0] = 0.5;
  StreamBatch<double> batch;
  batch.samples = 2;
  batch.owner = {0, 1, 1};
  batch.labels = {static_cast<int>(seed % 3), 2};
  batch.coords = random_input(Shape{3, 3, 20, 13, 1}, rng);
  Inputs inputs{batch.coords};
  for (auto& p : s.parameters()) inputs.push_back(p.tensor);
  r.check("stream", "hands_stream_loss",
          [&s, &batch](const Inputs&) { return cross_entropy(s.logits(batch, true), batch.labels); },
          std::move(inputs), {.eps = 1e-7, .max_coords_per_input = 2});
}

}  // namespace

const std::vector<std::string>& grad_modules() {
  static const std::vector<std::string> modules = {"ops", "mmdg", "samg", "trm", "strb", "stream"};
  return modules;
}

std::vector<GradCase> run_grad_suite(const std::string& module, std::uint64_t first_seed,
                                     int seeds, double tol,
                                     const std::function<void(const GradCase&)>& progress) {
  const auto& all = grad_modules();
  if (module != "all" && std::find(all.begin(), all.end(), module) == all.end()) {
    throw ConfigError("unknown gradcheck module '" + module + "'");
  }
  if (seeds < 1) throw ConfigError("gradcheck needs at least one seed");
  std::vector<GradCase> out;
  for (const auto& m : all) {
    if (module != "all" && module != m) continue;
    for (int i = 0; i < seeds; ++i) {
      const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(i);
      std::mt19937_64 rng(seed * 7919 + std::hash<std::string>{}(m));
      Runner r(seed, tol, out, progress);
      if (m == "ops") ops_cases(r, rng);
      if (m == "mmdg") mmdg_cases(r, rng);
      if (m == "samg") samg_cases(r, rng, seed);
      if (m == "trm") trm_cases(r, rng, seed);
      if (m == "strb") strb_cases(r, rng, seed);
      if (m == "stream") stream_cases(r, rng, seed);
    }
  }
  return out;
}

}  // namespace psumnet

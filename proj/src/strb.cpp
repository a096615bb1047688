#include "psumnet/strb.hpp"

#include <algorithm>
#include <cmath>

#include "psumnet/errors.hpp"
#include "psumnet/ops.hpp"

namespace psumnet {

template <typename T>
Tensor<T> kaiming_fan_out(Shape shape, std::mt19937_64& rng) {
  std::int64_t fan_out = shape[0];
  for (std::size_t i = 2; i < shape.rank(); ++i) fan_out *= shape[i];
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_out)));
  std::vector<T> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

namespace {

template <typename T>
Tensor<T> trainable(Shape shape, T fill) {
  Tensor<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

// Weight stored as [Cout, Cin, 1, 1]; strided when needed.
template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride) {
  return conv2d(x, w, {.stride_t = stride});
}

}  // namespace

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels)
    : weight(trainable<T>(Shape{channels}, T(1))),
      bias(trainable<T>(Shape{channels}, T(0))),
      running_mean(Shape{channels}, T(0)),
      running_var(Shape{channels}, T(1)) {}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  return batch_norm_2d(x, weight, bias, running_mean, running_var, training);
}

template <typename T>
void BatchNorm2d<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) {
  fn(prefix + ".weight", weight, true);
  fn(prefix + ".bias", bias, true);
  fn(prefix + ".running_mean", running_mean, false);
  fn(prefix + ".running_var", running_var, false);
}

std::int64_t reduced_channels(std::int64_t in_channels) { return std::max<std::int64_t>(in_channels / 8, 8); }

template <typename T>
Samg<T>::Samg(std::int64_t cin, std::int64_t cout, Tensor<T> adj, SamgOptions o,
              std::mt19937_64& rng)
    : in_channels(cin), out_channels(cout), reduced(reduced_channels(cin)), opts(o),
      adjacency(std::move(adj)) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw DimensionError("SAMG adjacency must be square, got " + adjacency.shape().str());
  }
  theta = kaiming_fan_out<T>(Shape{cout, cin}, rng);
  phi = kaiming_fan_out<T>(Shape{reduced, cin}, rng);
  psi = kaiming_fan_out<T>(Shape{reduced, cin}, rng);
  if (opts.sigma == SigmaMode::kConv) sigma = kaiming_fan_out<T>(Shape{reduced, reduced}, rng);
  const std::int64_t maps = opts.attention == AttentionMode::kChannelwise ? cout : 1;
  expand = kaiming_fan_out<T>(Shape{maps, reduced}, rng);
  alpha = trainable<T>(Shape{1}, T(0));
}

template <typename T>
Tensor<T> Samg<T>::attention(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != in_channels || x.dim(3) != adjacency.dim(0)) {
    throw DimensionError("SAMG expects [B," + std::to_string(in_channels) + ",T," +
                         std::to_string(adjacency.dim(0)) + "], got " + x.shape().str());
  }
  const std::int64_t b = x.dim(0), n = x.dim(3);
  Tensor<T> p = temporal_pool(pointwise_conv(x, phi));  // [B, Cr, N]
  Tensor<T> q = temporal_pool(pointwise_conv(x, psi));
  Tensor<T> d = sub(reshape(p, Shape{b, reduced, n, 1}), reshape(q, Shape{b, reduced, 1, n}));
  Tensor<T> s = opts.sigma == SigmaMode::kTanh ? tanh(d) : pointwise_conv(d, sigma);
  return pointwise_conv(s, expand);
}

template <typename T>
Tensor<T> Samg<T>::forward(const Tensor<T>& x) const {
  Tensor<T> m = attention(x);
  Tensor<T> hybrid = add(mul(m, alpha), adjacency);  // [B, Cout|1, N, N]
  Tensor<T> tx = pointwise_conv(x, theta);            // [B, Cout, T, N]
  return matmul(tx, transpose_last2(hybrid));
}

template <typename T>
void Samg<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) {
  fn(prefix + ".theta.weight", theta, true);
  fn(prefix + ".phi.weight", phi, true);
  fn(prefix + ".psi.weight", psi, true);
  if (sigma.defined()) fn(prefix + ".sigma.weight", sigma, true);
  fn(prefix + ".expand.weight", expand, true);
  fn(prefix + ".alpha", alpha, true);
}

std::vector<TrmBranchSpec> default_trm_branches() {
  using K = TrmBranchSpec::Kind;
  return {{K::kConv, 5, 1}, {K::kConv, 5, 2}, {K::kMaxPool, 3, 1}, {K::kPointwise, 1, 1}};
}

template <typename T>
Trm<T>::Trm(std::int64_t cin, std::int64_t cout, std::int64_t s, std::vector<TrmBranchSpec> specs,
            std::mt19937_64& rng)
    : stride(s) {
  if (specs.empty()) throw ConfigError("TRM needs at least one branch");
  if (s < 1) throw ConfigError("TRM stride must be >= 1");
  const auto nb = static_cast<std::int64_t>(specs.size());
  if (cout < nb) {
    throw ConfigError("TRM: " + std::to_string(cout) + " channels cannot feed " +
                      std::to_string(nb) + " branches");
  }
  for (std::int64_t i = 0; i < nb; ++i) {
    Branch br;
    br.spec = specs[i];
    // The first branch absorbs the remainder so widths sum to cout.
    br.channels = cout / nb + (i == 0 ? cout % nb : 0);
    br.reduce = kaiming_fan_out<T>(Shape{br.channels, cin, 1, 1}, rng);
    if (br.spec.kind != TrmBranchSpec::Kind::kPointwise) br.reduce_bn = BatchNorm2d<T>(br.channels);
    if (br.spec.kind == TrmBranchSpec::Kind::kConv) {
      if (br.spec.kernel < 1 || br.spec.kernel % 2 == 0 || br.spec.dilation < 1) {
        throw ConfigError("TRM conv branches need an odd kernel and dilation >= 1");
      }
      br.temporal = kaiming_fan_out<T>(Shape{br.channels, br.channels, br.spec.kernel, 1}, rng);
    }
    br.out_bn = BatchNorm2d<T>(br.channels);
    branches.push_back(std::move(br));
  }
}

template <typename T>
std::int64_t Trm<T>::min_frames() const {
  std::int64_t need = 1;
  for (const auto& br : branches) {
    if (br.spec.kind == TrmBranchSpec::Kind::kPointwise) continue;
    need = std::max(need, br.spec.dilation * (br.spec.kernel - 1) / 2 + 1);
  }
  return need;
}

template <typename T>
Tensor<T> Trm<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() == 4 && x.dim(2) < min_frames()) {
    throw ConfigError("TRM: " + std::to_string(x.dim(2)) + " frames is too short for a dilated "
                      "kernel that needs at least " + std::to_string(min_frames()));
  }
  std::vector<Tensor<T>> outs;
  for (auto& br : branches) {
    Tensor<T> y;
    switch (br.spec.kind) {
      case TrmBranchSpec::Kind::kConv: {
        y = relu(br.reduce_bn.forward(project(x, br.reduce, 1), training));
        const std::int64_t pad = br.spec.dilation * (br.spec.kernel - 1) / 2;
        y = conv2d(y, br.temporal, {.stride_t = stride, .dilation_t = br.spec.dilation, .pad_t = pad});
        break;
      }
      case TrmBranchSpec::Kind::kMaxPool:
        y = relu(br.reduce_bn.forward(project(x, br.reduce, 1), training));
        y = temporal_max_pool(y, br.spec.kernel, stride, br.spec.kernel / 2);
        break;
      case TrmBranchSpec::Kind::kPointwise:
        y = project(x, br.reduce, stride);
        break;
    }
    outs.push_back(br.out_bn.forward(y, training));
  }
  return outs.size() == 1 ? outs.front() : concat(outs, 1);
}

template <typename T>
void Trm<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) {
  for (std::size_t i = 0; i < branches.size(); ++i) {
    auto& br = branches[i];
    const std::string p = prefix + ".branch" + std::to_string(i);
    fn(p + ".reduce.weight", br.reduce, true);
    if (br.reduce_bn.weight.defined()) br.reduce_bn.visit(p + ".reduce_bn", fn);
    if (br.temporal.defined()) fn(p + ".temporal.weight", br.temporal, true);
    br.out_bn.visit(p + ".bn", fn);
  }
}

template <typename T>
Strb<T>::Strb(const StrbConfig& c, Tensor<T> adj, std::mt19937_64& rng) : cfg(c) {
  if (c.in_channels < 1 || c.out_channels < 1) throw ConfigError("STRB channels must be positive");
  if (c.stride < 1 || c.stride > 2) throw ConfigError("STRB stride must be 1 or 2");
  samg = Samg<T>(c.in_channels, c.out_channels, std::move(adj), c.samg, rng);
  samg_bn = BatchNorm2d<T>(c.out_channels);
  trm = Trm<T>(c.out_channels, c.out_channels, c.stride, c.trm, rng);
  if (c.in_channels != c.out_channels || c.stride != 1) {
    residual = kaiming_fan_out<T>(Shape{c.out_channels, c.in_channels, 1, 1}, rng);
    residual_bn = BatchNorm2d<T>(c.out_channels);
  }
}

template <typename T>
Tensor<T> Strb<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> s = relu(samg_bn.forward(samg.forward(x), training));
  Tensor<T> y = trm.forward(s, training);
  Tensor<T> r = has_projection() ? residual_bn.forward(project(x, residual, cfg.stride), training) : x;
  return relu(add(y, r));
}

template <typename T>
void Strb<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) {
  samg.visit(prefix + ".samg", fn);
  samg_bn.visit(prefix + ".samg.bn", fn);
  trm.visit(prefix + ".trm", fn);
  if (has_projection()) {
    fn(prefix + ".residual.weight", residual, true);
    residual_bn.visit(prefix + ".residual.bn", fn);
  }
}

template <typename T>
Tensor<T> strm_forward(const Tensor<T>& x, std::vector<Strb<T>>& blocks, bool training) {
  Tensor<T> y = x;
  for (auto& b : blocks) y = b.forward(y, training);
  return y;
}

#define PSUMNET_INSTANTIATE_STRB(T)                                                        \
  template class BatchNorm2d<T>;                                                           \
  template class Samg<T>;                                                                  \
  template class Trm<T>;                                                                   \
  template class Strb<T>;                                                                  \
  template Tensor<T> strm_forward(const Tensor<T>&, std::vector<Strb<T>>&, bool);          \
  template Tensor<T> kaiming_fan_out<T>(Shape, std::mt19937_64&);

PSUMNET_INSTANTIATE_STRB(float)
PSUMNET_INSTANTIATE_STRB(double)

}  // namespace psumnet

#include "psumnet/optim.hpp"

#include <cmath>

#include "psumnet/errors.hpp"

namespace psumnet {

template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, std::vector<std::vector<T>>& buffers,
              const SgdOptions& opts) {
  if (!std::isfinite(opts.lr) || opts.lr < 0.0) {
    throw ConfigError("sgd_step: learning rate must be finite and >= 0, got " +
                      std::to_string(opts.lr));
  }
  if (opts.weight_decay < 0.0 || opts.momentum < 0.0) {
    throw ConfigError("sgd_step: weight decay and momentum must be >= 0");
  }
  if (buffers.empty()) {
    buffers.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      buffers[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), T(0));
    }
  }
  if (buffers.size() != params.size()) {
    throw DimensionError("sgd_step: " + std::to_string(buffers.size()) +
                         " momentum buffers for " + std::to_string(params.size()) +
                         " parameters");
  }
  const T lr = static_cast<T>(opts.lr);
  const T wd = static_cast<T>(opts.weight_decay);
  const T mom = static_cast<T>(opts.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto p = t.data();
    auto g = t.grad();
    auto& v = buffers[i];
    if (v.size() != p.size()) {
      throw DimensionError("sgd_step: momentum buffer size mismatch for " + params[i].name);
    }
    const bool has_g = !g.empty();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T grad = has_g ? g[j] : T(0);
      v[j] = mom * v[j] + (grad + wd * p[j]);
      if (lr != T(0)) p[j] -= lr * v[j];
    }
  }
}

template void sgd_step<float>(std::vector<Parameter<float>>&, std::vector<std::vector<float>>&,
                              const SgdOptions&);
template void sgd_step<double>(std::vector<Parameter<double>>&,
                               std::vector<std::vector<double>>&, const SgdOptions&);

}  // namespace psumnet

#pragma once

#include <string>
#include <vector>

#include "psumnet/tensor.hpp"

namespace psumnet {

/// A learnable tensor with its dotted path in the model, e.g.
/// "body.strb3.samg.theta.weight".
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

struct SgdOptions {
  double lr = 0.1;
  double weight_decay = 5e-4;
  double momentum = 0.9;
};

/// Momentum SGD with coupled weight decay, in place:
///   v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
/// `buffers` holds one velocity per parameter and is sized on first use.
/// Parameters without an accumulated gradient are treated as g = 0.
/// Throws ConfigError for a negative or non-finite lr; lr = 0 leaves every
/// parameter unchanged.
template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, std::vector<std::vector<T>>& buffers,
              const SgdOptions& opts);

}  // namespace psumnet

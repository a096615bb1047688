#pragma once

// Central finite-difference check of analytic gradients at 64-bit precision.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psumnet/tensor.hpp"

namespace psumnet {

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-4;
  /// Relative gap between the one-sided slopes above which a coordinate is
  /// treated as straddling a kink.
  double kink_tol = 1e-4;
  /// Coordinates probed per input; 0 checks every element. Sampled
  /// coordinates are drawn without replacement from `seed`.
  std::int64_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t checked = 0;
  /// Coordinates where the two one-sided differences disagree (a kink of
  /// relu/max-pool lies inside the probe interval); excluded from the max.
  std::int64_t non_smooth = 0;
  std::string worst;  ///< "input i, element j" of the largest relative error
  bool passed = false;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares d f / d inputs from backward() against (f(x+eps)-f(x-eps))/2eps.
/// f must return a one-element tensor. Relative error of a coordinate is
/// |a-n| / max(|a|, |n|, floor) with floor = max(1e-3 * max_j |a_j|, 1e-7),
/// so coordinates with tiny gradients are judged against the gradient scale
/// of the whole input rather than against zero.
GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& opts = {});

/// Scalar probe for ops with tensor outputs: sum(out * r) with a fixed
/// pseudo-random r in [-1, 1] drawn from `seed`.
Tensor<double> random_projection(const Tensor<double>& out, std::uint64_t seed);

}  // namespace psumnet

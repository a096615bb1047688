#include "psumnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "psumnet/errors.hpp"
#include "psumnet/ops.hpp"

namespace psumnet {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
  NoGradGuard guard;
  Tensor<double> y = f(inputs);
  if (y.numel() != 1) throw DimensionError("grad_check: f must return one element");
  return y.item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0) || !(opts.tol > 0.0)) {
    throw ConfigError("grad_check: eps and tol must be positive");
  }
  for (auto& in : inputs) {
    in.zero_grad();
    in.set_requires_grad(true);
  }
  {
    Tensor<double> y = f(inputs);
    if (y.numel() != 1) throw DimensionError("grad_check: f must return one element");
    y.backward();
  }

  // The floor uses the largest gradient over all inputs: an input whose true
  // gradient is ~0 (a BN scale feeding another BN) is otherwise judged on
  // rounding noise alone.
  double scale = 0.0;
  for (const auto& in : inputs) {
    for (double a : in.grad()) scale = std::max(scale, std::abs(a));
  }
  const double floor = std::max(1e-3 * scale, 1e-7);

  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double>& x = inputs[i];
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

    std::vector<std::int64_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_input > 0 && opts.max_coords_per_input < x.numel()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }

    auto data = x.data();
    for (std::int64_t j : coords) {
      const double orig = data[j];
      const double f0 = evaluate(f, inputs);
      data[j] = orig + opts.eps;
      const double fp = evaluate(f, inputs);
      data[j] = orig - opts.eps;
      const double fm = evaluate(f, inputs);
      data[j] = orig;

      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double fwd = (fp - f0) / opts.eps;
      const double bwd = (f0 - fm) / opts.eps;
      const double side_floor = std::max({std::abs(fwd), std::abs(bwd), floor});
      ++report.checked;
      // One-sided slopes differ by O(eps * f'') on smooth stretches. A larger
      // gap means a kink sits inside [x-eps, x+eps], and the central
      // difference can then be off by up to half of it.
      if (std::abs(fwd - bwd) / side_floor > opts.kink_tol) {
        ++report.non_smooth;
        continue;
      }
      const double a = analytic[j];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = "input " + std::to_string(i) + ", element " + std::to_string(j);
      }
    }
  }
  // A handful of kinks is expected with relu; a large share would mask errors.
  const bool few_kinks = report.non_smooth * 10 <= report.checked;
  report.passed = report.max_rel_error < opts.tol && few_kinks;
  return report;
}

Tensor<double> random_projection(const Tensor<double>& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> r(out.numel());
  for (auto& v : r) v = u(rng);
  return sum(mul(out, Tensor<double>(out.shape(), std::move(r))));
}

}  // namespace psumnet

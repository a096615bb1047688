#pragma once

// The 64-bit finite-difference suite behind `psumnet gradcheck` and the
// acceptance run: every differentiable op, the MMDG, SAMG, TRM, a full STRB
// and a small hands stream through the loss.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psumnet/gradcheck.hpp"

namespace psumnet {

struct GradCase {
  std::string module;
  std::string name;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

/// "ops", "mmdg", "samg", "trm", "strb", "stream".
const std::vector<std::string>& grad_modules();

/// Runs `module` ("all" or one of grad_modules()) for seeds
/// first_seed .. first_seed + seeds - 1. `progress` sees each case as it
/// finishes. Throws ConfigError for an unknown module.
std::vector<GradCase> run_grad_suite(const std::string& module, std::uint64_t first_seed,
                                     int seeds, double tol = 1e-4,
                                     const std::function<void(const GradCase&)>& progress = {});

}  // namespace psumnet

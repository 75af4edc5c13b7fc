#pragma once

#include <functional>
#include <vector>

#include "barl/autodiff.hpp"

namespace barl {

/// Central finite-difference verification of reverse-mode gradients. Uses
/// only forward evaluations, so it is independent of every backward rule it
/// checks.
struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates sampled per input; -1 checks every coordinate.
  int max_coords = 200;
  uint64_t pick_seed = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  Index coords_checked = 0;
};

/// Builds a scalar expression from leaf handles of `inputs`. Must be a pure
/// function of the tape and inputs (rebuilt for every perturbed evaluation).
using ScalarBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

GradCheckReport check_gradients(const ScalarBuilder& build, std::vector<Tensor> inputs,
                                const GradCheckOptions& opt = {});

}  // namespace barl

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "kla/tensor.hpp"

namespace kla::ad {

struct GradCheckReport {
  std::size_t probes = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  // Location of the worst probe.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct GradCheckOptions {
  std::size_t probes = 200;
  double eps = 1e-5;
  /// Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  std::uint64_t seed = 0;
};

/// Compares `analytic` against central differences (f(x+eps e) - f(x-eps e)) / 2 eps
/// at randomly chosen coordinates of `params`. `loss` must be a pure function
/// of the parameter values. `params` is restored before returning.
GradCheckReport finite_difference_check(const std::function<double(const std::vector<Tensor>&)>& loss,
                                        std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
                                        const GradCheckOptions& options = {});

}  // namespace kla::ad

#include "kla/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kla/rng.hpp"

namespace kla::ad {

GradCheckReport finite_difference_check(const std::function<double(const std::vector<Tensor>&)>& loss,
                                        std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
                                        const GradCheckOptions& options) {
  if (!(options.eps > 0)) throw std::invalid_argument("finite_difference_check: eps must be > 0");
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("finite_difference_check: one analytic gradient per parameter required");
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != analytic[i].size()) {
      throw std::invalid_argument("finite_difference_check: gradient shape mismatch for parameter " +
                                  std::to_string(i));
    }
    total += params[i].size();
  }
  GradCheckReport report;
  if (total == 0) return report;

  auto rng = rng::engine({options.seed, 0x67726164ULL});
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t probe = 0; probe < options.probes; ++probe) {
    std::size_t flat = pick(rng);
    std::size_t ti = 0;
    while (flat >= params[ti].size()) flat -= params[ti++].size();
    double& x = params[ti].data[flat];
    const double saved = x;
    x = saved + options.eps;
    const double up = loss(params);
    x = saved - options.eps;
    const double down = loss(params);
    x = saved;
    const double numeric = (up - down) / (2.0 * options.eps);
    const double a = analytic[ti].data[flat];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    ++report.probes;
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_tensor = ti;
      report.worst_index = flat;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace kla::ad

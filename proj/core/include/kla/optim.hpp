#pragma once

#include <cstddef>
#include <vector>

#include "kla/tensor.hpp"

namespace kla::ad {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global L2 norm threshold; <= 0 disables clipping.
  double grad_clip = 5.0;
};

/// Decoupled-weight-decay Adam with bias correction and global-norm clipping.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Clips `grads` in place to the configured global norm, then updates
  /// `params`. Returns the pre-clip global norm. Moment buffers are created on
  /// the first call and keyed by position.
  double step(const std::vector<Tensor*>& params, std::vector<Tensor>& grads);

  [[nodiscard]] std::size_t steps() const { return step_; }
  [[nodiscard]] const AdamWConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<Tensor>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// Scales `grads` so their joint L2 norm is at most max_norm; returns the
/// original norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace kla::ad

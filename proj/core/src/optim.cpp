#include "kla/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kla::ad {

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0;
  for (const Tensor& g : grads) {
    for (const double v : g.data) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.data) v *= scale;
    }
  }
  return norm;
}

double AdamW::step(const std::vector<Tensor*>& params, std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("AdamW::step: one gradient per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape != grads[i].shape) {
      throw std::invalid_argument("AdamW::step: gradient shape " + shape_string(grads[i].shape) +
                                  " does not match parameter " + shape_string(params[i]->shape));
    }
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape);
      v_.emplace_back(p->shape);
    }
  } else if (m_.size() != params.size()) {
    throw std::invalid_argument("AdamW::step: parameter list changed between steps");
  }
  const double norm = clip_global_norm(grads, config_.grad_clip);
  ++step_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m.data[j] = config_.beta1 * m.data[j] + (1.0 - config_.beta1) * g.data[j];
      v.data[j] = config_.beta2 * v.data[j] + (1.0 - config_.beta2) * g.data[j] * g.data[j];
      const double update = (m.data[j] / c1) / (std::sqrt(v.data[j] / c2) + config_.eps);
      p.data[j] -= config_.lr * (update + config_.weight_decay * p.data[j]);
    }
  }
  return norm;
}

}  // namespace kla::ad

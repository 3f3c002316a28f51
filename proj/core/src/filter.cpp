#include "kla/filter.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "kla/error.hpp"

namespace kla::filter {

namespace {

template <typename T>
std::size_t dyn_index(const Dynamics<T>& dyn, std::size_t lane) {
  return lane % dyn.size();
}

template <typename T>
void check_dynamics(const Dynamics<T>& dyn, std::size_t lanes) {
  if (dyn.a_bar.empty() || dyn.a_bar.size() != dyn.p_bar.size()) {
    throw std::invalid_argument("dynamics: a_bar and p_bar must be non-empty and equal length");
  }
  if (lanes % dyn.size() != 0) {
    throw std::invalid_argument("dynamics size " + std::to_string(dyn.size()) + " does not divide lane count " +
                                std::to_string(lanes));
  }
}

template <typename T>
std::size_t steps_for(std::size_t total, std::size_t lanes, const char* what) {
  if (lanes == 0 || total == 0 || total % lanes != 0) {
    throw std::invalid_argument(std::string(what) + ": size " + std::to_string(total) +
                                " is not a positive multiple of lane count " + std::to_string(lanes));
  }
  return total / lanes;
}

}  // namespace

template <std::floating_point T>
std::pair<T, T> ou_discretize(T a, T p, T delta) {
  if (!(a > T{0})) throw std::invalid_argument("ou_discretize: decay rate a must be > 0");
  if (!(delta > T{0})) throw std::invalid_argument("ou_discretize: timestep must be > 0");
  const T x = a * delta;
  if (x < T(kSmallArgument)) return {T{1} - x, p * p * delta};
  const T a_bar = std::exp(-x);
  const T p_bar = p * p / (T{2} * a) * -std::expm1(T{-2} * x);
  return {a_bar, p_bar};
}

template <std::floating_point T>
Dynamics<T> ou_discretize(const OUParams<T>& params) {
  const std::size_t n = params.a.size();
  if (params.p.size() != n || params.delta.size() != n) {
    throw std::invalid_argument("ou_discretize: a, p, delta must have equal shapes");
  }
  Dynamics<T> dyn;
  dyn.a_bar.resize(n);
  dyn.p_bar.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::tie(dyn.a_bar[i], dyn.p_bar[i]) = ou_discretize(params.a[i], params.p[i], params.delta[i]);
  }
  return dyn;
}

template <std::floating_point T>
Dynamics<T> euler_discretize(const OUParams<T>& params) {
  const std::size_t n = params.a.size();
  if (params.p.size() != n || params.delta.size() != n) {
    throw std::invalid_argument("euler_discretize: a, p, delta must have equal shapes");
  }
  Dynamics<T> dyn;
  dyn.a_bar.resize(n);
  dyn.p_bar.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(params.a[i] > T{0})) throw std::invalid_argument("euler_discretize: decay rate a must be > 0");
    dyn.a_bar[i] = T{1} - params.a[i] * params.delta[i];
    dyn.p_bar[i] = params.p[i] * params.p[i] * params.delta[i];
  }
  return dyn;
}

template <std::floating_point T>
Evidence<T> expand_evidence(std::span<const T> k, std::span<const T> v, std::span<const T> lambda_v,
                            std::size_t steps, std::size_t slots, std::size_t channels) {
  if (k.size() != steps * slots || v.size() != steps * channels || lambda_v.size() != steps * channels) {
    throw std::invalid_argument("expand_evidence: shape mismatch");
  }
  Evidence<T> ev;
  ev.steps = steps;
  ev.lanes = slots * channels;
  ev.k.resize(steps * ev.lanes);
  ev.v.resize(steps * ev.lanes);
  ev.lambda_v.resize(steps * ev.lanes);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t n = 0; n < slots; ++n) {
      for (std::size_t d = 0; d < channels; ++d) {
        const std::size_t i = t * ev.lanes + n * channels + d;
        ev.k[i] = k[t * slots + n];
        ev.v[i] = v[t * channels + d];
        ev.lambda_v[i] = lambda_v[t * channels + d];
      }
    }
  }
  return ev;
}

template <std::floating_point T>
std::vector<T> compute_phi(std::span<const T> k, std::span<const T> lambda_v) {
  std::vector<T> phi(k.size() * lambda_v.size());
  for (std::size_t n = 0; n < k.size(); ++n) {
    for (std::size_t d = 0; d < lambda_v.size(); ++d) {
      if (!(lambda_v[d] > T{0})) throw std::invalid_argument("compute_phi: value precision must be > 0");
      phi[n * lambda_v.size() + d] = k[n] * k[n] * lambda_v[d];
    }
  }
  return phi;
}

template <std::floating_point T>
std::vector<T> evidence_precision(const Evidence<T>& ev) {
  std::vector<T> phi(ev.k.size());
  for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = ev.k[i] * ev.k[i] * ev.lambda_v[i];
  return phi;
}

template <std::floating_point T>
std::vector<T> evidence_drive(const Evidence<T>& ev) {
  std::vector<T> drive(ev.k.size());
  for (std::size_t i = 0; i < drive.size(); ++i) drive[i] = ev.k[i] * ev.lambda_v[i] * ev.v[i];
  return drive;
}

template <std::floating_point T>
std::vector<scan::Mobius<T>> build_mobius_elements(const Dynamics<T>& dyn, std::span<const T> phi,
                                                   std::size_t lanes) {
  check_dynamics(dyn, lanes);
  const std::size_t steps = steps_for<T>(phi.size(), lanes, "build_mobius_elements");
  std::vector<scan::Mobius<T>> out(phi.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t j = dyn_index(dyn, l);
      const T a2 = dyn.a_bar[j] * dyn.a_bar[j];
      const T pb = dyn.p_bar[j];
      const T ph = phi[t * lanes + l];
      out[t * lanes + l] = {T{1} + pb * ph, a2 * ph, pb, a2};
    }
  }
  return out;
}

template <std::floating_point T>
std::vector<T> precision_path(const Dynamics<T>& dyn, std::span<const T> phi, std::span<const T> lambda0,
                              const scan::ScanPlan& plan) {
  const std::size_t lanes = lambda0.size();
  auto elements = build_mobius_elements(dyn, phi, lanes);
  scan::ScanPlan p = plan;
  p.length = phi.size() / lanes;
  p.lanes = lanes;
  scan::mobius_scan<T>(elements, p);
  std::vector<T> lambda(phi.size());
  for (std::size_t t = 0; t < p.length; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      lambda[t * lanes + l] = scan::mobius_apply(elements[t * lanes + l], lambda0[l]);
    }
  }
  return lambda;
}

template <std::floating_point T>
std::vector<scan::Affine<T>> build_affine_elements(const Dynamics<T>& dyn, std::span<const T> lambda_path,
                                                   std::span<const T> lambda0, std::span<const T> drive) {
  const std::size_t lanes = lambda0.size();
  check_dynamics(dyn, lanes);
  const std::size_t steps = steps_for<T>(lambda_path.size(), lanes, "build_affine_elements");
  if (drive.size() != lambda_path.size()) throw std::invalid_argument("build_affine_elements: drive shape mismatch");
  std::vector<scan::Affine<T>> out(lambda_path.size());
  for (std::size_t t = 0; t < steps; ++t) {
    const T* prev = t == 0 ? lambda0.data() : lambda_path.data() + (t - 1) * lanes;
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t j = dyn_index(dyn, l);
      const T a = dyn.a_bar[j];
      out[t * lanes + l] = {a / (a * a + dyn.p_bar[j] * prev[l]), drive[t * lanes + l]};
    }
  }
  return out;
}

template <std::floating_point T>
MeanPath<T> mean_path(std::span<const scan::Affine<T>> elements, std::span<const T> eta0,
                      std::span<const T> lambda_path, const scan::ScanPlan& plan) {
  const std::size_t lanes = eta0.size();
  const std::size_t steps = steps_for<T>(elements.size(), lanes, "mean_path");
  if (lambda_path.size() != elements.size()) throw std::invalid_argument("mean_path: precision path shape mismatch");
  std::vector<scan::Affine<T>> prefix(elements.begin(), elements.end());
  scan::ScanPlan p = plan;
  p.length = steps;
  p.lanes = lanes;
  scan::affine_scan<T>(prefix, p);
  MeanPath<T> out;
  out.eta.resize(elements.size());
  out.mu.resize(elements.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t i = t * lanes + l;
      out.eta[i] = scan::affine_apply(prefix[i], eta0[l]);
      if (lambda_path[i] == T{0}) {
        throw DomainError("mean_path: zero precision at step " + std::to_string(t) + ", lane " + std::to_string(l));
      }
      out.mu[i] = out.eta[i] / lambda_path[i];
    }
  }
  return out;
}

template <std::floating_point T>
BeliefPath<T> recurrent_filter(const Dynamics<T>& dyn, std::span<const T> phi, std::span<const T> drive,
                               std::span<const T> lambda0, std::span<const T> eta0) {
  const std::size_t lanes = lambda0.size();
  check_dynamics(dyn, lanes);
  const std::size_t steps = steps_for<T>(phi.size(), lanes, "recurrent_filter");
  if (drive.size() != phi.size() || eta0.size() != lanes) {
    throw std::invalid_argument("recurrent_filter: drive and initial state shapes must match");
  }
  const std::size_t period = dyn.size();
  BeliefPath<T> out;
  out.steps = steps;
  out.lanes = lanes;
  out.lambda.resize(phi.size());
  out.eta.resize(phi.size());
  out.mu.resize(phi.size());
  out.gate.resize(phi.size());
  for (std::size_t t = 0; t < steps; ++t) {
    const T* lam_prev = t == 0 ? lambda0.data() : out.lambda.data() + (t - 1) * lanes;
    const T* eta_prev = t == 0 ? eta0.data() : out.eta.data() + (t - 1) * lanes;
    const std::size_t row = t * lanes;
    // Dynamics repeat every `period` lanes; walking blocks avoids a modulus.
    for (std::size_t base = 0; base < lanes; base += period) {
      for (std::size_t j = 0; j < period; ++j) {
        const std::size_t l = base + j, i = row + l;
        const T a = dyn.a_bar[j];
        const T den = a * a + dyn.p_bar[j] * lam_prev[l];
        const T lam = lam_prev[l] / den + phi[i];
        if (!(den > T{0}) || lam == T{0}) {
          throw DomainError("recurrent_filter: degenerate precision at step " + std::to_string(t) + ", lane " +
                            std::to_string(l));
        }
        const T gate = a / den;
        const T eta = gate * eta_prev[l] + drive[i];
        out.lambda[i] = lam;
        out.gate[i] = gate;
        out.eta[i] = eta;
        out.mu[i] = eta / lam;
      }
    }
  }
  return out;
}

template <std::floating_point T>
BeliefPath<T> information_filter(const Dynamics<T>& dyn, const Evidence<T>& ev, std::span<const T> lambda0,
                                 std::span<const T> eta0, scan::ScanMode mode) {
  if (lambda0.size() != ev.lanes || eta0.size() != ev.lanes) {
    throw std::invalid_argument("information_filter: initial state must have one entry per lane");
  }
  const auto phi = evidence_precision(ev);
  const auto drive = evidence_drive(ev);
  if (mode == scan::ScanMode::sequential) return recurrent_filter<T>(dyn, phi, drive, lambda0, eta0);
  const scan::ScanPlan plan{ev.steps, ev.lanes, mode, 0};
  BeliefPath<T> out;
  out.steps = ev.steps;
  out.lanes = ev.lanes;
  out.lambda = precision_path<T>(dyn, phi, lambda0, plan);
  const auto elements = build_affine_elements<T>(dyn, out.lambda, lambda0, drive);
  auto mean = mean_path<T>(elements, eta0, out.lambda, plan);
  out.eta = std::move(mean.eta);
  out.mu = std::move(mean.mu);
  out.gate.resize(elements.size());
  for (std::size_t i = 0; i < elements.size(); ++i) out.gate[i] = elements[i].f;
  return out;
}

template <std::floating_point T>
MomentPath<T> recurrent_filter_moment(const Dynamics<T>& dyn, const Evidence<T>& ev, std::span<const T> mu0,
                                      std::span<const T> sigma0) {
  const std::size_t lanes = ev.lanes;
  check_dynamics(dyn, lanes);
  if (mu0.size() != lanes || sigma0.size() != lanes) {
    throw std::invalid_argument("recurrent_filter_moment: initial state must have one entry per lane");
  }
  std::vector<T> mu(mu0.begin(), mu0.end());
  std::vector<T> sigma(sigma0.begin(), sigma0.end());
  for (const T s : sigma) {
    if (!(s > T{0})) throw std::invalid_argument("recurrent_filter_moment: sigma0 must be > 0");
  }
  MomentPath<T> out;
  out.mu.resize(ev.steps * lanes);
  out.sigma.resize(ev.steps * lanes);
  for (std::size_t t = 0; t < ev.steps; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t j = dyn_index(dyn, l);
      const std::size_t i = t * lanes + l;
      const T a = dyn.a_bar[j];
      const T mu_prior = a * mu[l];
      const T sigma_prior = a * a * sigma[l] + dyn.p_bar[j];
      const T k = ev.k[i];
      const T gain = sigma_prior * k / (k * k * sigma_prior + T{1} / ev.lambda_v[i]);
      mu[l] = mu_prior + gain * (ev.v[i] - k * mu_prior);
      sigma[l] = (T{1} - gain * k) * sigma_prior;
      out.mu[i] = mu[l];
      out.sigma[i] = sigma[l];
    }
  }
  return out;
}

template <std::floating_point T>
ConvolutionPath<T> lti_convolution_oracle(const Dynamics<T>& dyn, const Evidence<T>& ev,
                                          std::span<const T> lambda0, std::span<const T> eta0) {
  const std::size_t lanes = ev.lanes;
  check_dynamics(dyn, lanes);
  for (const T p : dyn.p_bar) {
    if (p != T{0}) throw std::invalid_argument("lti_convolution_oracle: requires zero process noise");
  }
  for (std::size_t t = 1; t < ev.steps; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      if (ev.k[t * lanes + l] != ev.k[l]) {
        throw std::invalid_argument("lti_convolution_oracle: observation operator must be time-invariant");
      }
    }
  }
  ConvolutionPath<T> out;
  out.lambda.assign(ev.steps * lanes, T{0});
  out.eta.assign(ev.steps * lanes, T{0});
  for (std::size_t l = 0; l < lanes; ++l) {
    const T a = dyn.a_bar[dyn_index(dyn, l)];
    const T k = ev.k[l];
    for (std::size_t t = 1; t <= ev.steps; ++t) {
      T lam = std::pow(a, -T(2 * t)) * lambda0[l];
      T eta = std::pow(a, -T(t)) * eta0[l];
      for (std::size_t s = 1; s <= t; ++s) {
        const std::size_t i = (s - 1) * lanes + l;
        const T lag = T(t - s);
        lam += std::pow(a, T{-2} * lag) * k * k * ev.lambda_v[i];
        eta += std::pow(a, -lag) * k * ev.lambda_v[i] * ev.v[i];
      }
      out.lambda[(t - 1) * lanes + l] = lam;
      out.eta[(t - 1) * lanes + l] = eta;
    }
  }
  return out;
}

#define KLA_INSTANTIATE_FILTER(T)                                                                                \
  template std::pair<T, T> ou_discretize<T>(T, T, T);                                                            \
  template Dynamics<T> ou_discretize<T>(const OUParams<T>&);                                                     \
  template Dynamics<T> euler_discretize<T>(const OUParams<T>&);                                                  \
  template Evidence<T> expand_evidence<T>(std::span<const T>, std::span<const T>, std::span<const T>,            \
                                          std::size_t, std::size_t, std::size_t);                                \
  template std::vector<T> compute_phi<T>(std::span<const T>, std::span<const T>);                                \
  template std::vector<T> evidence_precision<T>(const Evidence<T>&);                                             \
  template std::vector<T> evidence_drive<T>(const Evidence<T>&);                                                 \
  template std::vector<scan::Mobius<T>> build_mobius_elements<T>(const Dynamics<T>&, std::span<const T>,         \
                                                                 std::size_t);                                   \
  template BeliefPath<T> recurrent_filter<T>(const Dynamics<T>&, std::span<const T>, std::span<const T>,        \
                                             std::span<const T>, std::span<const T>);                            \
  template std::vector<T> precision_path<T>(const Dynamics<T>&, std::span<const T>, std::span<const T>,          \
                                            const scan::ScanPlan&);                                              \
  template std::vector<scan::Affine<T>> build_affine_elements<T>(const Dynamics<T>&, std::span<const T>,         \
                                                                 std::span<const T>, std::span<const T>);        \
  template MeanPath<T> mean_path<T>(std::span<const scan::Affine<T>>, std::span<const T>, std::span<const T>,    \
                                    const scan::ScanPlan&);                                                      \
  template BeliefPath<T> information_filter<T>(const Dynamics<T>&, const Evidence<T>&, std::span<const T>,       \
                                               std::span<const T>, scan::ScanMode);                              \
  template MomentPath<T> recurrent_filter_moment<T>(const Dynamics<T>&, const Evidence<T>&, std::span<const T>,  \
                                                    std::span<const T>);                                         \
  template ConvolutionPath<T> lti_convolution_oracle<T>(const Dynamics<T>&, const Evidence<T>&,                  \
                                                        std::span<const T>, std::span<const T>);

KLA_INSTANTIATE_FILTER(float)
KLA_INSTANTIATE_FILTER(double)

#undef KLA_INSTANTIATE_FILTER

}  // namespace kla::filter

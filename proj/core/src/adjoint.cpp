#include "kla/adjoint.hpp"

#include <cmath>
#include <stdexcept>

namespace kla::ad {

namespace {

std::size_t steps_of(std::size_t total, std::size_t lanes, const char* what) {
  if (lanes == 0 || total == 0 || total % lanes != 0) {
    throw std::invalid_argument(std::string(what) + ": path length is not a positive multiple of the lane count");
  }
  return total / lanes;
}

void check_dyn(const filter::Dynamics<double>& dyn, std::size_t lanes, const char* what) {
  if (dyn.size() == 0 || dyn.p_bar.size() != dyn.size() || lanes % dyn.size() != 0) {
    throw std::invalid_argument(std::string(what) + ": dynamics do not broadcast over lanes");
  }
}

}  // namespace

AffineAdjoint affine_scan_adjoint(std::span<const scan::Affine<double>> elements, std::span<const double> eta,
                                  std::span<const double> eta0, std::span<const double> upstream,
                                  const scan::ScanPlan& plan) {
  const std::size_t lanes = eta0.size();
  const std::size_t steps = steps_of(elements.size(), lanes, "affine_scan_adjoint");
  if (eta.size() != elements.size() || upstream.size() != elements.size()) {
    throw std::invalid_argument("affine_scan_adjoint: eta and upstream must match the element path");
  }
  // Reversed time: row s holds step t = T-1-s with multiplier f_{t+1}.
  std::vector<scan::Affine<double>> rev(elements.size());
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = steps - 1 - s;
    for (std::size_t l = 0; l < lanes; ++l) {
      const double f_next = t + 1 < steps ? elements[(t + 1) * lanes + l].f : 1.0;
      rev[s * lanes + l] = {f_next, upstream[t * lanes + l]};
    }
  }
  scan::ScanPlan p = plan;
  p.length = steps;
  p.lanes = lanes;
  scan::affine_scan<double>(rev, p);

  AffineAdjoint out;
  out.df.resize(elements.size());
  out.db.resize(elements.size());
  out.deta0.resize(lanes);
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t s = steps - 1 - t;
    for (std::size_t l = 0; l < lanes; ++l) {
      const double g = rev[s * lanes + l].b;
      const double prev = t == 0 ? eta0[l] : eta[(t - 1) * lanes + l];
      out.db[t * lanes + l] = g;
      out.df[t * lanes + l] = g * prev;
    }
  }
  for (std::size_t l = 0; l < lanes; ++l) out.deta0[l] = elements[l].f * out.db[l];
  return out;
}

MobiusAdjoint mobius_path_gradients(const filter::Dynamics<double>& dyn, std::span<const double> lambda,
                                    std::span<const double> lambda0, std::span<const double> upstream) {
  const std::size_t lanes = lambda0.size();
  const std::size_t steps = steps_of(lambda.size(), lanes, "mobius_path_gradients");
  check_dyn(dyn, lanes, "mobius_path_gradients");
  if (upstream.size() != lambda.size()) {
    throw std::invalid_argument("mobius_path_gradients: upstream must match the precision path");
  }
  MobiusAdjoint out;
  out.dphi.resize(lambda.size());
  out.da_bar.assign(dyn.size(), 0.0);
  out.dp_bar.assign(dyn.size(), 0.0);
  out.dlambda0.assign(lanes, 0.0);
  std::vector<double> carry(lanes, 0.0);
  for (std::size_t t = steps; t-- > 0;) {
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t j = l % dyn.size();
      const double a = dyn.a_bar[j];
      const double p = dyn.p_bar[j];
      const double prev = t == 0 ? lambda0[l] : lambda[(t - 1) * lanes + l];
      const double den = a * a + p * prev;
      const double inv2 = 1.0 / (den * den);
      const double g = upstream[t * lanes + l] + carry[l];
      out.dphi[t * lanes + l] = g;
      out.da_bar[j] -= g * 2.0 * a * prev * inv2;
      out.dp_bar[j] -= g * prev * prev * inv2;
      carry[l] = g * a * a * inv2;
    }
  }
  out.dlambda0 = std::move(carry);
  return out;
}

void gate_gradients(const filter::Dynamics<double>& dyn, std::span<const double> lambda,
                    std::span<const double> lambda0, std::span<const double> df, std::span<double> da_bar,
                    std::span<double> dp_bar, std::span<double> dlambda, std::span<double> dlambda0) {
  const std::size_t lanes = lambda0.size();
  const std::size_t steps = steps_of(lambda.size(), lanes, "gate_gradients");
  check_dyn(dyn, lanes, "gate_gradients");
  if (df.size() != lambda.size() || dlambda.size() != lambda.size() || dlambda0.size() != lanes ||
      da_bar.size() != dyn.size() || dp_bar.size() != dyn.size()) {
    throw std::invalid_argument("gate_gradients: buffer shape mismatch");
  }
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t j = l % dyn.size();
      const double a = dyn.a_bar[j];
      const double p = dyn.p_bar[j];
      const double prev = t == 0 ? lambda0[l] : lambda[(t - 1) * lanes + l];
      const double den = a * a + p * prev;
      const double g = df[t * lanes + l] / (den * den);
      da_bar[j] += g * (p * prev - a * a);
      dp_bar[j] -= g * a * prev;
      const double dprev = -g * a * p;
      if (t == 0) {
        dlambda0[l] += dprev;
      } else {
        dlambda[(t - 1) * lanes + l] += dprev;
      }
    }
  }
}

FilterAdjoint recurrent_filter_adjoint(const filter::Dynamics<double>& dyn, std::span<const double> lambda,
                                       std::span<const double> eta, std::span<const double> gate,
                                       std::span<const double> lambda0, std::span<const double> eta0,
                                       std::span<const double> d_eta, std::span<const double> d_lambda) {
  const std::size_t lanes = lambda0.size();
  const std::size_t steps = steps_of(lambda.size(), lanes, "recurrent_filter_adjoint");
  check_dyn(dyn, lanes, "recurrent_filter_adjoint");
  if (eta.size() != lambda.size() || gate.size() != lambda.size() || d_eta.size() != lambda.size() ||
      d_lambda.size() != lambda.size() || eta0.size() != lanes) {
    throw std::invalid_argument("recurrent_filter_adjoint: buffer shape mismatch");
  }
  const std::size_t period = dyn.size();
  FilterAdjoint out;
  out.dphi.resize(lambda.size());
  out.ddrive.resize(lambda.size());
  out.da_bar.assign(period, 0.0);
  out.dp_bar.assign(period, 0.0);
  // Per-lane carries: d/d eta_t and d/d lambda_t flowing back from step t+1.
  std::vector<double> g_eta(lanes, 0.0), g_lam(lanes, 0.0);
  for (std::size_t t = steps; t-- > 0;) {
    const double* lam_prev = t == 0 ? lambda0.data() : lambda.data() + (t - 1) * lanes;
    const double* eta_prev = t == 0 ? eta0.data() : eta.data() + (t - 1) * lanes;
    const std::size_t row = t * lanes;
    for (std::size_t base = 0; base < lanes; base += period) {
      for (std::size_t j = 0; j < period; ++j) {
        const std::size_t l = base + j, i = row + l;
        const double a = dyn.a_bar[j], p = dyn.p_bar[j], prev = lam_prev[l];
        const double den = a * a + p * prev;
        const double inv2 = 1.0 / (den * den);
        // eta_t = f_t eta_{t-1} + drive_t
        const double ge = d_eta[i] + g_eta[l];
        out.ddrive[i] = ge;
        g_eta[l] = ge * gate[i];
        const double gf = ge * eta_prev[l] * inv2;  // through f_t = a / den
        // lambda_t = prev / den + phi_t
        const double gl = d_lambda[i] + g_lam[l];
        out.dphi[i] = gl;
        out.da_bar[j] += gf * (p * prev - a * a) - gl * 2.0 * a * prev * inv2;
        out.dp_bar[j] -= gf * a * prev + gl * prev * prev * inv2;
        g_lam[l] = gl * a * a * inv2 - gf * a * p;
      }
    }
  }
  out.dlambda0 = std::move(g_lam);
  out.deta0 = std::move(g_eta);
  return out;
}

DiscretizationJacobian discretization_jacobian(double a, double p, double delta, Discretization kind) {
  DiscretizationJacobian j;
  const double x = a * delta;
  if (kind == Discretization::euler || x < filter::kSmallArgument) {
    j.da_bar_da = -delta;
    j.da_bar_ddelta = -a;
    j.dp_bar_dp = 2.0 * p * delta;
    j.dp_bar_ddelta = p * p;
    return j;
  }
  const double a_bar = std::exp(-x);
  const double e2 = std::exp(-2.0 * x);
  const double h = -std::expm1(-2.0 * x) / (2.0 * a);
  j.da_bar_da = -delta * a_bar;
  j.da_bar_ddelta = -a * a_bar;
  j.dp_bar_dp = 2.0 * p * h;
  j.dp_bar_da = p * p * (delta * e2 - h) / a;
  j.dp_bar_ddelta = p * p * e2;
  return j;
}

}  // namespace kla::ad

#pragma once

// Reverse-mode adjoints of the two filter scans and of the OU discretization.
// Layouts follow kla/filter.hpp: time-major (t, l), dynamics broadcast by
// lane % dyn.size().

#include <span>
#include <vector>

#include "kla/filter.hpp"

namespace kla::ad {

struct AffineAdjoint {
  std::vector<double> df;    // (T, L)
  std::vector<double> db;    // (T, L)
  std::vector<double> deta0; // (L)
};

/// Gradients of eta_t = f_t eta_{t-1} + b_t given upstream d/d eta_t.
/// The carried adjoint g_t = d_eta_t + f_{t+1} g_{t+1} is itself an affine
/// recursion, evaluated with an inclusive scan in reversed time.
AffineAdjoint affine_scan_adjoint(std::span<const scan::Affine<double>> elements, std::span<const double> eta,
                                  std::span<const double> eta0, std::span<const double> upstream,
                                  const scan::ScanPlan& plan);

struct MobiusAdjoint {
  std::vector<double> dphi;     // (T, L)
  std::vector<double> da_bar;   // dyn.size()
  std::vector<double> dp_bar;   // dyn.size()
  std::vector<double> dlambda0; // (L)
};

/// Gradients through lambda_t = lambda_{t-1} / (a^2 + p lambda_{t-1}) + phi_t
/// by a sequential reverse pass. `upstream` is d/d lambda_t for t = 1..T.
MobiusAdjoint mobius_path_gradients(const filter::Dynamics<double>& dyn, std::span<const double> lambda,
                                    std::span<const double> lambda0, std::span<const double> upstream);

/// Accumulates gradients of f_t = a / (a^2 + p lambda_{t-1}) into d a_bar,
/// d p_bar and d lambda (the lambda_0 contribution goes to dlambda0).
void gate_gradients(const filter::Dynamics<double>& dyn, std::span<const double> lambda,
                    std::span<const double> lambda0, std::span<const double> df, std::span<double> da_bar,
                    std::span<double> dp_bar, std::span<double> dlambda, std::span<double> dlambda0);

struct FilterAdjoint {
  std::vector<double> dphi;      // (T, L)
  std::vector<double> ddrive;    // (T, L)
  std::vector<double> da_bar;    // dyn.size()
  std::vector<double> dp_bar;    // dyn.size()
  std::vector<double> dlambda0;  // (L)
  std::vector<double> deta0;     // (L)
};

/// The three adjoints above fused into one reverse-time pass over the
/// recurrent filter (phi_t and drive_t are the evidence terms). Same
/// gradients, without the reversed element arrays.
FilterAdjoint recurrent_filter_adjoint(const filter::Dynamics<double>& dyn, std::span<const double> lambda,
                                       std::span<const double> eta, std::span<const double> gate,
                                       std::span<const double> lambda0, std::span<const double> eta0,
                                       std::span<const double> d_eta, std::span<const double> d_lambda);

enum class Discretization { ou, euler };

/// Partial derivatives of (a_bar, p_bar) with respect to (a, p, delta).
struct DiscretizationJacobian {
  double da_bar_da = 0, da_bar_ddelta = 0;
  double dp_bar_da = 0, dp_bar_dp = 0, dp_bar_ddelta = 0;
};

DiscretizationJacobian discretization_jacobian(double a, double p, double delta, Discretization kind);

}  // namespace kla::ad

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kla/adjoint.hpp"
#include "kla/gradcheck.hpp"
#include "kla/ops.hpp"
#include "kla/optim.hpp"
#include "kla/tape.hpp"

using namespace kla;
using namespace kla::ad;

namespace {

Tensor random_tensor(std::mt19937_64& gen, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& x : t.data) x = u(gen);
  return t;
}

// Runs `build` on a fresh tape, returns (loss, gradients of the leaves).
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

std::pair<double, std::vector<Tensor>> evaluate(const Builder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const Var loss = build(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (const Var v : leaves) grads.push_back(tape.grad(v));
  return {tape.value(loss).data[0], grads};
}

double check(const Builder& build, std::vector<Tensor> inputs, std::size_t probes = 60) {
  const auto [loss, grads] = evaluate(build, inputs);
  const auto f = [&](const std::vector<Tensor>& x) {
    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<Var> leaves;
    for (const Tensor& t : x) leaves.push_back(tape.constant(t));
    return tape.value(build(tape, leaves)).data[0];
  };
  GradCheckOptions opt;
  opt.probes = probes;
  return finite_difference_check(f, inputs, grads, opt).max_rel_error;
}

// Weighted sum so every output coordinate matters.
Var weighted(Tape& tape, Var x) {
  Tensor w(tape.shape(x));
  for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return sum(tape, mul(tape, x, tape.constant(w)));
}

}  // namespace

TEST(Tape, ProductRule) {
  Tape tape;
  const Var x = tape.leaf(Tensor({1}, {2.0}));
  const Var y = tape.leaf(Tensor({1}, {3.0}));
  tape.backward(mul(tape, x, y));
  EXPECT_EQ(tape.grad(x).data[0], 3.0);
  EXPECT_EQ(tape.grad(y).data[0], 2.0);
}

TEST(Tape, NonScalarLossThrows) {
  Tape tape;
  const Var x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Tape, LogsumexpGradientIsSoftmax) {
  Tape tape;
  const Var x = tape.leaf(Tensor({1, 4}, {0.5, -1.0, 2.0, 0.0}));
  tape.backward(sum(tape, logsumexp(tape, x)));
  const auto& v = tape.value(x).data;
  double z = 0;
  for (const double a : v) z += std::exp(a);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(tape.grad(x).data[i], std::exp(v[i]) / z, 1e-15);
}

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 gen(1);
  const auto a = random_tensor(gen, {3, 4});
  const auto b = random_tensor(gen, {3, 4}, 0.5, 2.0);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, add(t, x[0], x[1])); }, {a, b}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, sub(t, x[0], x[1])); }, {a, b}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, mul(t, x[0], x[1])); }, {a, b}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, div(t, x[0], x[1])); }, {a, b}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, exp(t, x[0])); }, {a}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, log(t, x[0])); }, {b}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, pow(t, x[0], 2.5)); }, {b}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, sigmoid(t, x[0])); }, {a}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, silu(t, x[0])); }, {a}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return weighted(t, softplus(t, x[0])); }, {a}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& x) { return mean(t, mul_scalar(t, add_scalar(t, x[0], 2), 3)); },
                  {a}),
            1e-7);
}

TEST(Ops, ContractionAndShapeGradients) {
  std::mt19937_64 gen(2);
  const auto x = random_tensor(gen, {2, 5, 3});
  const auto w = random_tensor(gen, {3, 4});
  const auto bias = random_tensor(gen, {4});
  const auto scale = random_tensor(gen, {3}, 0.5, 1.5);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) { return weighted(t, linear(t, v[0], v[1], v[2])); },
                  {x, w, bias}),
            1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) { return weighted(t, rms_norm(t, v[0], v[1])); }, {x, scale}),
            1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) { return weighted(t, slice_last(t, v[0], 1, 2)); }, {x}),
            1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) { return weighted(t, select_time(t, v[0], 3)); }, {x}), 1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) {
              return weighted(t, repeat_time(t, select_time(t, v[0], 1), 4));
            },
                  {x}),
            1e-7);
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) { return weighted(t, tile_batch(t, v[0], 3)); }, {x}), 1e-7);
  const auto cw = random_tensor(gen, {4, 3});
  const auto cb = random_tensor(gen, {3});
  EXPECT_LE(check([](Tape& t, const std::vector<Var>& v) { return weighted(t, causal_conv1d(t, v[0], v[1], v[2])); },
                  {x, cw, cb}),
            1e-7);
  const std::vector<std::int32_t> ids{0, 3, 3, 1};
  const auto table = random_tensor(gen, {4, 3});
  EXPECT_LE(check([&](Tape& t, const std::vector<Var>& v) { return weighted(t, gather_rows(t, v[0], ids, {2, 2})); },
                  {table}),
            1e-7);
}

TEST(Ops, LossGradients) {
  std::mt19937_64 gen(3);
  const auto logits = random_tensor(gen, {2, 3, 5}, -2, 2);
  const std::vector<std::int32_t> targets{0, 4, 2, 1, 1, 3};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
  EXPECT_LE(check([&](Tape& t, const std::vector<Var>& v) { return cross_entropy(t, v[0], targets, mask); }, {logits}),
            1e-7);
  const auto tiled = random_tensor(gen, {6, 3, 5}, -2, 2);
  EXPECT_LE(check([&](Tape& t, const std::vector<Var>& v) { return mc_marginal_nll(t, v[0], targets, mask, 3); },
                  {tiled}),
            1e-7);
}

TEST(Ops, CausalConvImpulseAndIdentity) {
  Tape tape;
  Tensor x({1, 6, 1});
  x.data[0] = 1.0;
  const Var w = tape.constant(Tensor({4, 1}, {1.0, 2.0, 3.0, 4.0}));
  const Var b = tape.constant(Tensor({1}, {0.0}));
  const auto& y = tape.value(causal_conv1d(tape, tape.constant(x), w, b)).data;
  EXPECT_EQ(y, (std::vector<double>{1, 2, 3, 4, 0, 0}));
  std::mt19937_64 gen(4);
  const auto r = random_tensor(gen, {1, 6, 1});
  const Var id = tape.constant(Tensor({4, 1}, {1.0, 0.0, 0.0, 0.0}));
  EXPECT_EQ(tape.value(causal_conv1d(tape, tape.constant(r), id, b)).data, r.data);
}

TEST(Ops, GatherRejectsOutOfRange) {
  Tape tape;
  const Var table = tape.leaf(Tensor({3, 2}));
  const std::vector<std::int32_t> ids{0, 3};
  EXPECT_THROW(gather_rows(tape, table, ids, {2}), std::invalid_argument);
}

TEST(AffineAdjoint, ReverseCumulativeSumWhenUndamped) {
  const std::size_t steps = 6;
  const std::vector<scan::Affine<double>> e(steps, scan::Affine<double>{1.0, 0.5});
  const std::vector<double> eta{0.5, 1, 1.5, 2, 2.5, 3}, eta0{0.0};
  const std::vector<double> up{1, 2, 3, 4, 5, 6};
  const auto adj = affine_scan_adjoint(e, eta, eta0, up, scan::ScanPlan{});
  double tail = 0;
  for (std::size_t t = steps; t-- > 0;) {
    tail += up[t];
    EXPECT_DOUBLE_EQ(adj.db[t], tail);
  }
  EXPECT_DOUBLE_EQ(adj.deta0[0], 21.0);
}

TEST(AffineAdjoint, TwoStepHandCase) {
  const std::vector<scan::Affine<double>> e{{0.8, 1.0}, {0.5, 2.0}};
  const std::vector<double> eta0{3.0};
  const std::vector<double> eta{0.8 * 3.0 + 1.0, 0.5 * (0.8 * 3.0 + 1.0) + 2.0};
  const std::vector<double> up{1.5, 4.0};
  const auto adj = affine_scan_adjoint(e, eta, eta0, up, scan::ScanPlan{});
  EXPECT_DOUBLE_EQ(adj.db[0], 1.5 + 0.5 * 4.0);
  EXPECT_DOUBLE_EQ(adj.db[1], 4.0);
  EXPECT_DOUBLE_EQ(adj.df[1], 4.0 * eta[0]);
  EXPECT_DOUBLE_EQ(adj.df[0], (1.5 + 0.5 * 4.0) * 3.0);
}

namespace {

// Affine recursion as a tape node with the scan adjoint as its backward.
// fb is (T, L, 2): f then b; eta0 is (L). Output eta path (T, L).
Var affine_node(Tape& tape, Var fb, Var eta0, double corrupt = 0.0) {
  const Tensor& x = tape.value(fb);
  const std::size_t steps = x.dim(0), lanes = x.dim(1);
  std::vector<scan::Affine<double>> e(steps * lanes);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = {x.data[2 * i], x.data[2 * i + 1]};
  auto prefix = e;
  scan::affine_scan<double>(prefix, scan::ScanPlan{steps, lanes});
  Tensor eta({steps, lanes});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t l = 0; l < lanes; ++l) {
      eta.data[t * lanes + l] = scan::affine_apply(prefix[t * lanes + l], tape.value(eta0).data[l]);
    }
  }
  const std::vector<double> saved_eta = eta.data;
  return tape.record(std::move(eta), {fb, eta0}, [=](Tape& t, const Tensor& g) {
    auto elems = e;
    for (auto& el : elems) el.f += corrupt;
    const auto adj = affine_scan_adjoint(elems, saved_eta, t.value(eta0).data, g.data, scan::ScanPlan{steps, lanes});
    Tensor dfb(t.shape(fb));
    for (std::size_t i = 0; i < elems.size(); ++i) {
      dfb.data[2 * i] = adj.df[i];
      dfb.data[2 * i + 1] = adj.db[i];
    }
    t.accumulate(fb, dfb);
    t.accumulate(eta0, Tensor({lanes}, adj.deta0));
  });
}

// Same recursion as a chain of elementwise tape ops.
Var affine_fold(Tape& tape, Var fb, Var eta0) {
  const std::size_t steps = tape.shape(fb)[0], lanes = tape.shape(fb)[1];
  std::vector<Var> rows;
  Var eta = eta0;
  const Var flat = tape.record(Tensor({steps * lanes, 2}, tape.value(fb).data), {fb},
                               [fb](Tape& t, const Tensor& g) { t.accumulate(fb, g); });
  const Var f = slice_last(tape, flat, 0, 1);
  const Var b = slice_last(tape, flat, 1, 1);
  for (std::size_t t = 0; t < steps; ++t) {
    const Var ft = tape.record(Tensor({lanes}, std::vector<double>(tape.value(f).data.begin() + t * lanes,
                                                                   tape.value(f).data.begin() + (t + 1) * lanes)),
                               {f}, [f, t, lanes](Tape& tp, const Tensor& g) {
                                 Tensor& gf = tp.grad_buffer(f);
                                 for (std::size_t l = 0; l < lanes; ++l) gf.data[t * lanes + l] += g.data[l];
                               });
    const Var bt = tape.record(Tensor({lanes}, std::vector<double>(tape.value(b).data.begin() + t * lanes,
                                                                   tape.value(b).data.begin() + (t + 1) * lanes)),
                               {b}, [b, t, lanes](Tape& tp, const Tensor& g) {
                                 Tensor& gb = tp.grad_buffer(b);
                                 for (std::size_t l = 0; l < lanes; ++l) gb.data[t * lanes + l] += g.data[l];
                               });
    eta = add(tape, mul(tape, ft, eta), bt);
    rows.push_back(eta);
  }
  // Weighted sum over the whole path.
  Var total = tape.constant(Tensor({1}, {0.0}));
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor w({lanes});
    for (std::size_t l = 0; l < lanes; ++l) w.data[l] = std::sin(0.7 * static_cast<double>(t * lanes + l) + 0.3);
    total = add(tape, total, sum(tape, mul(tape, rows[t], tape.constant(w))));
  }
  return total;
}

}  // namespace

TEST(AffineAdjoint, MatchesFiniteDifferences) {
  std::mt19937_64 gen(5);
  auto fb = random_tensor(gen, {32, 3, 2}, 0.2, 1.1);
  const auto eta0 = random_tensor(gen, {3});
  const auto err = check([](Tape& t, const std::vector<Var>& v) { return weighted(t, affine_node(t, v[0], v[1])); },
                         {fb, eta0}, 150);
  EXPECT_LE(err, 1e-6);
}

TEST(AffineAdjoint, AgreesWithTapeThroughSequentialFold) {
  std::mt19937_64 gen(6);
  const auto fb = random_tensor(gen, {20, 4, 2}, 0.2, 1.1);
  const auto eta0 = random_tensor(gen, {4});
  const auto [l1, g1] = evaluate([](Tape& t, const std::vector<Var>& v) { return weighted(t, affine_node(t, v[0], v[1])); },
                                 {fb, eta0});
  const auto [l2, g2] = evaluate([](Tape& t, const std::vector<Var>& v) { return affine_fold(t, v[0], v[1]); }, {fb, eta0});
  EXPECT_NEAR(l1, l2, 1e-12 * std::abs(l2));
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < g1[k].size(); ++i) {
      EXPECT_NEAR(g1[k].data[i], g2[k].data[i], 1e-12 * std::max(1.0, std::abs(g2[k].data[i])));
    }
  }
}

TEST(GradCheck, QuadraticAndNegativeControl) {
  std::vector<Tensor> x{Tensor({1}, {3.0})};
  const auto report = finite_difference_check([](const std::vector<Tensor>& p) { return p[0].data[0] * p[0].data[0]; },
                                              x, {Tensor({1}, {6.0})}, GradCheckOptions{5});
  EXPECT_LE(report.max_rel_error, 1e-9);
  EXPECT_EQ(x[0].data[0], 3.0);

  std::mt19937_64 gen(7);
  auto fb = random_tensor(gen, {16, 2, 2}, 0.2, 1.1);
  const auto eta0 = random_tensor(gen, {2});
  const auto corrupted = check(
      [](Tape& t, const std::vector<Var>& v) { return weighted(t, affine_node(t, v[0], v[1], 0.05)); }, {fb, eta0}, 100);
  EXPECT_GT(corrupted, 1e-2);
}

TEST(MobiusAdjoint, DeterministicCaseAndUnitEvidenceDerivative) {
  const double a = 0.9;
  const std::size_t steps = 7;
  const filter::Dynamics<double> dyn{{a}, {0.0}};
  std::vector<double> lambda(steps), up(steps, 0.0);
  double lam = 1.0;
  for (std::size_t t = 0; t < steps; ++t) lambda[t] = lam = lam / (a * a) + 0.3;
  up.back() = 1.0;
  const std::vector<double> l0{1.0};
  const auto adj = mobius_path_gradients(dyn, lambda, l0, up);
  EXPECT_NEAR(adj.dlambda0[0], std::pow(a, -2.0 * steps), 1e-12);
  EXPECT_DOUBLE_EQ(adj.dphi.back(), 1.0);
}

TEST(MobiusAdjoint, MatchesFiniteDifferences) {
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  const std::size_t steps = 40, lanes = 3;
  std::vector<double> phi(steps * lanes), w(steps * lanes), l0(lanes);
  for (auto& x : phi) x = u(gen);
  for (auto& x : w) x = u(gen) - 0.5;
  for (auto& x : l0) x = u(gen) + 0.5;
  filter::Dynamics<double> dyn{{0.7, 0.95, 0.85}, {0.2, 0.05, 0.4}};
  const auto run = [&](const filter::Dynamics<double>& d, const std::vector<double>& ph, const std::vector<double>& lz) {
    std::vector<double> lam(steps * lanes);
    for (std::size_t l = 0; l < lanes; ++l) {
      double x = lz[l];
      for (std::size_t t = 0; t < steps; ++t) {
        x = x / (d.a_bar[l] * d.a_bar[l] + d.p_bar[l] * x) + ph[t * lanes + l];
        lam[t * lanes + l] = x;
      }
    }
    double loss = 0;
    for (std::size_t i = 0; i < lam.size(); ++i) loss += w[i] * lam[i];
    return std::make_pair(loss, lam);
  };
  const auto lam = run(dyn, phi, l0).second;
  const auto adj = mobius_path_gradients(dyn, lam, l0, w);
  const double eps = 1e-6;
  const auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); };
  for (std::size_t i = 0; i < phi.size(); i += 7) {
    auto up = phi, dn = phi;
    up[i] += eps;
    dn[i] -= eps;
    EXPECT_LE(rel(adj.dphi[i], (run(dyn, up, l0).first - run(dyn, dn, l0).first) / (2 * eps)), 1e-6);
  }
  for (std::size_t l = 0; l < lanes; ++l) {
    auto up = dyn, dn = dyn;
    up.a_bar[l] += eps;
    dn.a_bar[l] -= eps;
    EXPECT_LE(rel(adj.da_bar[l], (run(up, phi, l0).first - run(dn, phi, l0).first) / (2 * eps)), 1e-6);
    up = dyn;
    dn = dyn;
    up.p_bar[l] += eps;
    dn.p_bar[l] -= eps;
    EXPECT_LE(rel(adj.dp_bar[l], (run(up, phi, l0).first - run(dn, phi, l0).first) / (2 * eps)), 1e-6);
    auto lu = l0, ld = l0;
    lu[l] += eps;
    ld[l] -= eps;
    EXPECT_LE(rel(adj.dlambda0[l], (run(dyn, phi, lu).first - run(dyn, phi, ld).first) / (2 * eps)), 1e-6);
  }
}

TEST(Discretization, JacobianMatchesFiniteDifferences) {
  const double eps = 1e-7;
  for (const auto kind : {Discretization::ou, Discretization::euler}) {
    for (const auto& [a, p, d] : {std::tuple{0.7, 0.3, 0.05}, std::tuple{6.0, 0.01, 0.1}, std::tuple{2.0, 1.5, 0.002}}) {
      const auto eval = [&](double aa, double pp, double dd) {
        filter::OUParams<double> ou{{aa}, {pp}, {dd}};
        const auto dyn = kind == Discretization::ou ? filter::ou_discretize(ou) : filter::euler_discretize(ou);
        return std::make_pair(dyn.a_bar[0], dyn.p_bar[0]);
      };
      const auto j = discretization_jacobian(a, p, d, kind);
      const auto fd = [&](int which) {
        const double h[3] = {which == 0 ? eps : 0, which == 1 ? eps : 0, which == 2 ? eps : 0};
        const auto up = eval(a + h[0], p + h[1], d + h[2]);
        const auto dn = eval(a - h[0], p - h[1], d - h[2]);
        return std::make_pair((up.first - dn.first) / (2 * eps), (up.second - dn.second) / (2 * eps));
      };
      EXPECT_NEAR(j.da_bar_da, fd(0).first, 1e-7);
      EXPECT_NEAR(j.dp_bar_da, fd(0).second, 1e-7);
      EXPECT_NEAR(j.dp_bar_dp, fd(1).second, 1e-7);
      EXPECT_NEAR(j.da_bar_ddelta, fd(2).first, 1e-6);
      EXPECT_NEAR(j.dp_bar_ddelta, fd(2).second, 1e-6);
    }
  }
}

TEST(AdamW, ZeroGradientLeavesParameters) {
  Tensor p({3}, {1.0, -2.0, 0.5});
  std::vector<Tensor> g{Tensor({3})};
  AdamW opt;
  opt.step({&p}, g);
  EXPECT_EQ(p.data, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, FirstStepIsLearningRate) {
  Tensor p({2}, {0.0, 0.0});
  std::vector<Tensor> g{Tensor({2}, {1.0, -1.0})};
  AdamW opt;
  opt.step({&p}, g);
  EXPECT_NEAR(p.data[0], -1e-3, 1e-10);
  EXPECT_NEAR(p.data[1], 1e-3, 1e-10);
}

TEST(AdamW, ClipsGlobalNorm) {
  std::vector<Tensor> g{Tensor({2}, {30.0, 0.0}), Tensor({1}, {40.0})};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 5.0), 50.0);
  EXPECT_DOUBLE_EQ(g[0].data[0], 3.0);
  EXPECT_DOUBLE_EQ(g[1].data[0], 4.0);
}

TEST(AdamW, ShapeMismatchThrows) {
  Tensor p({2});
  std::vector<Tensor> g{Tensor({3})};
  AdamW opt;
  EXPECT_THROW(opt.step({&p}, g), std::invalid_argument);
}

TEST(AdamW, DeterministicTrajectory) {
  const auto run = [] {
    std::mt19937_64 gen(9);
    Tensor p = random_tensor(gen, {5});
    AdamW opt;
    for (int s = 0; s < 20; ++s) {
      std::vector<Tensor> g{Tensor({5})};
      for (std::size_t i = 0; i < 5; ++i) g[0].data[i] = std::sin(p.data[i] * (s + 1)) * 10;
      opt.step({&p}, g);
    }
    return p.data;
  };
  EXPECT_EQ(run(), run());
}

TEST(RecurrentFilterAdjoint, MatchesComposedAdjoints) {
  std::mt19937_64 gen(12);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  const std::size_t steps = 30, lanes = 6;
  const filter::Dynamics<double> dyn{{0.7, 0.95, 0.85}, {0.2, 0.05, 0.4}};
  std::vector<double> phi(steps * lanes), drive(steps * lanes), d_eta(steps * lanes), d_lam(steps * lanes);
  std::vector<double> l0(lanes), e0(lanes);
  for (auto& x : phi) x = u(gen);
  for (auto& x : drive) x = u(gen) - 0.5;
  for (auto& x : d_eta) x = u(gen) - 0.5;
  for (auto& x : d_lam) x = u(gen) - 0.5;
  for (auto& x : l0) x = u(gen) + 0.5;
  for (auto& x : e0) x = u(gen) - 0.5;
  const auto path = filter::recurrent_filter<double>(dyn, phi, drive, l0, e0);
  const auto fused = recurrent_filter_adjoint(dyn, path.lambda, path.eta, path.gate, l0, e0, d_eta, d_lam);

  std::vector<scan::Affine<double>> elements(path.gate.size());
  for (std::size_t i = 0; i < elements.size(); ++i) elements[i].f = path.gate[i];
  const auto affine = affine_scan_adjoint(elements, path.eta, e0, d_eta, {steps, lanes, scan::ScanMode::sequential, 0});
  std::vector<double> da(dyn.size(), 0.0), dp(dyn.size(), 0.0), dl = d_lam, dl0(lanes, 0.0);
  gate_gradients(dyn, path.lambda, l0, affine.df, da, dp, dl, dl0);
  const auto mobius = mobius_path_gradients(dyn, path.lambda, l0, dl);

  const auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max({std::abs(a), std::abs(b), 1.0}); };
  for (std::size_t i = 0; i < phi.size(); ++i) {
    EXPECT_TRUE(near(fused.ddrive[i], affine.db[i])) << i;
    EXPECT_TRUE(near(fused.dphi[i], mobius.dphi[i])) << i;
  }
  for (std::size_t j = 0; j < dyn.size(); ++j) {
    EXPECT_TRUE(near(fused.da_bar[j], da[j] + mobius.da_bar[j])) << j;
    EXPECT_TRUE(near(fused.dp_bar[j], dp[j] + mobius.dp_bar[j])) << j;
  }
  for (std::size_t l = 0; l < lanes; ++l) {
    EXPECT_TRUE(near(fused.deta0[l], affine.deta0[l])) << l;
    EXPECT_TRUE(near(fused.dlambda0[l], dl0[l] + mobius.dlambda0[l])) << l;
  }
}

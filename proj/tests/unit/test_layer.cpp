#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "kla/gradcheck.hpp"
#include "kla/layer.hpp"
#include "kla/ops.hpp"
#include "oracles.hpp"

using namespace kla;
using namespace kla::layer;
using kla::oracle::max_rel_err;

namespace {

std::vector<double> random_x(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> x(n);
  for (double& v : x) v = dist(gen);
  return x;
}

// Varied process noise so the gate is genuinely history dependent.
LayerParams<double> test_params(std::size_t d, std::size_t n, std::uint64_t seed) {
  auto p = init_layer_params(d, n, seed);
  for (std::size_t i = 0; i < p.p.size(); ++i) p.p[i] = 0.3 + 0.1 * std::sin(static_cast<double>(i));
  for (std::size_t i = 0; i < p.b_lv.size(); ++i) p.b_lv[i] = 0.2 * std::cos(static_cast<double>(i));
  return p;
}

Projections<double> one_lane(std::vector<double> q, std::vector<double> k, std::vector<double> v,
                             std::vector<double> lv) {
  Projections<double> p;
  p.batch = 1;
  p.steps = q.size();
  p.slots = 1;
  p.channels = 1;
  p.q = std::move(q);
  p.k = std::move(k);
  p.v = std::move(v);
  p.lambda_v = std::move(lv);
  return p;
}

}  // namespace

TEST(ProjectInputs, ZeroInputGivesSoftplusAtZero) {
  auto params = init_layer_params(4, 3, 1);
  const std::vector<double> x(2 * 5 * 4, 0.0);
  const auto proj = project_inputs<double>(x, 2, 5, params);
  for (const double lv : proj.lambda_v) EXPECT_NEAR(lv, std::numbers::ln2 + kLambdaVFloor, 1e-15);
}

TEST(ProjectInputs, QkNormHasUnitRms) {
  const auto params = init_layer_params(6, 4, 2);
  const auto x = random_x(3, 3 * 6);
  const auto proj = project_inputs<double>(x, 1, 3, params);
  for (std::size_t t = 0; t < 3; ++t) {
    double sk = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n) {
      sk += proj.k[t * 4 + n] * proj.k[t * 4 + n];
      sq += proj.q[t * 4 + n] * proj.q[t * 4 + n];
    }
    EXPECT_NEAR(std::sqrt(sk / 4), 1.0, 1e-5);
    EXPECT_NEAR(std::sqrt(sq / 4), 1.0, 1e-5);
  }
}

TEST(ProjectInputs, IdenticalTokensAreTimeConstant) {
  const auto params = init_layer_params(5, 2, 4);
  const auto token = random_x(5, 5);
  std::vector<double> x;
  for (int t = 0; t < 4; ++t) x.insert(x.end(), token.begin(), token.end());
  const auto proj = project_inputs<double>(x, 1, 4, params);
  for (std::size_t t = 1; t < 4; ++t) {
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(proj.k[t * 2 + i], proj.k[i]);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(proj.lambda_v[t * 5 + i], proj.lambda_v[i]);
  }
}

TEST(FilterReadout, HandFoldedSingleLane) {
  const auto proj = one_lane({1, 1}, {1, 1}, {2, 2}, {1, 1});
  const filter::Dynamics<double> dyn{{1.0}, {0.0}};
  const auto out = filter_readout(proj, dyn, scan::ScanMode::parallel, true);
  EXPECT_DOUBLE_EQ(out.belief.lambda[0], 2.0);
  EXPECT_DOUBLE_EQ(out.belief.lambda[1], 3.0);
  EXPECT_DOUBLE_EQ(out.belief.eta[0], 2.0);
  EXPECT_DOUBLE_EQ(out.belief.eta[1], 4.0);
  EXPECT_DOUBLE_EQ(out.y_mu[0], 1.0);
  EXPECT_DOUBLE_EQ(out.y_mu[1], 4.0 / 3.0);
  EXPECT_DOUBLE_EQ(out.y_sigma[1], 1.0 / 3.0);
}

TEST(FilterReadout, ZeroQueryGivesZeroOutput) {
  auto proj = one_lane({0, 0, 0}, {1, -2, 0.5}, {3, 1, 4}, {1, 2, 3});
  const auto out = filter_readout(proj, filter::Dynamics<double>{{0.9}, {0.1}}, scan::ScanMode::parallel, false);
  for (const double y : out.y_mu) EXPECT_EQ(y, 0.0);
}

TEST(FilterReadout, EvidenceMonotonicity) {
  const filter::Dynamics<double> dyn{{0.8}, {0.3}};
  auto base = one_lane({1, 1, 1, 1, 1, 1}, {0.5, 1, -1, 0.2, 2, 1}, {1, 2, 3, 4, 5, 6}, {1, 1, 1, 1, 1, 1});
  auto raised = base;
  raised.lambda_v[2] = 5.0;
  const auto a = filter_readout(base, dyn, scan::ScanMode::parallel, false);
  const auto b = filter_readout(raised, dyn, scan::ScanMode::parallel, false);
  for (std::size_t t = 0; t < 6; ++t) {
    if (t < 2) EXPECT_EQ(a.belief.lambda[t], b.belief.lambda[t]);
    else EXPECT_GE(b.belief.lambda[t], a.belief.lambda[t]);
  }
}

TEST(KlaForward, DeterministicAndCausal) {
  const std::size_t b = 2, steps = 12, d = 4, n = 3;
  const auto params = test_params(d, n, 7);
  const auto x = random_x(8, b * steps * d);
  const auto y1 = kla_forward<double>(x, b, steps, params, false).y_mu;
  const auto y2 = kla_forward<double>(x, b, steps, params, false).y_mu;
  EXPECT_EQ(y1, y2);
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t tp = gen() % steps;
    auto xp = x;
    for (std::size_t c = 0; c < d; ++c) xp[(1 * steps + tp) * d + c] += 0.5;
    const auto yp = kla_forward<double>(xp, b, steps, params, false).y_mu;
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t i = (1 * steps + t) * d + c;
        if (t < tp) EXPECT_EQ(yp[i], y1[i]);
      }
    }
    bool changed = false;
    for (std::size_t c = 0; c < d; ++c) changed |= yp[(steps + tp) * d + c] != y1[(steps + tp) * d + c];
    EXPECT_TRUE(changed);
    // The other sequence is untouched.
    for (std::size_t i = 0; i < steps * d; ++i) EXPECT_EQ(yp[i], y1[i]);
  }
}

TEST(KlaForward, VarianceIsPositive) {
  const auto params = test_params(3, 4, 10);
  const auto x = random_x(11, 2 * 20 * 3);
  const auto out = kla_forward<double>(x, 2, 20, params, true);
  ASSERT_EQ(out.y_sigma.size(), out.y_mu.size());
  for (const double s : out.y_sigma) EXPECT_GT(s, 0.0);
}

TEST(KlaForward, ScanModesAgree) {
  const auto params = test_params(6, 4, 12);
  const auto x = random_x(13, 3 * 300 * 6);
  LayerOptions seq;
  seq.mode = scan::ScanMode::sequential;
  const auto a = kla_forward<double>(x, 3, 300, params, true);
  const auto b = kla_forward<double>(x, 3, 300, params, true, seq);
  EXPECT_LE(max_rel_err(a.y_mu, b.y_mu, 1e-12), 1e-10);
  EXPECT_LE(max_rel_err(a.y_sigma, b.y_sigma), 1e-10);

  const auto p32 = params.cast<float>();
  const std::vector<float> x32(x.begin(), x.end());
  const auto c = kla_forward<float>(x32, 3, 300, p32, true);
  const auto d = kla_forward<float>(x32, 3, 300, p32, true, seq);
  // Scan outputs agree per lane; the readout sums over slots with cancellation,
  // so it is compared against the output scale instead.
  EXPECT_LE(max_rel_err(c.belief.lambda, d.belief.lambda), 1e-5);
  EXPECT_LE(max_rel_err(c.y_sigma, d.y_sigma), 1e-5);
  float scale = 0, worst = 0;
  for (std::size_t i = 0; i < c.y_mu.size(); ++i) {
    scale = std::max(scale, std::abs(d.y_mu[i]));
    worst = std::max(worst, std::abs(c.y_mu[i] - d.y_mu[i]));
  }
  EXPECT_LE(worst, 1e-5f * scale);
}

TEST(SamplePosterior, RejectsZeroSamplesAndCollapsesAtZeroVariance) {
  const auto params = test_params(3, 2, 14);
  const auto x = random_x(15, 5 * 3);
  const auto proj = project_inputs<double>(x, 1, 5, params);
  const auto out = filter_readout(proj, layer_dynamics(params, {}), scan::ScanMode::parallel, false);
  EXPECT_THROW(sample_posterior<double>(out.belief, proj.q, 1, 2, 3, 0, 1), std::invalid_argument);
  const auto s = sample_posterior<double>(out.belief, proj.q, 1, 2, 3, kDefaultSamples, 1, 0.0);
  ASSERT_EQ(s.size(), kDefaultSamples * out.y_mu.size());
  for (std::size_t k = 0; k < kDefaultSamples; ++k) {
    for (std::size_t i = 0; i < out.y_mu.size(); ++i) EXPECT_DOUBLE_EQ(s[k * out.y_mu.size() + i], out.y_mu[i]);
  }
}

TEST(SamplePosterior, MeanConvergesWithinStandardError) {
  const auto params = test_params(2, 2, 16);
  const auto x = random_x(17, 3 * 2);
  const auto proj = project_inputs<double>(x, 1, 3, params);
  const auto out = filter_readout(proj, layer_dynamics(params, {}), scan::ScanMode::parallel, true);
  const std::size_t samples = 100000;
  const auto s = sample_posterior<double>(out.belief, proj.q, 1, 2, 2, samples, 99);
  const std::size_t m = out.y_mu.size();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0;
    for (std::size_t k = 0; k < samples; ++k) acc += s[k * m + i];
    const double bound = 4.0 * std::sqrt(out.y_sigma[i] / static_cast<double>(samples));
    EXPECT_LE(std::abs(acc / samples - out.y_mu[i]), bound);
  }
}

TEST(AttentionMatrix, ReproducesForwardAndIsCausal) {
  const std::size_t steps = 16, d = 5, n = 3;
  const auto params = test_params(d, n, 18);
  const auto x = random_x(19, steps * d);
  const std::vector<std::size_t> channels{0, 2, 4};
  const auto am = materialize_attention_matrix(params, x, steps, channels);
  const auto y = kla_forward<double>(x, 1, steps, params, false).y_mu;
  for (std::size_t ci = 0; ci < channels.size(); ++ci) {
    const double* m = am.matrices.data() + ci * steps * steps;
    for (std::size_t t = 0; t < steps; ++t) {
      double acc = am.init_term[ci * steps + t];
      for (std::size_t s = 0; s < steps; ++s) {
        if (s > t) EXPECT_EQ(m[t * steps + s], 0.0);
        acc += m[t * steps + s] * am.values[ci * steps + s];
      }
      EXPECT_LE(kla::oracle::rel_err(acc, y[t * d + channels[ci]], 1e-12), 1e-8);
    }
  }
}

TEST(AttentionMatrix, UnitGatesGiveLowerTriangleOfOnes) {
  const std::size_t steps = 6;
  auto params = init_layer_params(1, 1, 20);
  params.a_log = {-40.0};
  params.p = {0.0};
  params.w_lv = {0.0};
  params.b_lv = {std::log(std::expm1(1.0 - kLambdaVFloor))};
  params.w_k = {1.0};
  const std::vector<double> x(steps, 1e4);
  const std::vector<std::size_t> channels{0};
  const auto am = materialize_attention_matrix(params, x, steps, channels, {}, kAttentionCap, true);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t s = 0; s < steps; ++s) EXPECT_NEAR(am.kernels[t * steps + s], s <= t ? 1.0 : 0.0, 1e-12);
  }
}

TEST(AttentionMatrix, CapIsEnforced) {
  const auto params = init_layer_params(2, 1, 21);
  const auto x = random_x(22, 9 * 2);
  const std::vector<std::size_t> channels{0};
  EXPECT_THROW(materialize_attention_matrix(params, x, 9, channels, {}, 8), std::invalid_argument);
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(materialize_attention_matrix(params, x, 9, bad), std::invalid_argument);
}

namespace {

struct MixerCase {
  MixerConfig config;
  std::vector<Tensor> inputs;  // q, k, v, lambda_v, a_log, p, dt_raw
};

MixerCase mixer_case(std::uint64_t seed, bool sample, ad::Discretization disc, bool zero_p) {
  const std::size_t b = 2, steps = 6, n = 2, d = 3;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MixerCase c;
  c.config = MixerConfig{b, steps, n, d, LayerOptions{scan::ScanMode::parallel, disc, zero_p}, sample, seed};
  const auto fill = [&](Shape s, auto draw) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = draw();
    return t;
  };
  c.inputs.push_back(fill({b, steps, n}, [&] { return normal(gen); }));
  c.inputs.push_back(fill({b, steps, n}, [&] { return normal(gen); }));
  c.inputs.push_back(fill({b, steps, d}, [&] { return normal(gen); }));
  c.inputs.push_back(fill({b, steps, d}, [&] { return 0.2 + u(gen); }));
  c.inputs.push_back(fill({n, d}, [&] { return std::log(0.5 + 6 * u(gen)); }));
  c.inputs.push_back(fill({n, d}, [&] { return 0.2 + u(gen); }));
  c.inputs.push_back(fill({n, d}, [&] { return normal(gen); }));
  return c;
}

ad::Var mixer_objective(ad::Tape& tape, const std::vector<ad::Var>& v, const MixerConfig& config) {
  const ad::Var y = kla_mixer(tape, v[0], v[1], v[2], v[3], v[4], v[5], v[6], config);
  Tensor w(tape.shape(y));
  for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = std::cos(0.37 * static_cast<double>(i));
  return ad::sum(tape, ad::mul(tape, y, tape.constant(w)));
}

ad::GradCheckReport check_mixer(MixerCase c) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Tensor& t : c.inputs) leaves.push_back(tape.leaf(t));
  tape.backward(mixer_objective(tape, leaves, c.config));
  std::vector<Tensor> grads;
  for (const auto v : leaves) grads.push_back(tape.grad(v));
  const auto f = [&](const std::vector<Tensor>& x) {
    ad::Tape t;
    t.set_grad_enabled(false);
    std::vector<ad::Var> l;
    for (const Tensor& e : x) l.push_back(t.constant(e));
    return t.value(mixer_objective(t, l, c.config)).data[0];
  };
  ad::GradCheckOptions opt;
  opt.probes = 250;
  return ad::finite_difference_check(f, c.inputs, grads, opt);
}

}  // namespace

TEST(KlaMixer, ForwardMatchesFilterReadout) {
  auto c = mixer_case(30, false, ad::Discretization::ou, false);
  ad::Tape tape;
  std::vector<ad::Var> v;
  for (const Tensor& t : c.inputs) v.push_back(tape.constant(t));
  const auto y = kla_mixer(tape, v[0], v[1], v[2], v[3], v[4], v[5], v[6], c.config);
  Projections<double> proj{2, 6, 2, 3, c.inputs[1].data, c.inputs[0].data, c.inputs[2].data, c.inputs[3].data};
  filter::OUParams<double> ou;
  for (std::size_t j = 0; j < 6; ++j) {
    ou.a.push_back(std::exp(c.inputs[4].data[j]));
    ou.p.push_back(c.inputs[5].data[j]);
    ou.delta.push_back(delta_from_raw(c.inputs[6].data[j]));
  }
  const auto ref = filter_readout(proj, filter::ou_discretize(ou), scan::ScanMode::parallel, false);
  EXPECT_EQ(tape.value(y).data, ref.y_mu);
}

TEST(KlaMixer, GradientMatchesFiniteDifferences) {
  EXPECT_LE(check_mixer(mixer_case(31, false, ad::Discretization::ou, false)).max_rel_error, 1e-6);
}

TEST(KlaMixer, SampledGradientMatchesFiniteDifferences) {
  EXPECT_LE(check_mixer(mixer_case(32, true, ad::Discretization::ou, false)).max_rel_error, 1e-6);
}

TEST(KlaMixer, RecurrentPlanGradientMatchesFiniteDifferences) {
  for (const bool sample : {false, true}) {
    auto c = mixer_case(35, sample, ad::Discretization::ou, false);
    c.config.options.mode = scan::ScanMode::sequential;
    EXPECT_LE(check_mixer(c).max_rel_error, 1e-6) << "sample=" << sample;
  }
}

TEST(KlaMixer, EulerGradientMatchesFiniteDifferences) {
  EXPECT_LE(check_mixer(mixer_case(33, false, ad::Discretization::euler, false)).max_rel_error, 1e-6);
}

TEST(KlaMixer, FrozenProcessNoiseHasNoGradient) {
  auto c = mixer_case(34, false, ad::Discretization::ou, true);
  ad::Tape tape;
  std::vector<ad::Var> v;
  for (const Tensor& t : c.inputs) v.push_back(tape.leaf(t));
  tape.backward(mixer_objective(tape, v, c.config));
  for (const double g : tape.grad(v[5]).data) EXPECT_EQ(g, 0.0);
  EXPECT_LE(check_mixer(c).max_rel_error, 1e-6);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "kla/model.hpp"
#include "kla/ops.hpp"
#include "oracles.hpp"

using namespace kla;
using namespace kla::model;
using kla::oracle::max_rel_err;

namespace {

ModelConfig tiny_config(LossMode mode = LossMode::posterior_mean) {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 8;
  c.d_state = 2;
  c.loss_mode = mode;
  c.mc_samples = 3;
  return c;
}

void randomize(Parameters& p, const std::string& name, std::mt19937_64& gen, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (double& x : p.at(name).data) x = n(gen);
}

Batch random_batch(std::mt19937_64& gen, std::size_t b, std::size_t t, std::size_t vocab) {
  std::uniform_int_distribution<int> id(0, static_cast<int>(vocab) - 1);
  Batch out;
  out.batch = b;
  out.steps = t;
  for (std::size_t i = 0; i < b * t; ++i) {
    out.tokens.push_back(id(gen));
    out.targets.push_back(id(gen));
    out.mask.push_back(i % 3 != 0);
  }
  return out;
}

std::vector<double> tape_logits(const Parameters& p, const ModelConfig& c, const std::vector<std::int32_t>& tokens,
                                std::size_t b, std::size_t t) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  const auto vars = parameter_leaves(tape, p);
  return tape.value(model_forward(tape, vars, p, c, tokens, b, t)).data;
}

double ce_loss(const Tensor& logits, const std::vector<std::int32_t>& targets, const std::vector<std::uint8_t>& mask) {
  ad::Tape tape;
  return tape.value(ad::cross_entropy(tape, tape.constant(logits), targets, mask)).data[0];
}

double mc_loss(const Tensor& logits, const std::vector<std::int32_t>& targets, const std::vector<std::uint8_t>& mask,
               std::size_t samples) {
  ad::Tape tape;
  return tape.value(ad::mc_marginal_nll(tape, tape.constant(logits), targets, mask, samples)).data[0];
}

}  // namespace

TEST(CausalConv, ShiftEquivariantAgainstDirectSum) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> n;
  const std::size_t steps = 12, d = 3, k = 4;
  Tensor x({1, steps, d}), w({k, d}), bias({d});
  for (double& e : x.data) e = n(gen);
  for (double& e : w.data) e = n(gen);
  for (double& e : bias.data) e = n(gen);
  Tensor shifted({1, steps, d});
  for (std::size_t t = 1; t < steps; ++t) {
    for (std::size_t j = 0; j < d; ++j) shifted.data[t * d + j] = x.data[(t - 1) * d + j];
  }
  ad::Tape tape;
  const auto y = tape.value(ad::causal_conv1d(tape, tape.constant(x), tape.constant(w), tape.constant(bias)));
  const auto ys = tape.value(ad::causal_conv1d(tape, tape.constant(shifted), tape.constant(w), tape.constant(bias)));
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      double direct = bias.data[j];
      for (std::size_t s = 0; s < k && s <= t; ++s) direct += w.data[s * d + j] * x.data[(t - s) * d + j];
      EXPECT_NEAR(y.data[t * d + j], direct, 1e-12);
      // Interior: the full window lies inside both sequences.
      if (t + 1 >= k && t + 1 < steps) EXPECT_NEAR(ys.data[(t + 1) * d + j], y.data[t * d + j], 1e-12);
    }
  }
}

TEST(Block, ZeroOutputProjectionIsIdentity) {
  auto c = tiny_config();
  auto p = init_model(c, 3);
  std::fill(p.at("blocks.0.out_proj").data.begin(), p.at("blocks.0.out_proj").data.end(), 0.0);
  std::mt19937_64 gen(4);
  std::normal_distribution<double> n;
  Tensor x({2, 5, 8});
  for (double& e : x.data) e = n(gen);
  ad::Tape tape;
  const auto vars = parameter_leaves(tape, p);
  const auto y = block_forward(tape, tape.constant(x), vars, p, c, 0);
  EXPECT_EQ(tape.value(y).data, x.data);
}

// Hand-set weights; expected values come from tests/oracles/golden_block.py,
// an independent numpy trace of the same block.
TEST(Block, GoldenTinyConfig) {
  ModelConfig c;
  c.vocab_size = 2;
  c.d_model = 2;
  c.d_state = 1;
  auto p = init_model(c, 0);
  const auto set = [&](const std::string& name, std::vector<double> v) {
    ASSERT_EQ(p.at(name).size(), v.size()) << name;
    p.at(name).data = std::move(v);
  };
  set("blocks.0.norm", {1.0, 0.5});
  set("blocks.0.in_proj", {0.5, -0.3, 0.8, 0.1, 0.2, 0.7, -0.4, 0.6});
  set("blocks.0.conv_w", {1.0, 0.5, 0.3, -0.2, 0.0, 0.1, -0.5, 0.0});
  set("blocks.0.conv_b", {0.1, -0.1});
  set("blocks.0.mixer.w_k", {0.9, -0.4});
  set("blocks.0.mixer.w_q", {0.3, 0.8});
  set("blocks.0.mixer.w_v", {1.0, 0.2, -0.3, 0.5});
  set("blocks.0.mixer.w_lv", {0.4, -0.6, 0.1, 0.3});
  set("blocks.0.mixer.b_lv", {0.2, -0.1});
  set("blocks.0.mixer.k_norm", {1.5});
  set("blocks.0.mixer.q_norm", {0.7});
  set("blocks.0.mixer.a_log", {0.0, std::numbers::ln2});
  set("blocks.0.mixer.p", {0.1, 0.3});
  set("blocks.0.mixer.dt_raw", {0.0, 1.0});
  set("blocks.0.out_proj", {0.6, -0.2, 0.3, 0.9});
  const Tensor x({1, 4, 2}, {1.0, -0.5, 0.3, 0.8, -1.2, 0.4, 0.6, 0.6});
  const std::vector<double> expected{1.074281768378154,   -0.5248131823518587, 0.3081498101787498, 0.8022319614838277,
                                     -1.1776985674297897, 0.39256618914326324, 0.5720568086789951, 0.6069063085605111};
  ad::Tape tape;
  const auto vars = parameter_leaves(tape, p);
  const auto& y = tape.value(block_forward(tape, tape.constant(x), vars, p, c, 0)).data;
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12) << i;
}

TEST(Model, ZeroHeadGivesUniformLogits) {
  auto c = tiny_config();
  const auto p = init_model(c, 5);
  std::mt19937_64 gen(6);
  const auto b = random_batch(gen, 2, 7, c.vocab_size);
  const auto logits = tape_logits(p, c, b.tokens, 2, 7);
  ASSERT_EQ(logits.size(), 2u * 7 * 8);
  for (const double l : logits) EXPECT_EQ(l, 0.0);
  EXPECT_NEAR(loss_value(p, c, b, 0), std::log(8.0), 1e-12);
}

TEST(Model, CausalLogits) {
  auto c = tiny_config();
  c.n_layers = 2;
  auto p = init_model(c, 7);
  std::mt19937_64 gen(8);
  randomize(p, "head.w", gen, 1.0);
  auto b = random_batch(gen, 1, 10, c.vocab_size);
  const auto base = tape_logits(p, c, b.tokens, 1, 10);
  const std::size_t t0 = 6;
  b.tokens[t0] = (b.tokens[t0] + 1) % 8;
  const auto changed = tape_logits(p, c, b.tokens, 1, 10);
  for (std::size_t i = 0; i < t0 * 8; ++i) EXPECT_EQ(base[i], changed[i]);
  double diff = 0;
  for (std::size_t i = t0 * 8; i < base.size(); ++i) diff += std::abs(base[i] - changed[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Model, RejectsOutOfRangeTokens) {
  const auto c = tiny_config();
  const auto p = init_model(c, 1);
  const std::vector<std::int32_t> bad{0, 8};
  EXPECT_THROW(tape_logits(p, c, bad, 1, 2), std::invalid_argument);
  EXPECT_THROW(predict_logits<double>(p, c, bad, 1, 2), std::invalid_argument);
  const std::vector<std::int32_t> negative{-1, 0};
  EXPECT_THROW(predict_logits<double>(p, c, negative, 1, 2), std::invalid_argument);
}

TEST(Model, PlainForwardMatchesTape) {
  for (const auto head : {HeadKind::next_token, HeadKind::compression}) {
    auto c = tiny_config();
    c.n_layers = 2;
    c.head = head;
    auto p = init_model(c, 9);
    std::mt19937_64 gen(10);
    for (const auto& name : {"head.w", "head.b", "comp.w3", "comp.b3"}) {
      if (p.contains(name)) randomize(p, name, gen, 0.5);
    }
    const auto b = random_batch(gen, 3, 9, c.vocab_size);
    const auto ref = tape_logits(p, c, b.tokens, 3, 9);
    EXPECT_LE(max_rel_err(predict_logits<double>(p, c, b.tokens, 3, 9), ref, 1e-9), 1e-12);
    const auto f32 = predict_logits<float>(p, c, b.tokens, 3, 9);
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(f32[i] - ref[i]));
    EXPECT_LE(worst, 1e-4);
  }
}

TEST(Model, CompressionHeadShapes) {
  auto c = tiny_config();
  c.head = HeadKind::compression;
  const auto p = init_model(c, 2);
  EXPECT_EQ(p.at("comp.w1").shape, (Shape{8, 240}));
  EXPECT_EQ(p.at("comp.w2").shape, (Shape{240, 120}));
  EXPECT_EQ(p.at("comp.w3").shape, (Shape{120, 8}));
  EXPECT_FALSE(p.contains("head.w"));
  // Zero-initialized output layer: uniform reconstruction logits.
  const std::vector<std::int32_t> tokens{1, 2, 3, 4};
  for (const double l : predict_logits<double>(p, c, tokens, 1, 4)) EXPECT_EQ(l, 0.0);
}

TEST(Model, PositionalEncodingIsSinusoidal) {
  const auto pe = positional_encoding(3, 4);
  EXPECT_EQ(pe[0], 0.0);
  EXPECT_EQ(pe[1], 1.0);
  EXPECT_DOUBLE_EQ(pe[4 * 2 + 0], std::sin(2.0));
  EXPECT_DOUBLE_EQ(pe[4 * 2 + 3], std::cos(2.0 / 100.0));
}

TEST(Model, ConfigValidation) {
  auto c = tiny_config();
  c.conv_kernel = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_loss_mode("mean"), std::invalid_argument);
  EXPECT_EQ(parse_loss_mode("marginal_mc"), LossMode::marginal_mc);
  auto p = init_model(tiny_config(), 0);
  p.at("embed") = Tensor({7, 8});
  EXPECT_THROW(check_parameters(tiny_config(), p), std::invalid_argument);
}

TEST(Losses, CrossEntropyExamples) {
  const std::vector<std::int32_t> t{3};
  const std::vector<std::uint8_t> m{1};
  EXPECT_NEAR(ce_loss(Tensor({1, 1, 16}), t, m), std::log(16.0), 1e-14);
  Tensor sharp({1, 1, 16});
  sharp.data[3] = 50.0;
  EXPECT_LT(ce_loss(sharp, t, m), 1e-20);
  sharp.data[3] = 1e6;  // finite under max subtraction
  EXPECT_EQ(ce_loss(sharp, t, m), 0.0);

  // 3-class brute force over two positions, one masked.
  const Tensor l({1, 3, 3}, {0.2, -1.0, 0.7, 3.0, 0.0, -2.0, 1.5, 1.5, -0.5});
  const std::vector<std::int32_t> tt{2, 0, 1};
  const std::vector<std::uint8_t> mm{1, 0, 1};
  const auto nlp = [&](std::size_t row, int target) {
    double z = 0;
    for (int j = 0; j < 3; ++j) z += std::exp(l.data[row * 3 + j]);
    return -std::log(std::exp(l.data[row * 3 + target]) / z);
  };
  EXPECT_NEAR(ce_loss(l, tt, mm), 0.5 * (nlp(0, 2) + nlp(2, 1)), 1e-14);
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(ce_loss(l, tt, none), std::invalid_argument);
}

TEST(Losses, MarginalLikelihoodExamples) {
  std::mt19937_64 gen(12);
  std::normal_distribution<double> n(0.0, 2.0);
  Tensor one({2, 3, 5});
  for (double& e : one.data) e = n(gen);
  const std::vector<std::int32_t> t{0, 4, 2, 1, 1, 3};
  const std::vector<std::uint8_t> m{1, 1, 0, 1, 0, 1};
  EXPECT_NEAR(mc_loss(one, t, m, 1), ce_loss(one, t, m), 1e-14);

  Tensor twice({4, 3, 5});
  std::copy(one.data.begin(), one.data.end(), twice.data.begin());
  std::copy(one.data.begin(), one.data.end(), twice.data.begin() + one.size());
  EXPECT_NEAR(mc_loss(twice, t, m, 2), ce_loss(one, t, m), 1e-13);

  // Per-sample target probabilities 0.5 and 0.25 with two classes / four classes.
  Tensor pair({2, 1, 4});
  pair.data = {0.0, 0.0, -1e300, -1e300, 0.0, 0.0, 0.0, 0.0};
  const std::vector<std::int32_t> t0{0};
  const std::vector<std::uint8_t> m0{1};
  EXPECT_NEAR(mc_loss(pair, t0, m0, 2), -std::log(0.375), 1e-14);
  EXPECT_THROW(mc_loss(pair, t0, m0, 0), std::invalid_argument);
}

// Per position, logsumexp <= max + log S, so the marginal loss is at least
// the best sample's cross-entropy minus log S; Jensen bounds it above by the
// mean over samples.
TEST(Losses, FiniteAndBoundedBySamples) {
  std::mt19937_64 gen(13);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t s = 1 + trial % 5, v = 6;
    Tensor l({s, 1, v});
    for (double& e : l.data) e = n(gen) * (trial % 2 ? 1e3 : 3.0);
    const std::vector<std::int32_t> tg{static_cast<std::int32_t>(gen() % v)};
    const std::vector<std::uint8_t> m{1};
    const double mc = mc_loss(l, tg, m, s);
    ASSERT_TRUE(std::isfinite(mc));
    double best = 1e300, mean = 0;
    for (std::size_t k = 0; k < s; ++k) {
      Tensor one({1, 1, v});
      std::copy(l.data.begin() + k * v, l.data.begin() + (k + 1) * v, one.data.begin());
      const double ce = ce_loss(one, tg, m);
      best = std::min(best, ce);
      mean += ce / static_cast<double>(s);
    }
    EXPECT_GE(mc, best - std::log(static_cast<double>(s)) - 1e-9);
    EXPECT_LE(mc, mean + 1e-9 * std::max(1.0, mean));
  }
}

TEST(Accuracy, MaskedArgmax) {
  const std::vector<double> logits{0.1, 0.9, 0.8, 0.2, 0.3, 0.4};
  const std::vector<std::int32_t> t{1, 1, 0};
  const std::vector<std::uint8_t> m{1, 1, 0};
  const auto acc = masked_accuracy<double>(logits, 2, t, m);
  EXPECT_EQ(acc.total, 2u);
  EXPECT_EQ(acc.correct, 1u);
  EXPECT_DOUBLE_EQ(acc.value(), 0.5);
}

TEST(Checkpoint, RoundTripAndRejectsCorruption) {
  const auto p = init_model(tiny_config(), 21);
  const auto path = std::filesystem::temp_directory_path() / "kla_test_ckpt.bin";
  save_tensors(path, p);
  const auto q = load_tensors(path);
  EXPECT_EQ(q.names, p.names);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(q.tensors[i].shape, p.tensors[i].shape);
    EXPECT_EQ(q.tensors[i].data, p.tensors[i].data);
  }
  // Header layout: magic, version, count, then the first name length.
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  std::uint32_t version = 0, name_len = 0;
  std::uint64_t count = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&count), 8);
  in.read(reinterpret_cast<char*>(&name_len), 4);
  EXPECT_EQ(std::string(magic, 8), "KLACKPT1");
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(count, p.size());
  EXPECT_EQ(name_len, p.names[0].size());
  in.close();

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_tensors(path), std::runtime_error);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOTACKPT";
  }
  EXPECT_THROW(load_tensors(path), std::runtime_error);
  std::filesystem::remove(path);
}

class WholeModelGradient : public ::testing::TestWithParam<LossMode> {};

TEST_P(WholeModelGradient, MatchesCentralDifferences) {
  auto c = tiny_config(GetParam());
  auto p = init_model(c, 31);
  std::mt19937_64 gen(32);
  // Non-zero head so every upstream parameter receives gradient.
  randomize(p, "head.w", gen, 0.5);
  randomize(p, "head.b", gen, 0.1);
  const auto b = random_batch(gen, 2, 8, c.vocab_size);
  ad::GradCheckOptions opt;
  opt.probes = 240;
  opt.seed = 33;
  const auto report = check_model_gradients(p, c, b, 34, opt);
  EXPECT_GE(report.probes, 200u);
  EXPECT_LE(report.max_rel_error, 1e-4) << p.names[report.worst_tensor] << "[" << report.worst_index
                                        << "] analytic " << report.worst_analytic << " numeric "
                                        << report.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(BothLosses, WholeModelGradient,
                         ::testing::Values(LossMode::posterior_mean, LossMode::marginal_mc));

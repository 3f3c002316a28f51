#include "kla/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "kla/ops.hpp"
#include "kla/rng.hpp"

namespace kla::model {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

std::string block_name(std::size_t i, const char* leaf) { return "blocks." + std::to_string(i) + "." + leaf; }

Tensor glorot(std::mt19937_64& gen, std::size_t fan_in, std::size_t fan_out) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
  Tensor t({fan_in, fan_out});
  for (double& x : t.data) x = dist(gen);
  return t;
}

Tensor from_vector(Shape shape, const std::vector<double>& values) { return Tensor(std::move(shape), values); }

template <typename T>
std::vector<T> cast_copy(const Tensor& t) {
  return std::vector<T>(t.data.begin(), t.data.end());
}

template <typename T>
void rms_norm_rows(std::vector<T>& x, std::size_t width, const std::vector<T>& scale) {
  const std::size_t rows = x.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x.data() + r * width;
    T ss{0};
    for (std::size_t j = 0; j < width; ++j) ss += row[j] * row[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(width) + static_cast<T>(layer::kNormEps));
    for (std::size_t j = 0; j < width; ++j) row[j] *= inv * scale[j];
  }
}

template <typename T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
std::vector<T> matmul_rows(const std::vector<T>& x, std::size_t rows, std::size_t in, const std::vector<T>& w,
                           std::size_t out) {
  std::vector<T> y(rows * out);
  Map<T>(y.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out)).noalias() =
      ConstMap<T>(x.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in)) *
      ConstMap<T>(w.data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  return y;
}

void check_tokens(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t steps, std::size_t vocab) {
  if (batch == 0 || steps == 0) throw std::invalid_argument("model: batch and steps must be >= 1");
  if (tokens.size() != batch * steps) throw std::invalid_argument("model: token count must equal B*T");
  for (const auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::invalid_argument("model: token id " + std::to_string(id) + " out of range [0, " +
                                  std::to_string(vocab) + ")");
    }
  }
}

// Plain forward through the block stack. Returns the final-normed stream
// (B, T, D) and, if requested, each block's mixer input.
template <typename T>
std::vector<T> trunk_values(const Parameters& params, const ModelConfig& config, std::span<const std::int32_t> tokens,
                            std::size_t batch, std::size_t steps, std::vector<std::vector<double>>* mixer_in) {
  config.validate();
  check_parameters(config, params);
  check_tokens(tokens, batch, steps, config.vocab_size);
  const std::size_t d = config.d_model, rows = batch * steps, kernel = config.conv_kernel;
  const Tensor& embed = params.at("embed");
  std::vector<T> x(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = embed.data.data() + static_cast<std::size_t>(tokens[r]) * d;
    for (std::size_t j = 0; j < d; ++j) x[r * d + j] = static_cast<T>(src[j]);
  }
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    std::vector<T> h = x;
    rms_norm_rows(h, d, cast_copy<T>(params.at(block_name(i, "norm"))));
    const auto uz = matmul_rows(h, rows, d, cast_copy<T>(params.at(block_name(i, "in_proj"))), 2 * d);
    const auto w = cast_copy<T>(params.at(block_name(i, "conv_w")));
    const auto bias = cast_copy<T>(params.at(block_name(i, "conv_b")));
    std::vector<T> c(rows * d);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          T acc = bias[j];
          for (std::size_t k = 0; k < kernel && k <= t; ++k) acc += w[k * d + j] * uz[((b * steps + t - k) * 2 * d) + j];
          c[(b * steps + t) * d + j] = silu(acc);
        }
      }
    }
    if (mixer_in) mixer_in->emplace_back(c.begin(), c.end());
    const auto mp = mixer_params<T>(params, i, config);
    const auto mixed = layer::kla_forward<T>(c, batch, steps, mp, false, config.layer);
    std::vector<T> o(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) o[r * d + j] = mixed.y_mu[r * d + j] * silu(uz[r * 2 * d + d + j]);
    }
    const auto delta = matmul_rows(o, rows, d, cast_copy<T>(params.at(block_name(i, "out_proj"))), d);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += delta[k];
  }
  rms_norm_rows(x, d, cast_copy<T>(params.at("final_norm")));
  return x;
}

template <typename T>
std::vector<T> head_values(const Parameters& params, const ModelConfig& config, const std::vector<T>& h,
                           std::size_t batch, std::size_t steps) {
  const std::size_t d = config.d_model, v = config.vocab_size, rows = batch * steps;
  if (config.head == HeadKind::next_token) {
    auto logits = matmul_rows(h, rows, d, cast_copy<T>(params.at("head.w")), v);
    const auto b = cast_copy<T>(params.at("head.b"));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < v; ++j) logits[r * v + j] += b[j];
    }
    return logits;
  }
  // Compression: last position plus positional encoding, then the MLP.
  const auto pe = positional_encoding(steps, d);
  std::vector<T> in(rows * d);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* last = h.data() + (b * steps + steps - 1) * d;
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t j = 0; j < d; ++j) in[(b * steps + t) * d + j] = last[j] + static_cast<T>(pe[t * d + j]);
    }
  }
  const auto dense = [&](const std::vector<T>& x, std::size_t n_in, const char* w, const char* bias, std::size_t n_out,
                         bool act) {
    auto y = matmul_rows(x, rows, n_in, cast_copy<T>(params.at(w)), n_out);
    const auto bv = cast_copy<T>(params.at(bias));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n_out; ++j) {
        T& e = y[r * n_out + j];
        e += bv[j];
        if (act) e = silu(e);
      }
    }
    return y;
  };
  const auto h1 = dense(in, d, "comp.w1", "comp.b1", kCompressionHidden1, true);
  const auto h2 = dense(h1, kCompressionHidden1, "comp.w2", "comp.b2", kCompressionHidden2, true);
  return dense(h2, kCompressionHidden2, "comp.w3", "comp.b3", v, false);
}

}  // namespace

LossMode parse_loss_mode(const std::string& name) {
  if (name == "posterior_mean") return LossMode::posterior_mean;
  if (name == "marginal_mc") return LossMode::marginal_mc;
  throw std::invalid_argument("unknown loss mode '" + name + "' (expected posterior_mean or marginal_mc)");
}

std::string to_string(LossMode mode) { return mode == LossMode::posterior_mean ? "posterior_mean" : "marginal_mc"; }

HeadKind parse_head_kind(const std::string& name) {
  if (name == "next_token") return HeadKind::next_token;
  if (name == "compression") return HeadKind::compression;
  throw std::invalid_argument("unknown head '" + name + "' (expected next_token or compression)");
}

std::string to_string(HeadKind kind) { return kind == HeadKind::next_token ? "next_token" : "compression"; }

void ModelConfig::validate() const {
  if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size must be >= 1");
  if (d_model < 1 || d_state < 1) throw std::invalid_argument("ModelConfig: d_model and d_state must be >= 1");
  if (conv_kernel < 1) throw std::invalid_argument("ModelConfig: conv_kernel must be >= 1");
  if (loss_mode == LossMode::marginal_mc && mc_samples < 1) {
    throw std::invalid_argument("ModelConfig: mc_samples must be >= 1");
  }
}

void Parameters::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("Parameters: duplicate tensor '" + name + "'");
  names.push_back(std::move(name));
  tensors.push_back(std::move(value));
}

std::size_t Parameters::index(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::invalid_argument("Parameters: no tensor named '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

bool Parameters::contains(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

std::size_t Parameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

Parameters init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, n = config.d_state, v = config.vocab_size, k = config.conv_kernel;
  Parameters p;
  auto gen = rng::engine({seed, 0x6d6f64656cULL});
  std::normal_distribution<double> unit(0.0, 1.0);
  Tensor embed({v, d});
  for (double& x : embed.data) x = unit(gen);
  p.add("embed", std::move(embed));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    p.add(block_name(i, "norm"), Tensor({d}, 1.0));
    p.add(block_name(i, "in_proj"), glorot(gen, d, 2 * d));
    // Depthwise conv: fan_in is the kernel length.
    std::uniform_real_distribution<double> conv(-1.0 / std::sqrt(static_cast<double>(k)),
                                                1.0 / std::sqrt(static_cast<double>(k)));
    Tensor w({k, d});
    for (double& x : w.data) x = conv(gen);
    p.add(block_name(i, "conv_w"), std::move(w));
    p.add(block_name(i, "conv_b"), Tensor({d}));
    const auto m = layer::init_layer_params(d, n, rng::derive_key({seed, i, 0x6d6978ULL}));
    p.add(block_name(i, "mixer.w_k"), from_vector({d, n}, m.w_k));
    p.add(block_name(i, "mixer.w_q"), from_vector({d, n}, m.w_q));
    p.add(block_name(i, "mixer.w_v"), from_vector({d, d}, m.w_v));
    p.add(block_name(i, "mixer.w_lv"), from_vector({d, d}, m.w_lv));
    p.add(block_name(i, "mixer.b_lv"), from_vector({d}, m.b_lv));
    p.add(block_name(i, "mixer.k_norm"), from_vector({n}, m.k_norm));
    p.add(block_name(i, "mixer.q_norm"), from_vector({n}, m.q_norm));
    p.add(block_name(i, "mixer.a_log"), from_vector({n, d}, m.a_log));
    p.add(block_name(i, "mixer.p"), from_vector({n, d}, m.p));
    p.add(block_name(i, "mixer.dt_raw"), from_vector({n, d}, m.dt_raw));
    p.add(block_name(i, "out_proj"), glorot(gen, d, d));
  }
  p.add("final_norm", Tensor({d}, 1.0));
  if (config.head == HeadKind::next_token) {
    p.add("head.w", Tensor({d, v}));
    p.add("head.b", Tensor({v}));
  } else {
    p.add("comp.w1", glorot(gen, d, kCompressionHidden1));
    p.add("comp.b1", Tensor({kCompressionHidden1}));
    p.add("comp.w2", glorot(gen, kCompressionHidden1, kCompressionHidden2));
    p.add("comp.b2", Tensor({kCompressionHidden2}));
    p.add("comp.w3", Tensor({kCompressionHidden2, v}));
    p.add("comp.b3", Tensor({v}));
  }
  return p;
}

void check_parameters(const ModelConfig& config, const Parameters& params) {
  const Parameters expected = [&] {
    // Shapes only; the seed is irrelevant.
    return init_model(config, 0);
  }();
  if (expected.names != params.names) {
    throw std::invalid_argument("parameters do not match the model configuration (tensor names differ)");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (expected.tensors[i].shape != params.tensors[i].shape) {
      throw std::invalid_argument("parameter '" + params.names[i] + "' has shape " +
                                  shape_string(params.tensors[i].shape) + ", expected " +
                                  shape_string(expected.tensors[i].shape));
    }
  }
}

template <std::floating_point T>
layer::LayerParams<T> mixer_params(const Parameters& params, std::size_t block, const ModelConfig& config) {
  layer::LayerParams<T> m;
  m.d_model = config.d_model;
  m.d_state = config.d_state;
  m.w_k = cast_copy<T>(params.at(block_name(block, "mixer.w_k")));
  m.w_q = cast_copy<T>(params.at(block_name(block, "mixer.w_q")));
  m.w_v = cast_copy<T>(params.at(block_name(block, "mixer.w_v")));
  m.w_lv = cast_copy<T>(params.at(block_name(block, "mixer.w_lv")));
  m.b_lv = cast_copy<T>(params.at(block_name(block, "mixer.b_lv")));
  m.k_norm = cast_copy<T>(params.at(block_name(block, "mixer.k_norm")));
  m.q_norm = cast_copy<T>(params.at(block_name(block, "mixer.q_norm")));
  m.a_log = cast_copy<T>(params.at(block_name(block, "mixer.a_log")));
  m.p = cast_copy<T>(params.at(block_name(block, "mixer.p")));
  m.dt_raw = cast_copy<T>(params.at(block_name(block, "mixer.dt_raw")));
  return m;
}

std::vector<double> positional_encoding(std::size_t steps, std::size_t dim) {
  std::vector<double> pe(steps * dim);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(dim));
      pe[t * dim + j] = j % 2 == 0 ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

std::vector<ad::Var> parameter_leaves(ad::Tape& tape, const Parameters& params) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const auto& t : params.tensors) vars.push_back(tape.leaf(t));
  return vars;
}

ad::Var block_forward(ad::Tape& tape, ad::Var x, std::span<const ad::Var> vars, const Parameters& params,
                      const ModelConfig& config, std::size_t block, const ForwardOptions& options) {
  if (vars.size() != params.size()) throw std::invalid_argument("block_forward: one tape node per parameter required");
  const Shape shape = tape.shape(x);  // copy: recording may reallocate the tape
  const std::size_t d = config.d_model, n = config.d_state;
  if (shape.size() != 3 || shape[2] != d) throw std::invalid_argument("block_forward: x must be (B, T, D)");
  const auto bv = [&](const char* leaf) { return vars[params.index(block_name(block, leaf))]; };
  const ad::Var h = ad::rms_norm(tape, x, bv("norm"), layer::kNormEps);
  const ad::Var uz = ad::linear(tape, h, bv("in_proj"));
  const ad::Var u = ad::slice_last(tape, uz, 0, d);
  const ad::Var z = ad::slice_last(tape, uz, d, d);
  const ad::Var c = ad::silu(tape, ad::causal_conv1d(tape, u, bv("conv_w"), bv("conv_b")));

  const ad::Var k = ad::rms_norm(tape, ad::linear(tape, c, bv("mixer.w_k")), bv("mixer.k_norm"), layer::kNormEps);
  const ad::Var q = ad::rms_norm(tape, ad::linear(tape, c, bv("mixer.w_q")), bv("mixer.q_norm"), layer::kNormEps);
  const ad::Var v = ad::linear(tape, c, bv("mixer.w_v"));
  const ad::Var lv = ad::add_scalar(
      tape, ad::softplus(tape, ad::linear(tape, c, bv("mixer.w_lv"), bv("mixer.b_lv"))), layer::kLambdaVFloor);
  layer::MixerConfig mc;
  mc.batch = shape[0];
  mc.steps = shape[1];
  mc.slots = n;
  mc.channels = d;
  mc.options = config.layer;
  mc.sample = options.samples > 0;
  mc.noise_seed = rng::derive_key({options.noise_seed, block});
  const ad::Var y = layer::kla_mixer(tape, q, k, v, lv, bv("mixer.a_log"), bv("mixer.p"), bv("mixer.dt_raw"), mc);
  const ad::Var o = ad::mul(tape, y, ad::silu(tape, z));
  return ad::add(tape, x, ad::linear(tape, o, bv("out_proj")));
}

ad::Var model_forward(ad::Tape& tape, std::span<const ad::Var> vars, const Parameters& params,
                      const ModelConfig& config, std::span<const std::int32_t> tokens, std::size_t batch,
                      std::size_t steps, const ForwardOptions& options) {
  config.validate();
  check_tokens(tokens, batch, steps, config.vocab_size);
  if (vars.size() != params.size()) throw std::invalid_argument("model_forward: one tape node per parameter required");
  const auto var = [&](const std::string& name) { return vars[params.index(name)]; };
  const std::size_t d = config.d_model;
  const std::size_t copies = std::max<std::size_t>(1, options.samples);

  ad::Var x = ad::gather_rows(tape, var("embed"), tokens, {batch, steps});
  if (copies > 1) x = ad::tile_batch(tape, x, copies);
  const std::size_t rows_b = copies * batch;
  for (std::size_t i = 0; i < config.n_layers; ++i) x = block_forward(tape, x, vars, params, config, i, options);
  x = ad::rms_norm(tape, x, var("final_norm"), layer::kNormEps);
  if (config.head == HeadKind::next_token) return ad::linear(tape, x, var("head.w"), var("head.b"));

  const ad::Var last = ad::repeat_time(tape, ad::select_time(tape, x, steps - 1), steps);
  const auto pe = positional_encoding(steps, d);
  Tensor pe_rows({rows_b, steps, d});
  for (std::size_t b = 0; b < rows_b; ++b) std::copy(pe.begin(), pe.end(), pe_rows.data.begin() + b * steps * d);
  const ad::Var in = ad::add(tape, last, tape.constant(std::move(pe_rows)));
  const ad::Var h1 = ad::silu(tape, ad::linear(tape, in, var("comp.w1"), var("comp.b1")));
  const ad::Var h2 = ad::silu(tape, ad::linear(tape, h1, var("comp.w2"), var("comp.b2")));
  return ad::linear(tape, h2, var("comp.w3"), var("comp.b3"));
}

ad::Var model_loss(ad::Tape& tape, std::span<const ad::Var> vars, const Parameters& params, const ModelConfig& config,
                   const Batch& batch, std::uint64_t noise_seed) {
  if (batch.targets.size() != batch.tokens.size() || batch.mask.size() != batch.tokens.size()) {
    throw std::invalid_argument("model_loss: tokens, targets and mask must have equal length");
  }
  if (config.loss_mode == LossMode::posterior_mean) {
    const ad::Var logits = model_forward(tape, vars, params, config, batch.tokens, batch.batch, batch.steps);
    return ad::cross_entropy(tape, logits, batch.targets, batch.mask);
  }
  ForwardOptions opts;
  opts.samples = config.mc_samples;
  opts.noise_seed = noise_seed;
  const ad::Var logits = model_forward(tape, vars, params, config, batch.tokens, batch.batch, batch.steps, opts);
  return ad::mc_marginal_nll(tape, logits, batch.targets, batch.mask, config.mc_samples);
}

LossAndGrad loss_and_gradients(const Parameters& params, const ModelConfig& config, const Batch& batch,
                               std::uint64_t noise_seed) {
  ad::Tape tape;
  const auto vars = parameter_leaves(tape, params);
  const ad::Var loss = model_loss(tape, vars, params, config, batch, noise_seed);
  tape.backward(loss);
  LossAndGrad out;
  out.loss = tape.value(loss).data[0];
  out.grads.reserve(vars.size());
  for (const auto v : vars) out.grads.push_back(tape.grad(v));
  return out;
}

double loss_value(const Parameters& params, const ModelConfig& config, const Batch& batch, std::uint64_t noise_seed) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const auto& t : params.tensors) vars.push_back(tape.constant(t));
  return tape.value(model_loss(tape, vars, params, config, batch, noise_seed)).data[0];
}

ad::GradCheckReport check_model_gradients(const Parameters& params, const ModelConfig& config, const Batch& batch,
                                          std::uint64_t noise_seed, const ad::GradCheckOptions& options) {
  const auto analytic = loss_and_gradients(params, config, batch, noise_seed);
  Parameters probe = params;
  const auto f = [&](const std::vector<Tensor>& values) {
    Parameters p{probe.names, values};
    return loss_value(p, config, batch, noise_seed);
  };
  return ad::finite_difference_check(f, probe.tensors, analytic.grads, options);
}

template <std::floating_point T>
std::vector<T> predict_logits(const Parameters& params, const ModelConfig& config,
                              std::span<const std::int32_t> tokens, std::size_t batch, std::size_t steps) {
  const auto h = trunk_values<T>(params, config, tokens, batch, steps, nullptr);
  return head_values<T>(params, config, h, batch, steps);
}

std::vector<std::vector<double>> mixer_inputs(const Parameters& params, const ModelConfig& config,
                                              std::span<const std::int32_t> tokens, std::size_t batch,
                                              std::size_t steps) {
  std::vector<std::vector<double>> out;
  trunk_values<double>(params, config, tokens, batch, steps, &out);
  return out;
}

template <typename T>
Accuracy masked_accuracy(std::span<const T> logits, std::size_t vocab, std::span<const std::int32_t> targets,
                         std::span<const std::uint8_t> mask) {
  if (logits.size() != targets.size() * vocab || mask.size() != targets.size()) {
    throw std::invalid_argument("masked_accuracy: logits must be (positions, vocab) with matching targets and mask");
  }
  Accuracy acc;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    const T* row = logits.data() + i * vocab;
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + vocab) - row);
    ++acc.total;
    if (best == targets[i]) ++acc.correct;
  }
  return acc;
}

void save_tensors(const std::filesystem::path& path, const Parameters& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  const auto put = [&](const auto& value) { out.write(reinterpret_cast<const char*>(&value), sizeof(value)); };
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put(kCheckpointVersion);
  put(static_cast<std::uint64_t>(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& name = tensors.names[i];
    const auto& t = tensors.tensors[i];
    put(static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(static_cast<std::uint32_t>(t.rank()));
    for (const auto dim : t.shape) put(static_cast<std::uint64_t>(dim));
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Parameters load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  const auto get = [&](auto& value) {
    in.read(reinterpret_cast<char*>(&value), sizeof(value));
    if (!in) throw std::runtime_error("truncated tensor file '" + path.string() + "'");
  };
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic))) {
    throw std::runtime_error("'" + path.string() + "' is not a tensor file (bad magic)");
  }
  std::uint32_t version = 0;
  get(version);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported tensor file version " + std::to_string(version));
  std::uint64_t count = 0;
  get(count);
  Parameters out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    get(len);
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint32_t rank = 0;
    get(rank);
    Shape shape(rank);
    for (auto& dim : shape) {
      std::uint64_t d = 0;
      get(d);
      dim = static_cast<std::size_t>(d);
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated tensor file '" + path.string() + "'");
    out.add(std::move(name), std::move(t));
  }
  return out;
}

template layer::LayerParams<float> mixer_params<float>(const Parameters&, std::size_t, const ModelConfig&);
template layer::LayerParams<double> mixer_params<double>(const Parameters&, std::size_t, const ModelConfig&);
template std::vector<float> predict_logits<float>(const Parameters&, const ModelConfig&, std::span<const std::int32_t>,
                                                  std::size_t, std::size_t);
template std::vector<double> predict_logits<double>(const Parameters&, const ModelConfig&,
                                                    std::span<const std::int32_t>, std::size_t, std::size_t);
template Accuracy masked_accuracy<float>(std::span<const float>, std::size_t, std::span<const std::int32_t>,
                                         std::span<const std::uint8_t>);
template Accuracy masked_accuracy<double>(std::span<const double>, std::size_t, std::span<const std::int32_t>,
                                          std::span<const std::uint8_t>);

}  // namespace kla::model

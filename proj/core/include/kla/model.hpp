#pragma once

// Language-model scaffold around the KLA mixer: token embedding, pre-norm
// gated blocks (causal conv -> mixer, multiplied by a SiLU gate branch),
// final norm and a decoder head. The Compression task replaces the head by a
// two-layer MLP reading the last position plus a positional encoding.

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kla/gradcheck.hpp"
#include "kla/layer.hpp"
#include "kla/tape.hpp"

namespace kla::model {

enum class LossMode { posterior_mean, marginal_mc };
enum class HeadKind { next_token, compression };

LossMode parse_loss_mode(const std::string& name);
std::string to_string(LossMode mode);
HeadKind parse_head_kind(const std::string& name);
std::string to_string(HeadKind kind);

inline constexpr std::size_t kCompressionHidden1 = 240;
inline constexpr std::size_t kCompressionHidden2 = 120;

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_model = 128;
  std::size_t n_layers = 1;
  std::size_t d_state = 16;
  std::size_t conv_kernel = 4;
  LossMode loss_mode = LossMode::posterior_mean;
  std::size_t mc_samples = layer::kDefaultSamples;
  HeadKind head = HeadKind::next_token;
  layer::LayerOptions layer;

  /// Throws std::invalid_argument on an unusable configuration.
  void validate() const;
};

/// Named parameter tensors in a fixed order.
struct Parameters {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  void add(std::string name, Tensor value);
  [[nodiscard]] std::size_t size() const { return tensors.size(); }
  [[nodiscard]] std::size_t index(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
  Tensor& at(const std::string& name) { return tensors[index(name)]; }
  [[nodiscard]] const Tensor& at(const std::string& name) const { return tensors[index(name)]; }
  [[nodiscard]] std::size_t scalar_count() const;
};

Parameters init_model(const ModelConfig& config, std::uint64_t seed);

/// Throws std::invalid_argument unless `params` has exactly the tensors and
/// shapes `config` requires.
void check_parameters(const ModelConfig& config, const Parameters& params);

/// Layer-`i` mixer parameters as the plain struct used by kla/layer.hpp.
template <std::floating_point T>
layer::LayerParams<T> mixer_params(const Parameters& params, std::size_t block, const ModelConfig& config);

/// Sinusoidal encoding, (T, D).
std::vector<double> positional_encoding(std::size_t steps, std::size_t dim);

struct Batch {
  std::size_t batch = 0, steps = 0;
  std::vector<std::int32_t> tokens;   // (B, T)
  std::vector<std::int32_t> targets;  // (B, T), kIgnore where masked out
  std::vector<std::uint8_t> mask;     // (B, T)
};

inline constexpr std::int32_t kIgnore = -1;

struct ForwardOptions {
  /// Posterior samples per sequence; 0 uses the posterior mean.
  std::size_t samples = 0;
  std::uint64_t noise_seed = 0;
};

/// One pre-norm gated block on the tape: x (rows, T, D) -> x + out_proj(...).
ad::Var block_forward(ad::Tape& tape, ad::Var x, std::span<const ad::Var> vars, const Parameters& params,
                      const ModelConfig& config, std::size_t block, const ForwardOptions& options = {});

/// Model forward on the tape. `vars` are tape nodes aligned with
/// `params.names`. Returns logits (S*B, T, V) sample-major, S = max(1, samples).
ad::Var model_forward(ad::Tape& tape, std::span<const ad::Var> vars, const Parameters& params,
                      const ModelConfig& config, std::span<const std::int32_t> tokens, std::size_t batch,
                      std::size_t steps, const ForwardOptions& options = {});

/// Training loss for the configured mode (cross-entropy on the posterior
/// mean, or the Monte-Carlo marginal likelihood over mc_samples draws).
ad::Var model_loss(ad::Tape& tape, std::span<const ad::Var> vars, const Parameters& params, const ModelConfig& config,
                   const Batch& batch, std::uint64_t noise_seed);

/// Registers every parameter as a tape leaf.
std::vector<ad::Var> parameter_leaves(ad::Tape& tape, const Parameters& params);

struct LossAndGrad {
  double loss = 0;
  std::vector<Tensor> grads;  // aligned with Parameters::tensors
};

/// One tape: training loss and its gradient with respect to every parameter.
LossAndGrad loss_and_gradients(const Parameters& params, const ModelConfig& config, const Batch& batch,
                               std::uint64_t noise_seed);
/// Training loss without recording backward closures.
double loss_value(const Parameters& params, const ModelConfig& config, const Batch& batch, std::uint64_t noise_seed);

/// Analytic gradients of the training loss against central differences on
/// randomly probed parameter coordinates.
ad::GradCheckReport check_model_gradients(const Parameters& params, const ModelConfig& config, const Batch& batch,
                                          std::uint64_t noise_seed, const ad::GradCheckOptions& options = {});

/// Posterior-mean logits without a tape, (B, T, V). Float evaluation casts
/// parameters once; accumulation stays in T.
template <std::floating_point T>
std::vector<T> predict_logits(const Parameters& params, const ModelConfig& config,
                              std::span<const std::int32_t> tokens, std::size_t batch, std::size_t steps);

struct Accuracy {
  std::size_t correct = 0, total = 0;
  [[nodiscard]] double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Argmax accuracy over positions with mask != 0. logits (B, T, V).
template <typename T>
Accuracy masked_accuracy(std::span<const T> logits, std::size_t vocab, std::span<const std::int32_t> targets,
                         std::span<const std::uint8_t> mask);

/// Mixer input c (B, T, D) of every block from a posterior-mean pass, for
/// diagnostics.
std::vector<std::vector<double>> mixer_inputs(const Parameters& params, const ModelConfig& config,
                                              std::span<const std::int32_t> tokens, std::size_t batch,
                                              std::size_t steps);

// Flat checkpoint: "KLACKPT1" magic, u32 version, u64 tensor count, then per
// tensor u32 name length, name bytes, u32 rank, u64 dims, float64 payload;
// all little-endian, payload row-major.
inline constexpr char kCheckpointMagic[8] = {'K', 'L', 'A', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_tensors(const std::filesystem::path& path, const Parameters& tensors);
Parameters load_tensors(const std::filesystem::path& path);

}  // namespace kla::model

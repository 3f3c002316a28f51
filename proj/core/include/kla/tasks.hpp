#pragma once

// Seeded synthetic tasks. Every sequence is a pure function of
// (config, split, index): its random stream is keyed by those values, so any
// sequence can be regenerated alone and train/eval streams never overlap.
//
// Token layout: content ids come first, task-specific special tokens are
// appended after them (TaskConfig::model_vocab()).

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kla/model.hpp"

namespace kla::tasks {

enum class TaskKind {
  in_context_recall,
  noisy_recall,
  fuzzy_recall,
  selective_copy,
  compression,
  memorization,
  mqar,
  a5,
};

TaskKind parse_task(const std::string& name);
std::string to_string(TaskKind kind);
const std::vector<std::string>& task_names();

enum class Split : std::uint64_t { train = 0, eval = 1 };

struct TaskConfig {
  TaskKind kind = TaskKind::in_context_recall;
  std::size_t vocab_size = 16;  // content tokens (keys + values for recall tasks)
  std::size_t seq_len = 128;
  std::size_t train_seqs = 12800;
  std::size_t eval_seqs = 1280;
  std::uint64_t seed = 0;
  // Selective copy.
  std::size_t num_copy = 16;
  // Recall and memorization: keys are [0, key_vocab), values the rest.
  std::size_t key_vocab = 8;
  /// Distinct pairs in the prefix; 0 means key_vocab (capped by length).
  std::size_t num_pairs = 0;
  /// Queries after the prefix; 0 fills the sequence.
  std::size_t num_queries = 0;
  // Noisy recall.
  double noise_fraction = 0.2;
  std::size_t noise_vocab = 16;
  // Fuzzy recall: key and value spans have 1..max_motif tokens.
  std::size_t max_motif = 3;

  [[nodiscard]] std::size_t value_vocab() const { return vocab_size - key_vocab; }
  /// Content plus special tokens: the model's vocabulary.
  [[nodiscard]] std::size_t model_vocab() const;
  [[nodiscard]] std::size_t pairs() const;
  /// Throws std::invalid_argument for infeasible settings.
  void validate() const;
};

/// Table-6 style defaults per task (MQAR: the long-context hard setting).
TaskConfig default_config(TaskKind kind);

struct Sequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;  // model::kIgnore where mask == 0
  std::vector<std::uint8_t> mask;
};

Sequence generate(const TaskConfig& config, Split split, std::size_t index);

/// Sequences [first, first + count) of a split as one batch.
model::Batch make_batch(const TaskConfig& config, Split split, std::size_t first, std::size_t count);
/// Arbitrary sequence indices as one batch.
model::Batch make_batch(const TaskConfig& config, Split split, std::span<const std::size_t> indices);

/// Order-sensitive 64-bit hash of the first `count` sequences of a split.
std::uint64_t dataset_hash(const TaskConfig& config, Split split, std::size_t count);

// Special token ids.
std::int32_t filler_token(const TaskConfig& config);     // recall / MQAR padding
std::int32_t separator_token(const TaskConfig& config);  // fuzzy recall pair boundary
std::int32_t blank_token(const TaskConfig& config);      // selective copy
std::int32_t insert_token(const TaskConfig& config);     // selective copy, memorization
std::int32_t compress_token(const TaskConfig& config);   // compression

/// Fixed key -> value dictionary of the memorization task (depends on seed only).
std::vector<std::int32_t> memorization_dictionary(const TaskConfig& config);

// A5: even permutations of {0..4}.

struct Permutation {
  std::array<std::uint8_t, 5> image{0, 1, 2, 3, 4};
  friend bool operator==(const Permutation&, const Permutation&) = default;
  friend auto operator<=>(const Permutation&, const Permutation&) = default;
};

bool is_even(const Permutation& p);
/// Throws std::invalid_argument unless the image is a bijection on {0..4}.
void check_bijection(const Permutation& p);
/// (g o h)(x) = g(h(x)). Throws std::invalid_argument on an odd input.
Permutation a5_compose(const Permutation& g, const Permutation& h);
Permutation a5_inverse(const Permutation& g);
/// The 60 elements in lexicographic order of their images; token id = position.
const std::vector<Permutation>& a5_elements();
std::int32_t a5_token(const Permutation& p);
const Permutation& a5_element(std::int32_t token);

// Dataset dump: "KLADSET1" magic, u32 version, u64 record count, then per
// record u32 length L, L int32 token ids, L int32 target ids, ceil(L/8)
// bytes of mask bits (LSB first); little-endian.
inline constexpr char kDatasetMagic[8] = {'K', 'L', 'A', 'D', 'S', 'E', 'T', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, std::span<const Sequence> records);
std::vector<Sequence> read_dataset(const std::filesystem::path& path);

}  // namespace kla::tasks

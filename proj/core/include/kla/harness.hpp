#pragma once

// Experiment plumbing shared by the `kla` CLI and the acceptance suite:
// run configuration, JSONL metrics, training with early stopping, evaluation,
// scaling benchmarks, ablation pairs and diagnostic dumps.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kla/model.hpp"
#include "kla/tasks.hpp"

namespace kla::harness {

using Json = nlohmann::json;

/// Environment variable naming the default output root.
inline constexpr const char* kOutRootEnv = "KLA_OUT_ROOT";

enum class Precision { f32, f64 };
Precision parse_precision(const std::string& name);
std::string to_string(Precision precision);

struct TrainerConfig {
  std::size_t max_epochs = 750;
  std::size_t patience = 70;
  std::size_t batch_size = 32;
  std::vector<std::uint64_t> seeds{0};
  /// Evaluation arithmetic; gradients are always taken in double.
  Precision precision = Precision::f64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 5.0;
  /// Stop a seed once eval accuracy reaches this value; 0 disables.
  double stop_accuracy = 0.0;
  /// Train sequences re-scored each epoch for train accuracy; 0 means all.
  std::size_t train_eval_seqs = 0;
};

struct RunConfig {
  tasks::TaskConfig task;
  model::ModelConfig model;
  TrainerConfig trainer;
  /// Scan plan used by every layer of the run.
  scan::ScanMode plan = scan::ScanMode::sequential;
  std::filesystem::path out_dir;

  /// Model vocabulary follows the task; throws std::invalid_argument otherwise.
  void validate() const;
};

/// Desk-scale defaults for a task, or the paper-scale setting when requested.
RunConfig default_run_config(tasks::TaskKind kind, bool paper_scale = false);

Json to_json(const RunConfig& config);
/// Overlays `patch` on `base`. Unknown keys throw std::invalid_argument.
RunConfig apply_json(RunConfig base, const Json& patch);
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base);

/// Keeps freed memory in the process heap (glibc only; otherwise a no-op).
/// Training frees and reallocates the same large tape buffers every step;
/// returning them to the kernel each time doubles step time.
void retain_freed_memory();

/// Output root: $KLA_OUT_ROOT if set, else ./runs.
std::filesystem::path default_out_root();

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "eval"
  double loss = 0.0;
  double accuracy = 0.0;  // in [0, 1]
  double seconds = 0.0;   // wall clock since the seed started
  std::uint64_t seed = 0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

Json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const Json& json);

/// Append-only line-delimited writer; every record is flushed on write.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const MetricsRecord& record);
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Posterior-mean cross-entropy and masked accuracy over sequences
/// [0, count) of a split, processed in chunks of `batch_size`.
EvalResult evaluate(const model::Parameters& params, const model::ModelConfig& model, const tasks::TaskConfig& task,
                    tasks::Split split, std::size_t count, std::size_t batch_size, Precision precision);

enum class StopReason { max_epochs, patience, target_accuracy };
std::string to_string(StopReason reason);

/// Tracks the best eval accuracy; only a strict increase counts as progress.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Records one epoch; returns true when it is the new best.
  bool update(double accuracy);
  /// True once `patience` consecutive epochs failed to improve.
  [[nodiscard]] bool exhausted() const { return seen_ && stale_ >= patience_; }
  [[nodiscard]] double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double best_accuracy = 0.0;
  double best_loss = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double final_train_accuracy = 0.0;
  StopReason stop = StopReason::max_epochs;
  std::filesystem::path checkpoint;
};

struct TrainSummary {
  std::vector<SeedResult> seeds;
  double mean_accuracy = 0.0;
  /// Seeds whose best eval accuracy reached `threshold`.
  [[nodiscard]] std::size_t seeds_reaching(double threshold) const;
  std::uint64_t train_hash = 0;
  std::uint64_t eval_hash = 0;
};

/// A5 rule: solved when at least one seed reaches 90% accuracy.
inline constexpr double kA5SolvedAccuracy = 0.9;

/// Trains one seed with AdamW and early stopping on eval accuracy, appending
/// per-epoch train and eval records to `metrics`. The best-epoch parameters
/// are written to `checkpoint` (if non-empty) and returned through `best`.
SeedResult train_seed(const RunConfig& config, std::uint64_t seed, MetricsWriter& metrics,
                      const std::filesystem::path& checkpoint, model::Parameters* best = nullptr);

/// Writes config.json (resolved config, code hash, dataset hashes),
/// metrics.jsonl, seed_<s>/checkpoint.bin and summary.json under out_dir.
TrainSummary run_train(const RunConfig& config);

/// A run directory reloaded from config.json and one seed checkpoint.
struct LoadedRun {
  RunConfig config;
  model::Parameters params;
};
LoadedRun load_run(const std::filesystem::path& run_dir, std::optional<std::uint64_t> seed);

// Scaling benchmark.

enum class BenchPass { forward, forward_backward };
std::string to_string(BenchPass pass);

struct BenchOptions {
  std::vector<std::size_t> lengths{1024, 4096, 16384};
  std::size_t d_model = 64;
  std::size_t d_state = 16;
  std::size_t warmup = 3;
  std::size_t repeats = 5;
  std::size_t forward_batch = 1;
  std::size_t backward_batch = 4;
  /// Forward+backward is skipped above this length (tape memory); 0 skips it.
  std::size_t max_backward_length = 4096;
  std::uint64_t seed = 0;
};

struct BenchPoint {
  std::size_t length = 0;
  scan::ScanMode plan = scan::ScanMode::sequential;
  BenchPass pass = BenchPass::forward;
  std::size_t batch = 0;
  double median_seconds = 0.0;
  std::vector<double> samples;
};

Json to_json(const BenchPoint& point);

/// Times one KLA block (model forward, f64) per plan and length; lengths must
/// be ascending. Single process, monotonic clock, median of the repeats.
std::vector<BenchPoint> run_bench_scaling(const BenchOptions& options);

/// sequential / parallel median forward time per length (ascending).
std::vector<double> forward_speedups(const std::vector<BenchPoint>& points);
std::string format_bench_table(const std::vector<BenchPoint>& points);

// Ablations.

enum class AblationKind { process_noise_zero, ou_vs_naive_discretization };
/// Throws std::invalid_argument listing the valid kinds.
AblationKind parse_ablation(const std::string& name);
std::string to_string(AblationKind kind);
const std::vector<std::string>& ablation_names();

/// The ablated counterpart of `base`.
RunConfig ablated_config(const RunConfig& base, AblationKind kind);

struct AblationResult {
  AblationKind kind = AblationKind::process_noise_zero;
  TrainSummary full;
  TrainSummary ablated;
  /// ablated minus full best accuracy, per seed.
  std::vector<double> deltas;
};

/// Trains base and ablated configs on identical seeds and data under
/// out_dir/full and out_dir/ablated; writes ablation.json.
AblationResult run_ablation(const RunConfig& base, AblationKind kind);

// Diagnostics.

struct DumpOptions {
  std::size_t index = 0;  // eval-split sequence
  std::size_t block = 0;
  std::vector<std::size_t> channels;  // empty: all channels
  std::size_t cap = 1024;
};

struct DumpSummary {
  std::size_t steps = 0;
  std::size_t channels = 0;
  /// max |M v + init - y| against the layer forward.
  double reconstruction_error = 0.0;
  double max_upper_entry = 0.0;  // largest |M[t, s]| with s > t
  double min_variance = 0.0;
  /// Mean posterior variance at task-relevant positions vs the rest.
  double relevant_variance = 0.0;
  double background_variance = 0.0;
};

Json to_json(const DumpSummary& summary);

/// Writes attention.bin ("attention" (C,T,T), "init" (C,T), "values" (C,T)),
/// variance.bin ("variance" (T,D), "tokens" (T), "targets" (T), "mask" (T),
/// "relevant" (T)) and diagnostics.json into out_dir. Throws
/// std::invalid_argument when T exceeds the cap.
DumpSummary dump_diagnostics(const model::Parameters& params, const RunConfig& config, const DumpOptions& options,
                             const std::filesystem::path& out_dir);

/// Positions carrying task content (selective-copy data tokens, recall keys
/// and values); everything else is background.
std::vector<std::uint8_t> relevant_positions(const tasks::TaskConfig& task, const tasks::Sequence& sequence);

}  // namespace kla::harness

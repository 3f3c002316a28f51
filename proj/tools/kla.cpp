// kla: train, evaluate, benchmark, ablate and inspect KLA models.
//
// Configuration merges as task defaults < --config file < flags. Runs write
// under --out, or under $KLA_OUT_ROOT (default ./runs) when --out is absent.

#include <cstdio>
#include <algorithm>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kla/harness.hpp"
#include "kla/version.hpp"

namespace fs = std::filesystem;
using namespace kla;
using harness::Json;

namespace {

struct RunFlags {
  std::string config;
  std::string task;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::string plan;
  std::string precision;
  std::string out;
  bool paper_scale = false;
  bool dry_run = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "JSON config overlaid on the task defaults")->check(CLI::ExistingFile);
  cmd->add_option("--task", f.task, "Task name");
  auto* seed = cmd->add_option("--seed", f.seed, "Single training seed");
  cmd->add_option("--seeds", f.seeds, "Comma-separated training seeds")->delimiter(',')->excludes(seed);
  cmd->add_option("--plan", f.plan, "Scan plan")->check(CLI::IsMember({"sequential", "parallel"}));
  cmd->add_option("--precision", f.precision, "Evaluation precision")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_flag("--paper-scale", f.paper_scale, "Start from the paper-scale defaults");
  cmd->add_flag("--dry-run", f.dry_run, "Print the resolved config as JSON and exit");
}

// The resolved config without its output directory, loadable with --config.
void print_config(const harness::RunConfig& c) {
  Json j = harness::to_json(c);
  j.erase("out_dir");
  std::printf("%s\n", j.dump(2).c_str());
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", std::localtime(&now));
  return buf;
}

fs::path out_dir_or_default(const std::string& out, const std::string& name) {
  return out.empty() ? harness::default_out_root() / (name + "-" + timestamp()) : fs::path(out);
}

harness::RunConfig resolve(const RunFlags& f, const std::string& command) {
  Json file;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    file = Json::parse(in);
  }
  tasks::TaskKind kind = tasks::TaskKind::in_context_recall;
  if (!f.task.empty()) {
    kind = tasks::parse_task(f.task);
  } else if (file.contains("task") && file["task"].contains("name")) {
    kind = tasks::parse_task(file["task"]["name"].get<std::string>());
  }
  harness::RunConfig c = harness::default_run_config(kind, f.paper_scale);
  if (!file.is_null()) {
    if (!f.task.empty() && file.contains("task")) file["task"]["name"] = f.task;
    c = harness::apply_json(c, file);
  }
  Json flags = Json::object();
  if (f.seed) flags["trainer"]["seeds"] = std::vector<std::uint64_t>{*f.seed};
  if (!f.seeds.empty()) flags["trainer"]["seeds"] = f.seeds;
  if (!f.precision.empty()) flags["trainer"]["precision"] = f.precision;
  if (!f.plan.empty()) flags["plan"] = f.plan;
  c = harness::apply_json(c, flags);
  if (!f.out.empty() || c.out_dir.empty()) c.out_dir = out_dir_or_default(f.out, command + "-" + tasks::to_string(kind));
  c.validate();
  return c;
}

void print_summary(const harness::RunConfig& c, const harness::TrainSummary& s) {
  for (const auto& r : s.seeds) {
    std::printf("seed %llu: best eval accuracy %.4f at epoch %zu (%zu epochs, stop: %s)\n",
                static_cast<unsigned long long>(r.seed), r.best_accuracy, r.best_epoch, r.epochs_run,
                harness::to_string(r.stop).c_str());
  }
  std::printf("mean accuracy %.4f over %zu seed(s)\n", s.mean_accuracy, s.seeds.size());
  if (c.task.kind == tasks::TaskKind::a5) {
    std::printf("a5 solved (>= 90%% on at least one seed): %s\n",
                s.seeds_reaching(harness::kA5SolvedAccuracy) ? "yes" : "no");
  }
  std::printf("output: %s\n", c.out_dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kalman linear attention experiments"};
  app.set_version_flag("--version", std::string(kVersion) + " (" + kCodeHash + ")");
  app.require_subcommand(1);

  RunFlags train_flags;
  auto* train = app.add_subcommand("train", "Train on a synthetic task with early stopping");
  add_run_flags(train, train_flags);

  std::string eval_run, eval_precision, eval_split = "eval";
  std::optional<std::uint64_t> eval_seed;
  auto* eval = app.add_subcommand("eval", "Evaluate a trained run directory");
  eval->add_option("run", eval_run, "Run directory written by `kla train`")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--seed", eval_seed, "Seed checkpoint to load (default: first seed)");
  eval->add_option("--precision", eval_precision, "Evaluation precision")->check(CLI::IsMember({"f32", "f64"}));
  eval->add_option("--split", eval_split, "Split to score")->check(CLI::IsMember({"train", "eval"}));

  harness::BenchOptions bench_opts;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench", "Time sequential vs parallel scan plans across lengths");
  bench->add_option("--lengths", bench_opts.lengths, "Ascending sequence lengths")->delimiter(',');
  bench->add_option("--d-model", bench_opts.d_model, "Model width");
  bench->add_option("--d-state", bench_opts.d_state, "State slots");
  bench->add_option("--repeats", bench_opts.repeats, "Timed repeats per point (>= 5)")->check(CLI::Range(5, 1000));
  bench->add_option("--max-backward-length", bench_opts.max_backward_length,
                    "Longest length timed with forward+backward (0: skip)");
  bench->add_option("--seed", bench_opts.seed, "Parameter and token seed");
  bench->add_option("--out", bench_out, "Output directory");

  std::string dump_run, dump_out, dump_split = "eval";
  std::optional<std::uint64_t> dump_seed;
  harness::DumpOptions dump_opts;
  bool dump_dataset = false;
  std::size_t dump_count = 0;
  RunFlags dump_flags;
  auto* dump = app.add_subcommand(
      "dump", "Write attention matrices and posterior variance traces of a trained run, or a dataset split");
  dump->add_option("run", dump_run, "Run directory written by `kla train`")->check(CLI::ExistingDirectory);
  dump->add_flag("--dataset", dump_dataset, "Write <split>.bin with the task's sequences instead of diagnostics");
  dump->add_option("--split", dump_split, "Dataset split")->check(CLI::IsMember({"train", "eval"}));
  dump->add_option("--count", dump_count, "Sequences to write (default: the whole split)");
  dump->add_option("--config", dump_flags.config, "Task config for --dataset without a run")->check(CLI::ExistingFile);
  dump->add_option("--task", dump_flags.task, "Task for --dataset without a run");
  dump->add_flag("--paper-scale", dump_flags.paper_scale, "Paper-scale task for --dataset without a run");
  dump->add_option("--seed", dump_seed, "Seed checkpoint to load (default: first seed)");
  dump->add_option("--index", dump_opts.index, "Eval-split sequence index");
  dump->add_option("--block", dump_opts.block, "Block whose mixer is dumped");
  dump->add_option("--channels", dump_opts.channels, "Channels to materialize (default: all)")->delimiter(',');
  dump->add_option("--cap", dump_opts.cap, "Largest sequence length accepted");
  dump->add_option("--out", dump_out, "Output directory");

  RunFlags ablate_flags;
  std::string ablate_kind;
  auto* ablate = app.add_subcommand("ablate", "Paired full vs ablated training runs");
  add_run_flags(ablate, ablate_flags);
  ablate->add_option("--kind", ablate_kind, "process_noise_zero | ou_vs_naive_discretization");

  CLI11_PARSE(app, argc, argv);
  harness::retain_freed_memory();

  try {
    if (*train) {
      const harness::RunConfig c = resolve(train_flags, "train");
      if (train_flags.dry_run) {
        print_config(c);
        return 0;
      }
      std::printf("training %s, seeds:", tasks::to_string(c.task.kind).c_str());
      for (auto s : c.trainer.seeds) std::printf(" %llu", static_cast<unsigned long long>(s));
      std::printf(" (batch %zu, plan %s)\n", c.trainer.batch_size, scan::to_string(c.plan));
      std::fflush(stdout);
      print_summary(c, harness::run_train(c));
    } else if (*eval) {
      harness::LoadedRun run = harness::load_run(eval_run, eval_seed);
      if (!eval_precision.empty()) run.config.trainer.precision = harness::parse_precision(eval_precision);
      const auto split = eval_split == "train" ? tasks::Split::train : tasks::Split::eval;
      const std::size_t count = split == tasks::Split::train ? run.config.task.train_seqs : run.config.task.eval_seqs;
      const harness::EvalResult r = harness::evaluate(run.params, run.config.model, run.config.task, split, count,
                                                      run.config.trainer.batch_size, run.config.trainer.precision);
      const Json out{{"split", eval_split},
                     {"precision", harness::to_string(run.config.trainer.precision)},
                     {"loss", r.loss},
                     {"accuracy", r.accuracy},
                     {"correct", r.correct},
                     {"total", r.total}};
      std::printf("%s\n", out.dump().c_str());
    } else if (*bench) {
      const fs::path dir = out_dir_or_default(bench_out, "bench");
      fs::create_directories(dir);
      const auto points = harness::run_bench_scaling(bench_opts);
      std::ofstream records(dir / "bench.jsonl");
      for (const auto& p : points) records << harness::to_json(p).dump() << '\n';
      const std::string table = harness::format_bench_table(points);
      std::ofstream(dir / "bench_table.txt") << table;
      std::printf("%soutput: %s\n", table.c_str(), dir.string().c_str());
    } else if (*dump && dump_dataset) {
      tasks::TaskConfig task = dump_run.empty() ? resolve(dump_flags, "dump").task
                                                : harness::load_run(dump_run, dump_seed).config.task;
      const auto split = dump_split == "train" ? tasks::Split::train : tasks::Split::eval;
      const std::size_t available = split == tasks::Split::train ? task.train_seqs : task.eval_seqs;
      const std::size_t count = dump_count ? std::min(dump_count, available) : available;
      std::vector<tasks::Sequence> records;
      records.reserve(count);
      for (std::size_t i = 0; i < count; ++i) records.push_back(tasks::generate(task, split, i));
      const fs::path dir = out_dir_or_default(dump_out, "dataset-" + tasks::to_string(task.kind));
      fs::create_directories(dir);
      tasks::write_dataset(dir / (dump_split + ".bin"), records);
      std::printf("%zu %s sequences, hash %016llx\noutput: %s\n", count, dump_split.c_str(),
                  static_cast<unsigned long long>(tasks::dataset_hash(task, split, count)),
                  (dir / (dump_split + ".bin")).string().c_str());
    } else if (*dump) {
      if (dump_run.empty()) throw std::invalid_argument("dump: a run directory is required unless --dataset is given");
      const harness::LoadedRun run = harness::load_run(dump_run, dump_seed);
      const fs::path dir = out_dir_or_default(dump_out, "dump");
      const harness::DumpSummary s = harness::dump_diagnostics(run.params, run.config, dump_opts, dir);
      std::printf("%s\noutput: %s\n", harness::to_json(s).dump(2).c_str(), dir.string().c_str());
    } else if (*ablate) {
      const harness::AblationKind kind = harness::parse_ablation(ablate_kind);
      const harness::RunConfig c = resolve(ablate_flags, "ablate");
      if (ablate_flags.dry_run) {
        print_config(c);
        print_config(harness::ablated_config(c, kind));
        return 0;
      }
      const harness::AblationResult r = harness::run_ablation(c, kind);
      for (std::size_t i = 0; i < r.deltas.size(); ++i) {
        std::printf("seed %llu: full %.4f ablated %.4f delta %+.4f\n",
                    static_cast<unsigned long long>(r.full.seeds[i].seed), r.full.seeds[i].best_accuracy,
                    r.ablated.seeds[i].best_accuracy, r.deltas[i]);
      }
      std::printf("mean: full %.4f ablated %.4f\noutput: %s\n", r.full.mean_accuracy, r.ablated.mean_accuracy,
                  c.out_dir.string().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kla: error: %s\n", e.what());
    return 2;
  }
  return 0;
}

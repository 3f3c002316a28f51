#include "kla/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "kla/error.hpp"
#include "kla/layer.hpp"
#include "kla/optim.hpp"
#include "kla/rng.hpp"
#include "kla/version.hpp"

namespace kla::harness {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Stream families for training randomness; data streams live in kla/tasks.
constexpr std::uint64_t kInitStream = 0x1a1;
constexpr std::uint64_t kShuffleStream = 0x1a2;
constexpr std::uint64_t kNoiseStream = 0x1a3;
constexpr std::uint64_t kBenchStream = 0x1a4;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, value);
  return buf;
}

std::string discretization_name(ad::Discretization d) { return d == ad::Discretization::ou ? "ou" : "euler"; }

ad::Discretization parse_discretization(const std::string& name) {
  if (name == "ou") return ad::Discretization::ou;
  if (name == "euler") return ad::Discretization::euler;
  throw std::invalid_argument("unknown discretization '" + name + "' (valid: ou, euler)");
}

// Every key of `patch` must exist in `reference`, recursively.
void check_known_keys(const Json& patch, const Json& reference, const std::string& where) {
  if (!patch.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) throw std::invalid_argument("config: unknown key '" + path + "'");
    if (reference[key].is_object()) check_known_keys(value, reference[key], path);
  }
}

// The model's vocabulary and head always follow the task.
void sync_model(RunConfig& c) {
  c.model.vocab_size = c.task.model_vocab();
  c.model.head = c.task.kind == tasks::TaskKind::compression ? model::HeadKind::compression
                                                             : model::HeadKind::next_token;
  c.model.layer.mode = c.plan;
}

RunConfig from_json(const Json& j) {
  RunConfig c;
  const Json& t = j.at("task");
  c.task.kind = tasks::parse_task(t.at("name").get<std::string>());
  c.task.vocab_size = t.at("vocab_size");
  c.task.seq_len = t.at("seq_len");
  c.task.train_seqs = t.at("train_seqs");
  c.task.eval_seqs = t.at("eval_seqs");
  c.task.seed = t.at("seed");
  c.task.num_copy = t.at("num_copy");
  c.task.key_vocab = t.at("key_vocab");
  c.task.num_pairs = t.at("num_pairs");
  c.task.num_queries = t.at("num_queries");
  c.task.noise_fraction = t.at("noise_fraction");
  c.task.noise_vocab = t.at("noise_vocab");
  c.task.max_motif = t.at("max_motif");

  const Json& m = j.at("model");
  c.model.d_model = m.at("d_model");
  c.model.n_layers = m.at("n_layers");
  c.model.d_state = m.at("d_state");
  c.model.conv_kernel = m.at("conv_kernel");
  c.model.loss_mode = model::parse_loss_mode(m.at("loss").get<std::string>());
  c.model.mc_samples = m.at("mc_samples");
  c.model.layer.discretization = parse_discretization(m.at("discretization").get<std::string>());
  c.model.layer.zero_process_noise = m.at("zero_process_noise");

  const Json& r = j.at("trainer");
  c.trainer.max_epochs = r.at("max_epochs");
  c.trainer.patience = r.at("patience");
  c.trainer.batch_size = r.at("batch_size");
  c.trainer.seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
  c.trainer.precision = parse_precision(r.at("precision").get<std::string>());
  c.trainer.lr = r.at("lr");
  c.trainer.weight_decay = r.at("weight_decay");
  c.trainer.grad_clip = r.at("grad_clip");
  c.trainer.stop_accuracy = r.at("stop_accuracy");
  c.trainer.train_eval_seqs = r.at("train_eval_seqs");

  c.plan = scan::parse_scan_mode(j.at("plan").get<std::string>());
  c.out_dir = j.at("out_dir").get<std::string>();
  sync_model(c);
  return c;
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const Json& json) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << json.dump(2) << '\n';
}

template <std::floating_point T>
EvalResult evaluate_as(const model::Parameters& params, const model::ModelConfig& mc, const tasks::TaskConfig& task,
                       tasks::Split split, std::size_t count, std::size_t batch_size) {
  EvalResult result;
  double nll = 0.0;
  const std::size_t vocab = mc.vocab_size;
  for (std::size_t first = 0; first < count; first += batch_size) {
    const std::size_t n = std::min(batch_size, count - first);
    const model::Batch batch = tasks::make_batch(task, split, first, n);
    const std::vector<T> logits = model::predict_logits<T>(params, mc, batch.tokens, batch.batch, batch.steps);
    const model::Accuracy acc =
        model::masked_accuracy<T>(std::span<const T>(logits), vocab, batch.targets, batch.mask);
    result.correct += acc.correct;
    result.total += acc.total;
    for (std::size_t i = 0; i < batch.mask.size(); ++i) {
      if (!batch.mask[i]) continue;
      const T* row = logits.data() + i * vocab;
      const double hi = static_cast<double>(*std::max_element(row, row + vocab));
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - hi);
      nll += hi + std::log(z) - static_cast<double>(row[batch.targets[i]]);
    }
  }
  result.accuracy = result.total ? static_cast<double>(result.correct) / static_cast<double>(result.total) : 0.0;
  result.loss = result.total ? nll / static_cast<double>(result.total) : 0.0;
  return result;
}

Json to_json(const SeedResult& r) {
  return {{"seed", r.seed},
          {"best_accuracy", r.best_accuracy},
          {"best_loss", r.best_loss},
          {"best_epoch", r.best_epoch},
          {"epochs_run", r.epochs_run},
          {"final_train_accuracy", r.final_train_accuracy},
          {"stop", to_string(r.stop)},
          {"checkpoint", r.checkpoint.string()}};
}

Json summary_json(const RunConfig& config, const TrainSummary& s) {
  Json seeds = Json::array();
  for (const auto& r : s.seeds) seeds.push_back(to_json(r));
  Json out{{"task", tasks::to_string(config.task.kind)},
           {"seeds", seeds},
           {"mean_accuracy", s.mean_accuracy},
           {"train_hash", hex64(s.train_hash)},
           {"eval_hash", hex64(s.eval_hash)}};
  if (config.task.kind == tasks::TaskKind::a5) {
    out["a5_solved"] = s.seeds_reaching(kA5SolvedAccuracy) > 0;
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + name + "' (valid: f32, f64)");
}

std::string to_string(Precision precision) { return precision == Precision::f32 ? "f32" : "f64"; }

void RunConfig::validate() const {
  task.validate();
  model.validate();
  if (model.vocab_size != task.model_vocab()) {
    throw std::invalid_argument("model vocab " + std::to_string(model.vocab_size) + " does not match task vocab " +
                                std::to_string(task.model_vocab()));
  }
  const bool compression = task.kind == tasks::TaskKind::compression;
  if (compression != (model.head == model::HeadKind::compression)) {
    throw std::invalid_argument("model head does not match task " + tasks::to_string(task.kind));
  }
  if (trainer.batch_size == 0) throw std::invalid_argument("trainer.batch_size must be positive");
  if (trainer.max_epochs == 0) throw std::invalid_argument("trainer.max_epochs must be positive");
  if (trainer.seeds.empty()) throw std::invalid_argument("trainer.seeds must not be empty");
  if (!(trainer.lr > 0.0)) throw std::invalid_argument("trainer.lr must be positive");
  if (trainer.stop_accuracy < 0.0 || trainer.stop_accuracy > 1.0) {
    throw std::invalid_argument("trainer.stop_accuracy must lie in [0, 1]");
  }
  if (task.train_seqs == 0 || task.eval_seqs == 0) throw std::invalid_argument("task needs train and eval sequences");
}

RunConfig default_run_config(tasks::TaskKind kind, bool paper_scale) {
  RunConfig c;
  c.task = tasks::default_config(kind);
  c.trainer.seeds = {0, 1, 2, 3, 4};
  if (paper_scale) {
    c.plan = scan::ScanMode::parallel;
    c.trainer.batch_size = 172;
    c.model.d_state = 8;
    if (kind == tasks::TaskKind::mqar) {
      c.model.n_layers = 2;
      c.model.d_state = 16;
      c.trainer.batch_size = 32;
    }
    if (kind == tasks::TaskKind::a5) {
      c.model.d_model = 1024;
      c.model.d_state = 16;
    }
  } else {
    // Desk scale: fewer sequences and a batch shrunk to match.
    c.trainer.seeds = {0};
    c.trainer.batch_size = 32;
    c.trainer.train_eval_seqs = 256;
    c.task.train_seqs = std::min<std::size_t>(c.task.train_seqs, 2000);
    c.task.eval_seqs = std::min<std::size_t>(c.task.eval_seqs, 256);
    switch (kind) {
      case tasks::TaskKind::selective_copy:
        c.task.seq_len = 64;
        c.task.num_copy = 8;
        break;
      case tasks::TaskKind::mqar:
        c.task.seq_len = 256;
        c.task.vocab_size = 64;
        c.task.key_vocab = 32;
        c.model.n_layers = 2;
        c.model.d_model = 64;
        break;
      case tasks::TaskKind::a5:
        c.model.d_model = 256;
        c.task.train_seqs = 4000;
        break;
      default: break;
    }
  }
  if (kind == tasks::TaskKind::a5) {
    c.trainer.lr = 3e-4;
    c.trainer.max_epochs = 500;
    c.trainer.patience = 50;
  }
  sync_model(c);
  return c;
}

Json to_json(const RunConfig& c) {
  const auto& t = c.task;
  const auto& m = c.model;
  const auto& r = c.trainer;
  return {
      {"task",
       {{"name", tasks::to_string(t.kind)},
        {"vocab_size", t.vocab_size},
        {"seq_len", t.seq_len},
        {"train_seqs", t.train_seqs},
        {"eval_seqs", t.eval_seqs},
        {"seed", t.seed},
        {"num_copy", t.num_copy},
        {"key_vocab", t.key_vocab},
        {"num_pairs", t.num_pairs},
        {"num_queries", t.num_queries},
        {"noise_fraction", t.noise_fraction},
        {"noise_vocab", t.noise_vocab},
        {"max_motif", t.max_motif}}},
      {"model",
       {{"vocab_size", m.vocab_size},
        {"head", model::to_string(m.head)},
        {"d_model", m.d_model},
        {"n_layers", m.n_layers},
        {"d_state", m.d_state},
        {"conv_kernel", m.conv_kernel},
        {"loss", model::to_string(m.loss_mode)},
        {"mc_samples", m.mc_samples},
        {"discretization", discretization_name(m.layer.discretization)},
        {"zero_process_noise", m.layer.zero_process_noise}}},
      {"trainer",
       {{"max_epochs", r.max_epochs},
        {"patience", r.patience},
        {"batch_size", r.batch_size},
        {"seeds", r.seeds},
        {"precision", to_string(r.precision)},
        {"lr", r.lr},
        {"weight_decay", r.weight_decay},
        {"grad_clip", r.grad_clip},
        {"stop_accuracy", r.stop_accuracy},
        {"train_eval_seqs", r.train_eval_seqs}}},
      {"plan", scan::to_string(c.plan)},
      {"out_dir", c.out_dir.string()},
  };
}

RunConfig apply_json(RunConfig base, const Json& patch) {
  Json merged = to_json(base);
  check_known_keys(patch, merged, "");
  // A task switch restarts from that task's defaults before the overlay.
  if (patch.contains("task") && patch["task"].contains("name")) {
    const auto kind = tasks::parse_task(patch["task"]["name"].get<std::string>());
    if (kind != base.task.kind) {
      RunConfig fresh;
      fresh.task = tasks::default_config(kind);
      merged["task"] = to_json(fresh)["task"];
    }
  }
  merged.merge_patch(patch);
  try {
    return from_json(merged);
  } catch (const Json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& path, const RunConfig& base) {
  return apply_json(base, read_json_file(path));
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

fs::path default_out_root() {
  const char* env = std::getenv(kOutRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

Json to_json(const MetricsRecord& r) {
  return {{"epoch", r.epoch}, {"split", r.split},       {"loss", r.loss},
          {"accuracy", r.accuracy}, {"seconds", r.seconds}, {"seed", r.seed}};
}

MetricsRecord metrics_from_json(const Json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch");
  r.split = j.at("split");
  r.loss = j.at("loss");
  r.accuracy = j.at("accuracy");
  r.seconds = j.at("seconds");
  r.seed = j.at("seed");
  if (r.accuracy < 0.0 || r.accuracy > 1.0) throw std::invalid_argument("metrics: accuracy outside [0, 1]");
  return r;
}

MetricsWriter::MetricsWriter(const fs::path& path) : path_(path), out_(path, std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open metrics log " + path.string());
}

void MetricsWriter::write(const MetricsRecord& record) {
  if (record.accuracy < 0.0 || record.accuracy > 1.0) throw std::invalid_argument("metrics: accuracy outside [0, 1]");
  out_ << to_json(record).dump() << '\n';
  out_.flush();
}

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics log " + path.string());
  std::vector<MetricsRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(metrics_from_json(Json::parse(line)));
  }
  return records;
}

EvalResult evaluate(const model::Parameters& params, const model::ModelConfig& mc, const tasks::TaskConfig& task,
                    tasks::Split split, std::size_t count, std::size_t batch_size, Precision precision) {
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  return precision == Precision::f32 ? evaluate_as<float>(params, mc, task, split, count, batch_size)
                                     : evaluate_as<double>(params, mc, task, split, count, batch_size);
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::max_epochs: return "max_epochs";
    case StopReason::patience: return "patience";
    case StopReason::target_accuracy: return "target_accuracy";
  }
  return "?";
}

bool EarlyStopping::update(double accuracy) {
  if (!seen_ || accuracy > best_) {
    seen_ = true;
    best_ = accuracy;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

std::size_t TrainSummary::seeds_reaching(double threshold) const {
  return static_cast<std::size_t>(
      std::count_if(seeds.begin(), seeds.end(), [&](const SeedResult& r) { return r.best_accuracy >= threshold; }));
}

SeedResult train_seed(const RunConfig& input, std::uint64_t seed, MetricsWriter& metrics, const fs::path& checkpoint,
                      model::Parameters* best_out) {
  RunConfig config = input;
  sync_model(config);
  config.validate();
  const auto& task = config.task;
  const auto& mc = config.model;
  const auto& tr = config.trainer;

  model::Parameters params = model::init_model(mc, rng::derive_key({seed, kInitStream}));
  model::Parameters best = params;
  ad::AdamW optimizer({.lr = tr.lr, .weight_decay = tr.weight_decay, .grad_clip = tr.grad_clip});
  std::vector<Tensor*> slots;
  for (auto& t : params.tensors) slots.push_back(&t);

  SeedResult result;
  result.seed = seed;
  result.checkpoint = checkpoint;
  const std::size_t train_scored = tr.train_eval_seqs ? std::min(tr.train_eval_seqs, task.train_seqs) : task.train_seqs;
  const auto start = Clock::now();
  std::vector<std::size_t> order(task.train_seqs);
  std::size_t step = 0;
  EarlyStopping stopper(tr.patience);

  for (std::size_t epoch = 1; epoch <= tr.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto gen = rng::engine({seed, kShuffleStream, epoch});
    std::shuffle(order.begin(), order.end(), gen);

    double loss_sum = 0.0;
    for (std::size_t first = 0; first < order.size(); first += tr.batch_size) {
      const std::size_t n = std::min(tr.batch_size, order.size() - first);
      const model::Batch batch =
          tasks::make_batch(task, tasks::Split::train, std::span<const std::size_t>(order.data() + first, n));
      model::LossAndGrad lg = model::loss_and_gradients(params, mc, batch, rng::derive_key({seed, kNoiseStream, step}));
      if (!std::isfinite(lg.loss)) {
        throw DomainError("training loss is not finite at epoch " + std::to_string(epoch));
      }
      optimizer.step(slots, lg.grads);
      loss_sum += lg.loss * static_cast<double>(n);
      ++step;
    }

    const EvalResult train_eval =
        evaluate(params, mc, task, tasks::Split::train, train_scored, tr.batch_size, tr.precision);
    metrics.write({epoch, "train", loss_sum / static_cast<double>(order.size()), train_eval.accuracy,
                   seconds_since(start), seed});
    const EvalResult eval = evaluate(params, mc, task, tasks::Split::eval, task.eval_seqs, tr.batch_size, tr.precision);
    metrics.write({epoch, "eval", eval.loss, eval.accuracy, seconds_since(start), seed});

    result.epochs_run = epoch;
    result.final_train_accuracy = train_eval.accuracy;
    if (stopper.update(eval.accuracy)) {
      result.best_accuracy = eval.accuracy;
      result.best_loss = eval.loss;
      result.best_epoch = epoch;
      best = params;
    }
    if (tr.stop_accuracy > 0.0 && eval.accuracy >= tr.stop_accuracy) {
      result.stop = StopReason::target_accuracy;
      break;
    }
    if (stopper.exhausted()) {
      result.stop = StopReason::patience;
      break;
    }
  }

  if (!checkpoint.empty()) {
    fs::create_directories(checkpoint.parent_path());
    model::save_tensors(checkpoint, best);
  }
  if (best_out) *best_out = std::move(best);
  return result;
}

TrainSummary run_train(const RunConfig& input) {
  RunConfig config = input;
  sync_model(config);
  config.validate();
  if (config.out_dir.empty()) throw std::invalid_argument("run_train: output directory not set");
  const fs::path log = config.out_dir / "metrics.jsonl";
  if (fs::exists(log)) {
    throw std::invalid_argument("run_train: " + log.string() + " already exists; choose a fresh output directory");
  }
  fs::create_directories(config.out_dir);

  TrainSummary summary;
  summary.train_hash = tasks::dataset_hash(config.task, tasks::Split::train, config.task.train_seqs);
  summary.eval_hash = tasks::dataset_hash(config.task, tasks::Split::eval, config.task.eval_seqs);
  write_json_file(config.out_dir / "config.json",
                  {{"config", to_json(config)},
                   {"code_hash", kCodeHash},
                   {"version", kVersion},
                   {"train_hash", hex64(summary.train_hash)},
                   {"eval_hash", hex64(summary.eval_hash)},
                   {"training_arithmetic", "f64"}});

  MetricsWriter metrics(log);
  for (const std::uint64_t seed : config.trainer.seeds) {
    const fs::path ckpt = config.out_dir / ("seed_" + std::to_string(seed)) / "checkpoint.bin";
    summary.seeds.push_back(train_seed(config, seed, metrics, ckpt));
  }
  double total = 0.0;
  for (const auto& r : summary.seeds) total += r.best_accuracy;
  summary.mean_accuracy = total / static_cast<double>(summary.seeds.size());
  write_json_file(config.out_dir / "summary.json", summary_json(config, summary));
  return summary;
}

LoadedRun load_run(const fs::path& run_dir, std::optional<std::uint64_t> seed) {
  const Json record = read_json_file(run_dir / "config.json");
  if (!record.contains("config")) throw std::invalid_argument(run_dir.string() + "/config.json has no config");
  const auto kind = tasks::parse_task(record["config"].at("task").at("name").get<std::string>());
  LoadedRun run;
  run.config = apply_json(default_run_config(kind), record["config"]);
  const std::uint64_t s = seed.value_or(run.config.trainer.seeds.front());
  run.params = model::load_tensors(run_dir / ("seed_" + std::to_string(s)) / "checkpoint.bin");
  model::check_parameters(run.config.model, run.params);
  return run;
}

std::string to_string(BenchPass pass) { return pass == BenchPass::forward ? "forward" : "forward_backward"; }

Json to_json(const BenchPoint& p) {
  return {{"length", p.length},   {"plan", scan::to_string(p.plan)},   {"pass", to_string(p.pass)},
          {"batch", p.batch},     {"median_seconds", p.median_seconds}, {"samples", p.samples}};
}

std::vector<BenchPoint> run_bench_scaling(const BenchOptions& o) {
  if (o.lengths.empty() || !std::is_sorted(o.lengths.begin(), o.lengths.end()) || o.lengths.front() == 0) {
    throw std::invalid_argument("bench: lengths must be positive and ascending");
  }
  if (o.repeats == 0) throw std::invalid_argument("bench: repeats must be positive");
  model::ModelConfig mc;
  mc.d_model = o.d_model;
  mc.d_state = o.d_state;
  mc.vocab_size = 16;
  const model::Parameters params = model::init_model(mc, rng::derive_key({o.seed, kBenchStream}));

  std::vector<BenchPoint> points;
  const auto time_point = [&](std::size_t steps, scan::ScanMode plan, BenchPass pass, std::size_t batch) {
    model::ModelConfig run = mc;
    run.layer.mode = plan;
    model::Batch b;
    b.batch = batch;
    b.steps = steps;
    auto gen = rng::engine({o.seed, kBenchStream, steps, batch});
    std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(mc.vocab_size) - 1);
    for (std::size_t i = 0; i < batch * steps; ++i) {
      b.tokens.push_back(tok(gen));
      b.targets.push_back(tok(gen));
      b.mask.push_back(1);
    }
    const auto once = [&] {
      if (pass == BenchPass::forward) {
        volatile double sink = model::predict_logits<double>(params, run, b.tokens, batch, steps).back();
        (void)sink;
      } else {
        volatile double sink = model::loss_and_gradients(params, run, b, 0).loss;
        (void)sink;
      }
    };
    for (std::size_t i = 0; i < o.warmup; ++i) once();
    BenchPoint p{steps, plan, pass, batch, 0.0, {}};
    for (std::size_t i = 0; i < o.repeats; ++i) {
      const auto t0 = Clock::now();
      once();
      p.samples.push_back(seconds_since(t0));
    }
    p.median_seconds = median(p.samples);
    points.push_back(std::move(p));
  };

  for (const std::size_t steps : o.lengths) {
    for (const auto plan : {scan::ScanMode::sequential, scan::ScanMode::parallel}) {
      time_point(steps, plan, BenchPass::forward, o.forward_batch);
    }
    if (o.max_backward_length && steps <= o.max_backward_length) {
      for (const auto plan : {scan::ScanMode::sequential, scan::ScanMode::parallel}) {
        time_point(steps, plan, BenchPass::forward_backward, o.backward_batch);
      }
    }
  }
  return points;
}

std::vector<double> forward_speedups(const std::vector<BenchPoint>& points) {
  std::vector<double> out;
  for (const auto& seq : points) {
    if (seq.pass != BenchPass::forward || seq.plan != scan::ScanMode::sequential) continue;
    for (const auto& par : points) {
      if (par.pass == BenchPass::forward && par.plan == scan::ScanMode::parallel && par.length == seq.length) {
        out.push_back(seq.median_seconds / par.median_seconds);
      }
    }
  }
  return out;
}

std::string format_bench_table(const std::vector<BenchPoint>& points) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-17s %8s %6s %14s %14s %9s\n", "pass", "T", "batch", "sequential_s",
                "parallel_s", "speedup");
  out << line;
  for (const auto& seq : points) {
    if (seq.plan != scan::ScanMode::sequential) continue;
    for (const auto& par : points) {
      if (par.plan != scan::ScanMode::parallel || par.pass != seq.pass || par.length != seq.length) continue;
      std::snprintf(line, sizeof line, "%-17s %8zu %6zu %14.6f %14.6f %9.3f\n", to_string(seq.pass).c_str(),
                    seq.length, seq.batch, seq.median_seconds, par.median_seconds,
                    seq.median_seconds / par.median_seconds);
      out << line;
    }
  }
  return out.str();
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"process_noise_zero", "ou_vs_naive_discretization"};
  return names;
}

AblationKind parse_ablation(const std::string& name) {
  if (name == "process_noise_zero") return AblationKind::process_noise_zero;
  if (name == "ou_vs_naive_discretization") return AblationKind::ou_vs_naive_discretization;
  std::string valid;
  for (const auto& n : ablation_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument((name.empty() ? std::string("ablation kind not set") : "unknown ablation '" + name + "'") +
                              " (valid kinds: " + valid + ")");
}

std::string to_string(AblationKind kind) { return ablation_names()[static_cast<std::size_t>(kind)]; }

RunConfig ablated_config(const RunConfig& base, AblationKind kind) {
  RunConfig c = base;
  if (kind == AblationKind::process_noise_zero) {
    c.model.layer.zero_process_noise = true;
  } else {
    c.model.layer.discretization = ad::Discretization::euler;
  }
  return c;
}

AblationResult run_ablation(const RunConfig& base, AblationKind kind) {
  if (base.out_dir.empty()) throw std::invalid_argument("run_ablation: output directory not set");
  AblationResult result;
  result.kind = kind;
  RunConfig full = base;
  full.out_dir = base.out_dir / "full";
  RunConfig ablated = ablated_config(base, kind);
  ablated.out_dir = base.out_dir / "ablated";
  result.full = run_train(full);
  result.ablated = run_train(ablated);

  Json pairs = Json::array();
  for (std::size_t i = 0; i < result.full.seeds.size(); ++i) {
    const double delta = result.ablated.seeds[i].best_accuracy - result.full.seeds[i].best_accuracy;
    result.deltas.push_back(delta);
    pairs.push_back({{"seed", result.full.seeds[i].seed},
                     {"full_accuracy", result.full.seeds[i].best_accuracy},
                     {"ablated_accuracy", result.ablated.seeds[i].best_accuracy},
                     {"delta", delta}});
  }
  write_json_file(base.out_dir / "ablation.json",
                  {{"kind", to_string(kind)},
                   {"pairs", pairs},
                   {"full_mean_accuracy", result.full.mean_accuracy},
                   {"ablated_mean_accuracy", result.ablated.mean_accuracy},
                   {"full_train_hash", hex64(result.full.train_hash)},
                   {"ablated_train_hash", hex64(result.ablated.train_hash)},
                   {"full_eval_hash", hex64(result.full.eval_hash)},
                   {"ablated_eval_hash", hex64(result.ablated.eval_hash)},
                   {"code_hash", kCodeHash}});
  return result;
}

Json to_json(const DumpSummary& s) {
  return {{"steps", s.steps},
          {"channels", s.channels},
          {"reconstruction_error", s.reconstruction_error},
          {"max_upper_entry", s.max_upper_entry},
          {"min_variance", s.min_variance},
          {"relevant_variance", s.relevant_variance},
          {"background_variance", s.background_variance},
          {"relevant_minus_background", s.relevant_variance - s.background_variance}};
}

std::vector<std::uint8_t> relevant_positions(const tasks::TaskConfig& task, const tasks::Sequence& sequence) {
  std::vector<std::uint8_t> out(sequence.tokens.size());
  const auto content = static_cast<std::int32_t>(task.vocab_size);
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = sequence.tokens[t] < content ? 1 : 0;
  return out;
}

DumpSummary dump_diagnostics(const model::Parameters& params, const RunConfig& input, const DumpOptions& options,
                             const fs::path& out_dir) {
  RunConfig config = input;
  sync_model(config);
  const auto& mc = config.model;
  model::check_parameters(mc, params);
  const std::size_t steps = config.task.seq_len;
  if (steps > options.cap) {
    throw std::invalid_argument("dump: sequence length " + std::to_string(steps) + " exceeds the diagnostic cap " +
                                std::to_string(options.cap));
  }
  if (options.block >= mc.n_layers) throw std::invalid_argument("dump: block index out of range");
  const std::size_t dim = mc.d_model;
  std::vector<std::size_t> channels = options.channels;
  if (channels.empty()) {
    channels.resize(dim);
    std::iota(channels.begin(), channels.end(), std::size_t{0});
  }
  for (const auto c : channels) {
    if (c >= dim) throw std::invalid_argument("dump: channel " + std::to_string(c) + " out of range");
  }

  const tasks::Sequence seq = tasks::generate(config.task, tasks::Split::eval, options.index);
  const std::vector<double> x = model::mixer_inputs(params, mc, seq.tokens, 1, steps).at(options.block);
  const layer::LayerParams<double> lp = model::mixer_params<double>(params, options.block, mc);
  const layer::AttentionMatrices att =
      layer::materialize_attention_matrix(lp, x, steps, channels, mc.layer, options.cap);
  const layer::LayerOutput<double> out = layer::kla_forward<double>(x, 1, steps, lp, true, mc.layer);

  DumpSummary s;
  s.steps = steps;
  s.channels = channels.size();
  for (std::size_t ci = 0; ci < channels.size(); ++ci) {
    const double* m = att.matrices.data() + ci * steps * steps;
    const double* v = att.values.data() + ci * steps;
    for (std::size_t t = 0; t < steps; ++t) {
      double y = att.init_term[ci * steps + t];
      for (std::size_t u = 0; u < steps; ++u) {
        if (u > t) s.max_upper_entry = std::max(s.max_upper_entry, std::abs(m[t * steps + u]));
        y += m[t * steps + u] * v[u];
      }
      s.reconstruction_error = std::max(s.reconstruction_error, std::abs(y - out.y_mu[t * dim + channels[ci]]));
    }
  }

  const std::vector<std::uint8_t> relevant = relevant_positions(config.task, seq);
  double rel = 0.0, bg = 0.0;
  std::size_t nrel = 0, nbg = 0;
  s.min_variance = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < steps; ++t) {
    double mean = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double var = out.y_sigma[t * dim + d];
      s.min_variance = std::min(s.min_variance, var);
      mean += var;
    }
    mean /= static_cast<double>(dim);
    (relevant[t] ? rel : bg) += mean;
    ++(relevant[t] ? nrel : nbg);
  }
  s.relevant_variance = nrel ? rel / static_cast<double>(nrel) : 0.0;
  s.background_variance = nbg ? bg / static_cast<double>(nbg) : 0.0;

  fs::create_directories(out_dir);
  const auto as_double = [](const auto& v) { return std::vector<double>(v.begin(), v.end()); };
  const std::size_t nc = channels.size();
  model::Parameters a;
  a.add("attention", Tensor({nc, steps, steps}, att.matrices));
  a.add("init", Tensor({nc, steps}, att.init_term));
  a.add("values", Tensor({nc, steps}, att.values));
  a.add("channels", Tensor({nc}, as_double(channels)));
  model::save_tensors(out_dir / "attention.bin", a);
  model::Parameters v;
  v.add("variance", Tensor({steps, dim}, out.y_sigma));
  v.add("tokens", Tensor({steps}, as_double(seq.tokens)));
  v.add("targets", Tensor({steps}, as_double(seq.targets)));
  v.add("mask", Tensor({steps}, as_double(seq.mask)));
  v.add("relevant", Tensor({steps}, as_double(relevant)));
  model::save_tensors(out_dir / "variance.bin", v);
  Json record = to_json(s);
  record["config"] = to_json(config);
  record["index"] = options.index;
  record["block"] = options.block;
  record["code_hash"] = kCodeHash;
  write_json_file(out_dir / "diagnostics.json", record);
  return s;
}

}  // namespace kla::harness

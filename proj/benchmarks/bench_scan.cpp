// Microbenchmarks of the scan primitives and the layer forward, per plan.
// Arguments: {T, lanes, plan} with plan 0 = sequential, 1 = parallel.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "kla/layer.hpp"
#include "kla/scan.hpp"

namespace {

using kla::scan::ScanMode;

ScanMode plan_arg(const benchmark::State& state) {
  return state.range(2) ? ScanMode::parallel : ScanMode::sequential;
}

std::vector<kla::scan::Mobius<double>> random_mobius(std::size_t count) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::vector<kla::scan::Mobius<double>> out(count);
  // Positive entries keep every composition well defined.
  for (auto& m : out) m = {u(gen), u(gen) * 0.1, u(gen) * 0.1, u(gen)};
  return out;
}

void BM_MobiusScan(benchmark::State& state) {
  const auto steps = static_cast<std::size_t>(state.range(0));
  const auto lanes = static_cast<std::size_t>(state.range(1));
  const kla::scan::ScanPlan plan{steps, lanes, plan_arg(state), 0};
  const auto base = random_mobius(steps * lanes);
  auto work = base;
  for (auto _ : state) {
    state.PauseTiming();
    work = base;
    state.ResumeTiming();
    kla::scan::mobius_scan<double>(work, plan);
    benchmark::DoNotOptimize(work.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(steps * lanes));
}

void BM_AffineScan(benchmark::State& state) {
  const auto steps = static_cast<std::size_t>(state.range(0));
  const auto lanes = static_cast<std::size_t>(state.range(1));
  const kla::scan::ScanPlan plan{steps, lanes, plan_arg(state), 0};
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<kla::scan::Affine<double>> base(steps * lanes);
  for (auto& e : base) e = {u(gen), u(gen) - 0.5};
  auto work = base;
  for (auto _ : state) {
    state.PauseTiming();
    work = base;
    state.ResumeTiming();
    kla::scan::affine_scan<double>(work, plan);
    benchmark::DoNotOptimize(work.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(steps * lanes));
}

void BM_LayerForward(benchmark::State& state) {
  const auto steps = static_cast<std::size_t>(state.range(0));
  const std::size_t d_model = 64, d_state = 16;
  const auto params = kla::layer::init_layer_params(d_model, d_state, 3);
  std::mt19937_64 gen(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(steps * d_model);
  for (auto& v : x) v = n(gen);
  kla::layer::LayerOptions options;
  options.mode = plan_arg(state);
  for (auto _ : state) {
    auto out = kla::layer::kla_forward<double>(x, 1, steps, params, false, options);
    benchmark::DoNotOptimize(out.y_mu.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(steps));
}

}  // namespace

BENCHMARK(BM_MobiusScan)->ArgsProduct({{1024, 16384}, {64}, {0, 1}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_AffineScan)->ArgsProduct({{1024, 16384}, {64}, {0, 1}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LayerForward)->ArgsProduct({{1024, 4096}, {0}, {0, 1}})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

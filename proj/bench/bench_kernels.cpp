// Serial against OpenMP timings of the parallel kernels. Every benchmark
// takes the execution mode as its first argument (0 serial, 1 parallel);
// outputs are identical across modes, so only time differs.
//
//   LCSWITCH_WORKERS=4 ./lcswitch_bench

#include <benchmark/benchmark.h>

#include <random>

#include "lcswitch/hmm.hpp"
#include "lcswitch/meanfield.hpp"
#include "lcswitch/parallel.hpp"
#include "lcswitch/qjump.hpp"
#include "lcswitch/switching_stats.hpp"
#include "oracles.hpp"

using namespace lcswitch;

namespace {

Exec mode(const benchmark::State& state) { return state.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

void ensemble(benchmark::State& state) {
  EnsembleSpec spec;
  spec.n_traj = 8;
  spec.t_transient = 0.0;
  spec.t_total_post = 200.0;
  spec.sample_dt = 1.0;
  const ScalingPlan plan{3.0, Scheme::TheoryA, working_point()};
  for (auto _ : state) benchmark::DoNotOptimize(simulate_ensemble(spec, plan, {12, 40}, 5, mode(state)));
}

std::vector<ObsSequence> hmm_data() {
  HmmParams truth;
  truth.pi = {0.5, 0.5};
  truth.A << 0.98, 0.02, 0.05, 0.95;
  truth.emissions[0].mean = Obs(-1.0, 0.0);
  truth.emissions[1].mean = Obs(1.5, 1.0);
  truth.emissions[0].cov << 0.25, 0.05, 0.05, 0.2;
  truth.emissions[1].cov << 0.3, -0.04, -0.04, 0.25;
  std::mt19937_64 gen(99);
  std::vector<ObsSequence> data;
  for (int i = 0; i < 16; ++i) data.push_back(oracle::sample_hmm(truth, 20000, gen));
  return data;
}

void forward_pass(benchmark::State& state) {
  const auto data = hmm_data();
  const HmmParams p = kmeans_init(data);
  for (auto _ : state) benchmark::DoNotOptimize(log_likelihood(p, data, mode(state)));
}

void baum_welch_fit(benchmark::State& state) {
  const auto data = hmm_data();
  const HmmParams init = kmeans_init(data);
  BaumWelchControls c;
  c.max_iter = 10;
  c.rel_tol = 0.0;
  c.exec = mode(state);
  for (auto _ : state) benchmark::DoNotOptimize(baum_welch(init, data, c));
}

void bootstrap(benchmark::State& state) {
  std::mt19937_64 gen(3);
  const auto data = oracle::censored_exponential(5000, 0.05, 0.0125, gen);
  BootstrapControls b;
  b.exec = mode(state);
  for (auto _ : state) benchmark::DoNotOptimize(fit_conditional_rate(data, 0.0, b));
}

void phase_scan_small(benchmark::State& state) {
  auto grid = initial_condition_grid();
  grid.resize(12);
  for (auto _ : state)
    benchmark::DoNotOptimize(phase_scan(working_point(), {-0.75, -0.65, 2}, {0.18, 0.22, 2}, grid, {}, mode(state)));
}

}  // namespace

BENCHMARK(ensemble)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(forward_pass)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(baum_welch_fit)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(bootstrap)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(phase_scan_small)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime()->Iterations(1);

int main(int argc, char** argv) {
  configure_workers_from_env();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}

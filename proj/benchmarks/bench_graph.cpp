#include <benchmark/benchmark.h>

#include "fedsim/fl.hpp"
#include "fedsim/graph.hpp"
#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;

namespace {

Tensor random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
    return t;
}

void BM_forward_classify(benchmark::State& state) {
    ModelSpec spec;
    const ParamSet w = init_weights(spec, 7);
    const Tensor x = random_batch(static_cast<std::size_t>(state.range(0)), spec.input_size(), 11);
    for (auto _ : state) {
        benchmark::DoNotOptimize(classify(encode(x, spec, w), spec, w));
    }
}
BENCHMARK(BM_forward_classify)->Arg(4)->Arg(32);

void BM_local_objective_step(benchmark::State& state) {
    ModelSpec spec;
    const ParamSet w = init_weights(spec, 7);
    const ParamSet wg = init_weights(spec, 8);
    const Tensor x = random_batch(4, spec.input_size(), 11);
    const std::vector<int> y = {0, 1, 2, 3};
    const double mu = state.range(0) == 0 ? 0.0 : 0.01;
    for (auto _ : state) {
        benchmark::DoNotOptimize(local_objective(spec, w, wg, x, y, mu, 0.005));
    }
}
BENCHMARK(BM_local_objective_step)->Arg(0)->Arg(1);

} // namespace

BENCHMARK_MAIN();

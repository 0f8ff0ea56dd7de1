#include <benchmark/benchmark.h>

#include "fedsim/fl.hpp"
#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/synth.hpp"

using namespace fedsim;

namespace {

void BM_cross_correlation(benchmark::State& state) {
    const std::size_t b = static_cast<std::size_t>(state.range(0)), d = 16;
    Rng rng(3);
    Tensor zl({b, d}), zg({b, d});
    for (std::size_t i = 0; i < zl.size(); ++i) zl[i] = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < zg.size(); ++i) zg[i] = rng.uniform(-1, 1);
    for (auto _ : state) benchmark::DoNotOptimize(cross_correlation(zl, zg));
}
BENCHMARK(BM_cross_correlation)->Arg(4)->Arg(64);

void BM_aggregate(benchmark::State& state) {
    ModelSpec spec;
    std::vector<ParamSet> weights;
    std::vector<std::size_t> sizes;
    for (std::size_t i = 0; i < 3; ++i) {
        weights.push_back(init_weights(spec, i));
        sizes.push_back(50 + 30 * i);
    }
    for (auto _ : state) benchmark::DoNotOptimize(aggregate(weights, sizes));
}
BENCHMARK(BM_aggregate);

void BM_corrupt(benchmark::State& state) {
    const auto specs = default_center_specs(1, 4, {4});
    const CenterDataset ds = generate_center_dataset(specs[0], 16, 16, 5);
    std::uint64_t seed = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(corrupt(ds.samples[0].image, 4, 4, seed++));
    }
}
BENCHMARK(BM_corrupt);

} // namespace

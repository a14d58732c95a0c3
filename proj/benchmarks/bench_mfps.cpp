#include <benchmark/benchmark.h>

#include "normalforge/mfps.hpp"
#include "normalforge/synth.hpp"

using namespace normalforge;

static void PoolBuild(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, static_cast<int>(state.range(0)),
                                       0.002, 90.0, 5});
    SpatialIndex index(cloud);
    MfpsParams params;
    params.scales = {30, 60, 90};
    params.plane_samples = 60;
    for (auto _ : state) {
        PatchPool pool = build_patch_pool(cloud, index, params, 7);
        benchmark::DoNotOptimize(pool.patches.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(PoolBuild)->RangeMultiplier(2)->Range(512, 4096)->Complexity()->Unit(benchmark::kMillisecond);

static void FullEstimate(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, 2000, 0.002, 90.0, 6});
    MfpsParams params;
    params.scales = {30, 60, 90};
    params.plane_samples = 60;
    params.classify_k = 60;
    params.orient_k = 30;
    for (auto _ : state) {
        NormalField field = mfps_estimate(cloud, params, 7);
        benchmark::DoNotOptimize(field.data());
    }
}
BENCHMARK(FullEstimate)->Unit(benchmark::kMillisecond);

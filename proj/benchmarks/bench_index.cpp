#include <benchmark/benchmark.h>

#include "normalforge/geometry.hpp"
#include "normalforge/synth.hpp"

using namespace normalforge;

static void IndexBuild(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, static_cast<int>(state.range(0)),
                                       0.003, 90.0, 1});
    for (auto _ : state) {
        SpatialIndex index(cloud);
        benchmark::DoNotOptimize(index.size());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(IndexBuild)->RangeMultiplier(4)->Range(1 << 10, 1 << 16)->Complexity();

static void Knn100(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, static_cast<int>(state.range(0)),
                                       0.003, 90.0, 2});
    SpatialIndex index(cloud);
    int i = 0;
    for (auto _ : state) {
        auto nbhd = index.knn(cloud.points[i++ % cloud.size()], 100);
        benchmark::DoNotOptimize(nbhd.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(Knn100)->RangeMultiplier(4)->Range(1 << 10, 1 << 16)->Complexity();

static void BallQuery(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, 20000, 0.003, 90.0, 3});
    SpatialIndex index(cloud);
    double radius = 0.02 * state.range(0) * bbox_diagonal(cloud) / 10.0;
    int i = 0;
    for (auto _ : state) {
        auto nbhd = index.ball(cloud.points[i++ % cloud.size()], radius);
        benchmark::DoNotOptimize(nbhd.data());
    }
}
BENCHMARK(BallQuery)->DenseRange(1, 5, 2);

#include <benchmark/benchmark.h>

#include "normalforge/filtering.hpp"
#include "normalforge/synth.hpp"

using namespace normalforge;

static void BilateralPass(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Sphere, static_cast<int>(state.range(0)),
                                       0.005, 90.0, 7});
    SpatialIndex index(cloud);
    double sigma_s = 0.025 * bbox_diagonal(cloud);
    for (auto _ : state) {
        NormalField out = bilateral_filter(cloud, index, cloud.gt_normals, sigma_s, 0.35);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BilateralPass)->RangeMultiplier(2)->Range(1 << 10, 1 << 14)->Complexity()->Unit(benchmark::kMillisecond);

static void Reorient9(benchmark::State& state) {
    Rng rng(9);
    std::vector<Vec3> normals;
    Vec3 base = Vec3(0.2, -0.4, 0.89).normalized();
    for (int j = 0; j < 9; ++j)
        normals.push_back((base + 0.1 * Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian()))
                              .normalized());
    for (auto _ : state) {
        Reoriented out = reorient(normals);
        benchmark::DoNotOptimize(out.normals.data());
    }
}
BENCHMARK(Reorient9);

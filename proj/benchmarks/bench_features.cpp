#include <benchmark/benchmark.h>

#include "normalforge/features.hpp"
#include "normalforge/synth.hpp"

using namespace normalforge;

static void HmpSingle(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, 8000, 0.003, 90.0, 11});
    SpatialIndex index(cloud);
    ResolvedFeatureParams params =
        resolve_features(FeatureParams{0.05, 300, 7, 1.5, 1.0}, bbox_diagonal(cloud));
    Mat3 frame = reorient(std::vector<Vec3>{cloud.gt_normals[0]}).rotation;
    int i = 0;
    for (auto _ : state) {
        HmpGrid grid = build_hmp(cloud, index, i++ % cloud.size(),
                                 cloud.gt_normals[(i - 1) % cloud.size()], frame, params);
        benchmark::DoNotOptimize(grid.values.data());
    }
}
BENCHMARK(HmpSingle);

static void BranchBundle(benchmark::State& state) {
    PointCloud cloud = synth_generate({ShapeKind::Cube, static_cast<int>(state.range(0)),
                                       0.003, 90.0, 12});
    SpatialIndex index(cloud);
    FilterParams filter = FilterParams::from_fracs(std::vector<double>{0.025, 0.05},
                                                   std::vector<double>{0.1, 0.2, 0.35, 0.5},
                                                   true, bbox_diagonal(cloud));
    FeatureParams features{0.05, 100, 7, 1.5, 1.0};
    for (auto _ : state) {
        BranchInputs inputs =
            build_branch_inputs(cloud, index, cloud.gt_normals, filter, features, 13);
        benchmark::DoNotOptimize(inputs.patches.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BranchBundle)->RangeMultiplier(2)->Range(256, 2048)->Complexity()->Unit(benchmark::kMillisecond);

#include <benchmark/benchmark.h>

#include "normalforge/nn.hpp"
#include "normalforge/refine.hpp"

using namespace normalforge;
using namespace normalforge::nn;

namespace {

std::vector<LayerSpec> pointnet_stack(int width_scale) {
    std::vector<LayerSpec> layers;
    int in = 3;
    for (int w : {4 * width_scale, 4 * width_scale, 8 * width_scale}) {
        std::string name = "m" + std::to_string(layers.size());
        layers.push_back(mlp_layer(name, in, w));
        layers.push_back(bn_layer(name + ".bn", w));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        in = w;
    }
    layers.push_back({LayerSpec::Kind::MaxOverSet, 0, 0, 1.0, {}});
    layers.push_back(fc_layer("head", in, 12));
    return layers;
}

}  // namespace

static void ForwardBackward(benchmark::State& state) {
    const int scale = static_cast<int>(state.range(0));
    std::vector<LayerSpec> layers = pointnet_stack(scale);
    ParamStore store;
    Rng init(1);
    init_stack_params(layers, store, init);
    Rng rng(2);
    Tensor x({16, 64, 3});
    for (double& v : x.data) v = rng.gaussian();
    Tensor upstream({16, 12});
    std::fill(upstream.data.begin(), upstream.data.end(), 1.0);

    for (auto _ : state) {
        ForwardResult fwd = forward(layers, store, x, Mode::Train, Rng(3));
        Gradients grads = backward(fwd, upstream);
        benchmark::DoNotOptimize(grads.by_name.size());
    }
}
BENCHMARK(ForwardBackward)->DenseRange(2, 8, 2)->Unit(benchmark::kMillisecond);

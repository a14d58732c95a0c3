#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "normalforge/denoise.hpp"
#include "normalforge/features.hpp"
#include "normalforge/mfps.hpp"
#include "normalforge/refine.hpp"
#include "normalforge/synth.hpp"

namespace normalforge {

struct TrainConfig {
    double lr = 1e-4;
    int batch = 512;
    int epochs = 200;
    int k_c = 4;
    double bn_momentum = 0.9;
    int kmeans_iters = 100;

    void validate() const;
};

struct FilterConfig {
    std::vector<double> spatial_sigma_fracs{0.025, 0.05};
    std::vector<double> range_sigmas{0.1, 0.2, 0.35, 0.5};
    bool include_unfiltered = true;

    void validate() const;
};

// Every tunable of every pipeline stage, with library defaults. Loading
// rejects unknown keys and out-of-range values; missing keys keep defaults.
struct Config {
    std::uint64_t seed = 0;
    SynthShape synth;
    MfpsParams mfps;
    FilterConfig filter;
    FeatureParams features;
    ArchParams arch;
    TrainConfig train;
    DenoiseParams denoise;
    std::vector<double> eval_alphas{5.0, 10.0};

    void validate() const;

    TrainHyper train_hyper() const {
        return {train.lr, train.batch, train.epochs, train.k_c, train.bn_momentum,
                train.kmeans_iters, seed};
    }
    RefineModel model_meta() const {
        RefineModel m;
        m.spatial_sigma_fracs = filter.spatial_sigma_fracs;
        m.range_sigmas = filter.range_sigmas;
        m.include_unfiltered = filter.include_unfiltered;
        m.features = features;
        m.arch = arch;
        m.seed = seed;
        return m;
    }
};

Config default_config();
Config load_config(const std::string& path);
Config config_from_json_text(const std::string& text);
std::string config_to_json_text(const Config& config);

}  // namespace normalforge

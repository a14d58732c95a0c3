#include "normalforge/denoise.hpp"

#include <cmath>

#include "normalforge/parallel.hpp"

namespace normalforge {

void DenoiseParams::validate() const {
    if (lambda < 0.0) throw ConfigError("denoise: lambda must be >= 0");
    if (iterations < 0) throw ConfigError("denoise: iterations must be >= 0");
    if (sigma <= 0.0) throw ConfigError("denoise: sigma must be > 0");
    if (ball_radius_frac <= 0.0) throw ConfigError("denoise: ball_radius_frac must be > 0");
    if (step_gamma < 0.0) throw ConfigError("denoise: step_gamma must be >= 0");
}

PointCloud point_update(const PointCloud& cloud, const NormalField& normals,
                        const DenoiseParams& params) {
    params.validate();
    if (normals.size() != cloud.points.size())
        throw LengthMismatch("point_update: one normal per point required");

    // neighborhoods frozen from the input positions; self excluded
    SpatialIndex index(cloud);
    const double radius = params.ball_radius_frac * bbox_diagonal(cloud);
    std::vector<std::vector<int>> neighborhoods(cloud.points.size());
    parallel_for(cloud.size(), [&](std::int64_t i) {
        for (int j : index.ball(cloud.points[i], radius))
            if (j != static_cast<int>(i)) neighborhoods[i].push_back(j);
    });

    const double inv_sigma2 = 1.0 / (params.sigma * params.sigma);
    PointCloud result = cloud;
    std::vector<Vec3> next(cloud.points.size());
    for (int iter = 0; iter < params.iterations; ++iter) {
        parallel_for(cloud.size(), [&](std::int64_t i) {
            const std::vector<int>& nbhd = neighborhoods[i];
            if (nbhd.empty()) {
                next[i] = result.points[i];
                return;
            }
            const Vec3& p = result.points[i];
            const Vec3& n_i = normals[i];
            Vec3 disp = Vec3::Zero();
            for (int j : nbhd) {
                Vec3 offset = result.points[j] - p;
                const Vec3& n_j = normals[j];
                double w = std::exp(-(n_i - n_j).squaredNorm() * inv_sigma2);
                disp += w * offset.dot(n_i) * n_i + params.lambda * offset.dot(n_j) * n_j;
            }
            double gamma = params.step_gamma > 0.0
                               ? params.step_gamma
                               : 1.0 / (3.0 * static_cast<double>(nbhd.size()));
            next[i] = p + gamma * disp;
        });
        result.points.swap(next);
    }
    return result;
}

}  // namespace normalforge

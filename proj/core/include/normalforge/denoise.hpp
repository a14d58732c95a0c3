#pragma once

#include "normalforge/geometry.hpp"

namespace normalforge {

struct DenoiseParams {
    double lambda = 0.5;          // cross-normal tradeoff
    int iterations = 20;
    double sigma = 0.3;           // normal-similarity bandwidth (unitless)
    double ball_radius_frac = 0.03;  // times the bbox diagonal
    double step_gamma = 0.0;      // > 0 fixes the step size; otherwise 1 / (3 |N_i|)

    void validate() const;
};

// Normal-guided point update. Each iteration moves every point by the
// weighted projection of its neighbor offsets onto the fixed normals
// (own-normal term weighted by normal similarity, neighbor-normal term by
// lambda). Ball neighborhoods are computed once from the input positions and
// frozen across iterations; normals are never re-estimated. Jacobi-style:
// all displacements of an iteration read the previous iterate.
PointCloud point_update(const PointCloud& cloud, const NormalField& normals,
                        const DenoiseParams& params);

}  // namespace normalforge

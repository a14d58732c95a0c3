#include "normalforge/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "normalforge/parallel.hpp"

namespace normalforge {

void FeatureParams::validate() const {
    if (patch_radius_frac <= 0.0) throw ConfigError("features: patch_radius_frac must be > 0");
    if (max_pts < 8) throw ConfigError("features: max_pts must be >= 8");
    if (grid_m < 3 || grid_m % 2 == 0) throw ConfigError("features: grid_m must be odd and >= 3");
    if (ball_r_spacings <= 0.0 || sigma_d_spacings <= 0.0)
        throw ConfigError("features: bin ball radius and bandwidth must be > 0");
}

ResolvedFeatureParams resolve_features(const FeatureParams& params, double bbox_diag) {
    params.validate();
    ResolvedFeatureParams r;
    r.radius = params.radius_abs > 0.0 ? params.radius_abs : params.patch_radius_frac * bbox_diag;
    r.max_pts = params.max_pts;
    r.grid_m = params.grid_m;
    r.spacing = 2.0 * r.radius / params.grid_m;
    r.ball_r = params.ball_r_spacings * r.spacing;
    r.sigma_d = params.sigma_d_spacings * r.spacing;
    return r;
}

LocalPatch extract_patch(const PointCloud& cloud, const SpatialIndex& index, int i,
                         const Mat3& rotation, const ResolvedFeatureParams& params, Rng rng) {
    std::vector<int> members = index.ball(cloud.points[i], params.radius);

    if (static_cast<int>(members.size()) > params.max_pts) {
        // partial Fisher-Yates: first max_pts entries become the sample
        for (int k = 0; k < params.max_pts; ++k) {
            int j = k + rng.uniform_int(static_cast<int>(members.size()) - k);
            std::swap(members[k], members[j]);
        }
        members.resize(params.max_pts);
    }

    LocalPatch patch;
    patch.valid_count = static_cast<int>(members.size());
    patch.coords.assign(params.max_pts, Vec3::Zero());
    const Vec3& center = cloud.points[i];
    for (size_t k = 0; k < members.size(); ++k)
        patch.coords[k] = rotation.transpose() * (cloud.points[members[k]] - center) / params.radius;
    return patch;
}

HmpGrid build_hmp(const PointCloud& cloud, const SpatialIndex& index, int i,
                  const Vec3& world_normal, const Mat3& rotation,
                  const ResolvedFeatureParams& params) {
    const Vec3& center = cloud.points[i];
    const Vec3& n = world_normal;

    // grid X axis: first eigenvector projected into the tangent plane
    Vec3 e1 = rotation.col(0);
    Vec3 u = e1 - e1.dot(n) * n;
    double u_norm = u.norm();
    if (u_norm < 1e-9) {
        // normal almost parallel to e1 (degenerate frame); fall back to e2
        Vec3 e2 = rotation.col(1);
        u = e2 - e2.dot(n) * n;
        u_norm = u.norm();
    }
    u /= u_norm;
    Vec3 v = n.cross(u);

    HmpGrid grid;
    grid.m = params.grid_m;
    grid.values.assign(static_cast<size_t>(params.grid_m) * params.grid_m, 0.0);
    const double half = (params.grid_m - 1) / 2.0;
    const double inv_sigma2 = 1.0 / (params.sigma_d * params.sigma_d);

    for (int row = 0; row < params.grid_m; ++row) {
        for (int col = 0; col < params.grid_m; ++col) {
            Vec3 bin = center + (col - half) * params.spacing * u + (row - half) * params.spacing * v;
            double weight_sum = 0.0, height_sum = 0.0;
            for (int k : index.ball(bin, params.ball_r)) {
                double w = std::exp(-(bin - cloud.points[k]).squaredNorm() * inv_sigma2);
                weight_sum += w;
                height_sum += w * n.dot(cloud.points[k] - center);
            }
            if (weight_sum > 0.0)
                grid.at(row, col) = height_sum / weight_sum / params.radius;
        }
    }
    return grid;
}

std::string hmp_csv(const HmpGrid& grid) {
    std::string out;
    char buf[48];
    for (int row = 0; row < grid.m; ++row) {
        for (int col = 0; col < grid.m; ++col) {
            std::snprintf(buf, sizeof(buf), "%.9g", grid.at(row, col));
            out += buf;
            out += col + 1 < grid.m ? ',' : '\n';
        }
    }
    return out;
}

Rng branch_input_rng(std::uint64_t seed, int point) {
    return Rng(Rng::mix(seed, 0x46454154)).derive(static_cast<std::uint64_t>(point));
}

BranchInputs build_branch_inputs(const PointCloud& cloud, const SpatialIndex& index,
                                 const NormalField& initial, const FilterParams& filter_params,
                                 const FeatureParams& feature_params, std::uint64_t seed) {
    MultiScaleNormals filtered = multi_scale_filter(cloud, index, initial, filter_params);
    ResolvedFeatureParams rp = resolve_features(feature_params, bbox_diagonal(cloud));

    const int n = cloud.size();
    const int x = filtered.branches;
    BranchInputs out;
    out.branches = x;
    out.max_pts = rp.max_pts;
    out.grid_m = rp.grid_m;
    out.rotated_normals.resize(static_cast<size_t>(n) * x);
    out.patches.resize(n);
    out.hmps.resize(static_cast<size_t>(n) * x);
    out.rotations.resize(n);

    parallel_for(n, [&](std::int64_t i) {
        Reoriented reo = reorient(filtered.row(static_cast<int>(i)));
        out.rotations[i] = reo.rotation;
        out.patches[i] = extract_patch(cloud, index, static_cast<int>(i), reo.rotation, rp,
                                       branch_input_rng(seed, static_cast<int>(i)));
        for (int b = 0; b < x; ++b) {
            out.rotated_normals[i * x + b] = reo.normals[b];
            // world-frame normal sign-matched to the canonical (z >= 0) copy
            Vec3 world = reo.rotation * reo.normals[b];
            out.hmps[i * x + b] =
                build_hmp(cloud, index, static_cast<int>(i), world, reo.rotation, rp);
        }
    });
    return out;
}

}  // namespace normalforge

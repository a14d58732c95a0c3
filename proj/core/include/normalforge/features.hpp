#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "normalforge/filtering.hpp"
#include "normalforge/geometry.hpp"
#include "normalforge/rng.hpp"

namespace normalforge {

struct FeatureParams {
    double patch_radius_frac = 0.05;  // times the bbox diagonal
    int max_pts = 300;
    int grid_m = 7;                 // odd, >= 3
    double ball_r_spacings = 1.5;   // bin ball radius, in bin spacings
    double sigma_d_spacings = 1.0;  // bin Gaussian bandwidth, in bin spacings
    double radius_abs = 0.0;        // > 0: absolute patch radius, ignoring the fraction

    void validate() const;
};

// FeatureParams with the cloud-dependent quantities resolved to model units.
struct ResolvedFeatureParams {
    double radius = 0.0;
    int max_pts = 0;
    int grid_m = 0;
    double spacing = 0.0;  // 2 * radius / grid_m
    double ball_r = 0.0;
    double sigma_d = 0.0;
};

ResolvedFeatureParams resolve_features(const FeatureParams& params, double bbox_diag);

// Local neighborhood, centered at the origin and normalized by the patch
// radius; zero-padded to max_pts entries.
struct LocalPatch {
    std::vector<Vec3> coords;  // size max_pts, padded entries exactly zero
    int valid_count = 0;
};

// Ball neighborhood of point i, centered, expressed in the canonical frame
// (rotation^T, matching reorient) and divided by the patch radius. Randomly
// down-sampled (seeded) above max_pts, zero-padded below.
LocalPatch extract_patch(const PointCloud& cloud, const SpatialIndex& index, int i,
                         const Mat3& rotation, const ResolvedFeatureParams& params, Rng rng);

// m x m grid of Gaussian-weighted signed heights over a tangent plane,
// normalized by the patch radius; bins with empty ball neighborhoods are 0.
struct HmpGrid {
    int m = 0;
    std::vector<double> values;  // row-major

    double at(int row, int col) const { return values[static_cast<size_t>(row) * m + col]; }
    double& at(int row, int col) { return values[static_cast<size_t>(row) * m + col]; }
};

// The tangent plane passes through point i with normal world_normal (already
// sign-matched to the canonical frame); grid axes derive from the rotation's
// first eigenvector so X/Y directions are consistent across samples.
HmpGrid build_hmp(const PointCloud& cloud, const SpatialIndex& index, int i,
                  const Vec3& world_normal, const Mat3& rotation,
                  const ResolvedFeatureParams& params);

// m rows of m comma-separated values, for debug dumps.
std::string hmp_csv(const HmpGrid& grid);

// Per-point network inputs: X canonical-frame normals, one shared local
// patch, X height-map grids, plus the canonicalizing rotation.
struct BranchInputs {
    int branches = 0;
    int max_pts = 0;
    int grid_m = 0;
    std::vector<Vec3> rotated_normals;  // N * X, point-major
    std::vector<LocalPatch> patches;    // N
    std::vector<HmpGrid> hmps;          // N * X, point-major
    std::vector<Mat3> rotations;        // N

    std::span<const Vec3> normals_row(int point) const {
        return {rotated_normals.data() + static_cast<size_t>(point) * branches,
                static_cast<size_t>(branches)};
    }
    const HmpGrid& hmp_at(int point, int branch) const {
        return hmps[static_cast<size_t>(point) * branches + branch];
    }
};

BranchInputs build_branch_inputs(const PointCloud& cloud, const SpatialIndex& index,
                                 const NormalField& initial, const FilterParams& filter_params,
                                 const FeatureParams& feature_params, std::uint64_t seed);

// The patch down-sampling stream build_branch_inputs uses for one point;
// exposed so bundles can be recomposed from the standalone ops.
Rng branch_input_rng(std::uint64_t seed, int point);

}  // namespace normalforge

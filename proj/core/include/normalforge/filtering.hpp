#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "normalforge/geometry.hpp"
#include "normalforge/rng.hpp"

namespace normalforge {

struct FilterParams {
    std::vector<double> spatial_sigmas;  // model units
    std::vector<double> range_sigmas;    // unitless normal distance
    bool include_unfiltered = true;

    // branch count X = |spatial| * |range| + (1 if the unfiltered slot is kept)
    int branches() const {
        return static_cast<int>(spatial_sigmas.size() * range_sigmas.size()) +
               (include_unfiltered ? 1 : 0);
    }

    static FilterParams from_fracs(std::span<const double> spatial_fracs,
                                   std::span<const double> range_sigmas, bool include_unfiltered,
                                   double bbox_diag);
    void validate() const;
};

// One bilateral pass: each output normal is the normalized Gaussian-weighted
// sum of neighbor normals, weighted by spatial distance (sigma_s) and normal
// distance (sigma_r); the neighborhood is the ball of radius 2 * sigma_s and
// always contains the point itself.
NormalField bilateral_filter(const PointCloud& cloud, const SpatialIndex& index,
                             const NormalField& normals, double sigma_s, double sigma_r);

// X normals per point, point-major; slot order is fixed as (sigma_s outer,
// sigma_r inner, unfiltered last).
struct MultiScaleNormals {
    int branches = 0;
    std::vector<Vec3> data;  // size N * branches

    const Vec3& at(int point, int branch) const {
        return data[static_cast<size_t>(point) * branches + branch];
    }
    std::span<const Vec3> row(int point) const {
        return {data.data() + static_cast<size_t>(point) * branches,
                static_cast<size_t>(branches)};
    }
};

MultiScaleNormals multi_scale_filter(const PointCloud& cloud, const SpatialIndex& index,
                                     const NormalField& initial, const FilterParams& params);

struct Reoriented {
    std::vector<Vec3> normals;       // rotated into the tensor eigenbasis, z >= 0
    Mat3 rotation = Mat3::Identity();  // columns [e1, e2, e3], world <- eigenbasis
    bool degenerate = false;           // repeated dominant eigenvalue
};

// Eigen-decomposes the normal tensor sum(n n^T), expresses every normal in
// the eigenbasis (dominant eigenvector mapped to +z) and flips each result to
// nonnegative z. Eigenvector signs are canonicalized from the data so the
// frame is equivariant under rigid rotation of the inputs.
Reoriented reorient(std::span<const Vec3> raw_normals, std::ostream* log = nullptr);

struct ClusterModel {
    int dim = 0;
    std::vector<std::vector<double>> centers;
    std::vector<int> assignments;
};

// Lloyd's algorithm with k-means++ seeding; empty clusters are reseeded at
// the sample farthest from its assigned center.
ClusterModel kmeans_cluster(const std::vector<std::vector<double>>& features, int k_c, Rng& rng,
                            int max_iters = 100);

// argmin Euclidean distance; equidistant features go to the lowest cluster id.
int assign_cluster(const ClusterModel& model, std::span<const double> feature);

}  // namespace normalforge

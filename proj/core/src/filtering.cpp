#include "normalforge/filtering.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "normalforge/parallel.hpp"

namespace normalforge {

FilterParams FilterParams::from_fracs(std::span<const double> spatial_fracs,
                                      std::span<const double> range_sigmas,
                                      bool include_unfiltered, double bbox_diag) {
    FilterParams params;
    for (double f : spatial_fracs) params.spatial_sigmas.push_back(f * bbox_diag);
    params.range_sigmas.assign(range_sigmas.begin(), range_sigmas.end());
    params.include_unfiltered = include_unfiltered;
    params.validate();
    return params;
}

void FilterParams::validate() const {
    for (double s : spatial_sigmas)
        if (s <= 0.0) throw ConfigError("filter: spatial sigmas must be positive");
    for (double s : range_sigmas)
        if (s <= 0.0) throw ConfigError("filter: range sigmas must be positive");
    if (branches() < 1) throw ConfigError("filter: at least one branch required");
}

NormalField bilateral_filter(const PointCloud& cloud, const SpatialIndex& index,
                             const NormalField& normals, double sigma_s, double sigma_r) {
    if (normals.size() != cloud.points.size())
        throw LengthMismatch("bilateral_filter: one normal per point required");
    if (sigma_s <= 0.0 || sigma_r <= 0.0) throw ConfigError("bilateral_filter: sigmas must be > 0");

    const double inv_s = 1.0 / (2.0 * sigma_s * sigma_s);
    const double inv_r = 1.0 / (2.0 * sigma_r * sigma_r);
    NormalField out(normals.size());
    parallel_for(cloud.size(), [&](std::int64_t i) {
        const Vec3& p = cloud.points[i];
        const Vec3& n = normals[i];
        Vec3 sum = Vec3::Zero();
        for (int j : index.ball(p, 2.0 * sigma_s)) {
            double ds2 = (p - cloud.points[j]).squaredNorm();
            double dr2 = (n - normals[j]).squaredNorm();
            sum += std::exp(-ds2 * inv_s - dr2 * inv_r) * normals[j];
        }
        double norm = sum.norm();
        out[i] = norm > 1e-12 ? Vec3(sum / norm) : n;
    });
    return out;
}

MultiScaleNormals multi_scale_filter(const PointCloud& cloud, const SpatialIndex& index,
                                     const NormalField& initial, const FilterParams& params) {
    params.validate();
    if (initial.size() != cloud.points.size())
        throw LengthMismatch("multi_scale_filter: one initial normal per point required");

    MultiScaleNormals out;
    out.branches = params.branches();
    out.data.resize(initial.size() * out.branches);
    int slot = 0;
    for (double sigma_s : params.spatial_sigmas) {
        for (double sigma_r : params.range_sigmas) {
            NormalField filtered = bilateral_filter(cloud, index, initial, sigma_s, sigma_r);
            for (size_t i = 0; i < filtered.size(); ++i)
                out.data[i * out.branches + slot] = filtered[i];
            ++slot;
        }
    }
    if (params.include_unfiltered) {
        for (size_t i = 0; i < initial.size(); ++i)
            out.data[i * out.branches + slot] = initial[i];
    }
    return out;
}

namespace {

// Pick a data-driven sign for an eigenvector: first moment of the normal
// components along it, falling back to the third moment. Both statistics are
// intrinsic to the normal set, so the canonical frame rotates with the data.
bool canonical_flip(std::span<const Vec3> normals, const Vec3& axis) {
    double first = 0.0, third = 0.0;
    for (const Vec3& n : normals) {
        double c = n.dot(axis);
        first += c;
        third += c * c * c;
    }
    if (std::abs(first) > 1e-12) return first < 0.0;
    if (std::abs(third) > 1e-12) return third < 0.0;
    return false;
}

}  // namespace

Reoriented reorient(std::span<const Vec3> raw_normals, std::ostream* log) {
    if (raw_normals.empty()) throw DimensionMismatch("reorient: empty normal set");
    Mat3 tensor = Mat3::Zero();
    for (const Vec3& n : raw_normals) tensor += n * n.transpose();
    if (tensor.isZero(0.0)) throw DimensionMismatch("reorient: all-zero normal set");

    Eigen::SelfAdjointEigenSolver<Mat3> solver(tensor);
    Vec3 evals = solver.eigenvalues();  // ascending

    Reoriented result;
    if (evals[2] - evals[1] < 1e-12) {
        result.degenerate = true;
        if (log) *log << "reorient: repeated dominant eigenvalue, keeping solver order\n";
    }

    Vec3 e3 = solver.eigenvectors().col(2);
    Vec3 e2 = solver.eigenvectors().col(1);
    if (canonical_flip(raw_normals, e3)) e3 = -e3;
    if (canonical_flip(raw_normals, e2)) e2 = -e2;
    Vec3 e1 = e2.cross(e3);  // right-handed frame, det = +1

    result.rotation.col(0) = e1;
    result.rotation.col(1) = e2;
    result.rotation.col(2) = e3;

    result.normals.reserve(raw_normals.size());
    for (const Vec3& n : raw_normals) {
        Vec3 rotated = result.rotation.transpose() * n;
        if (rotated.z() < 0.0) rotated = -rotated;
        result.normals.push_back(rotated);
    }
    return result;
}

namespace {

double dist2(std::span<const double> a, std::span<const double> b) {
    double d2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        d2 += d * d;
    }
    return d2;
}

}  // namespace

ClusterModel kmeans_cluster(const std::vector<std::vector<double>>& features, int k_c, Rng& rng,
                            int max_iters) {
    const int n = static_cast<int>(features.size());
    if (k_c < 1) throw ConfigError("kmeans: k_c must be >= 1");
    if (n < k_c) throw ConfigError("kmeans: fewer samples than clusters");
    const int dim = static_cast<int>(features[0].size());
    for (const auto& f : features)
        if (static_cast<int>(f.size()) != dim) throw DimensionMismatch("kmeans: ragged features");

    ClusterModel model;
    model.dim = dim;

    // k-means++ seeding
    model.centers.push_back(features[rng.uniform_int(n)]);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    while (static_cast<int>(model.centers.size()) < k_c) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            min_d2[i] = std::min(min_d2[i], dist2(features[i], model.centers.back()));
            total += min_d2[i];
        }
        int pick = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (int i = 0; i < n; ++i) {
                acc += min_d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_int(n);  // all samples identical
        }
        model.centers.push_back(features[pick]);
    }

    model.assignments.assign(n, 0);
    for (int i = 0; i < n; ++i) model.assignments[i] = assign_cluster(model, features[i]);

    for (int iter = 0; iter < max_iters; ++iter) {
        // update step
        std::vector<std::vector<double>> sums(k_c, std::vector<double>(dim, 0.0));
        std::vector<int> counts(k_c, 0);
        for (int i = 0; i < n; ++i) {
            int c = model.assignments[i];
            ++counts[c];
            for (int d = 0; d < dim; ++d) sums[c][d] += features[i][d];
        }
        for (int c = 0; c < k_c; ++c) {
            if (counts[c] == 0) {
                // reseed at the sample farthest from its assigned center
                double best = -1.0;
                int far = 0;
                for (int i = 0; i < n; ++i) {
                    double d2 = dist2(features[i], model.centers[model.assignments[i]]);
                    if (d2 > best) {
                        best = d2;
                        far = i;
                    }
                }
                model.centers[c] = features[far];
                continue;
            }
            for (int d = 0; d < dim; ++d) model.centers[c][d] = sums[c][d] / counts[c];
        }

        // assignment step
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int c = assign_cluster(model, features[i]);
            if (c != model.assignments[i]) {
                model.assignments[i] = c;
                changed = true;
            }
        }
        if (!changed) break;
    }
    return model;
}

int assign_cluster(const ClusterModel& model, std::span<const double> feature) {
    if (static_cast<int>(feature.size()) != model.dim)
        throw DimensionMismatch("assign_cluster: feature dim " + std::to_string(feature.size()) +
                                " != model dim " + std::to_string(model.dim));
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int c = 0; c < static_cast<int>(model.centers.size()); ++c) {
        double d2 = dist2(feature, model.centers[c]);
        if (d2 < best_d2) {
            best_d2 = d2;
            best = c;
        }
    }
    return best;
}

}  // namespace normalforge

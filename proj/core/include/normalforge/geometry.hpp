#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "normalforge/errors.hpp"

namespace normalforge {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// One unit vector per point; flows through every pipeline stage.
using NormalField = std::vector<Vec3>;

struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> gt_normals;  // empty when no ground truth is attached
    std::string name;

    bool has_gt() const { return !gt_normals.empty(); }
    int size() const { return static_cast<int>(points.size()); }
};

// Throws InvalidCloud unless: all coordinates finite, at least 4 points, and
// gt_normals (when present) matches the point count with unit entries.
void validate_cloud(const PointCloud& cloud);

// Euclidean norm of the axis-aligned bounding-box extent.
double bbox_diagonal(const PointCloud& cloud);

enum class PointClass { Candidate, Smooth };

// kd-tree over the cloud positions. Queries are read-only and may run from
// any number of threads. Result ordering is total: ascending squared
// distance, ties by ascending point index.
class SpatialIndex {
  public:
    explicit SpatialIndex(const PointCloud& cloud);

    // exactly min(k, N) distinct indices, nearest first
    std::vector<int> knn(const Vec3& query, int k) const;

    // exactly the indices with distance <= radius, nearest first
    std::vector<int> ball(const Vec3& query, double radius) const;

    int size() const { return static_cast<int>(points_.size()); }

  private:
    struct Node {
        int left = -1;
        int right = -1;
        int axis = 0;
        double split = 0.0;
        int begin = 0;  // leaf payload range in order_
        int end = 0;
        Vec3 lo = Vec3::Zero();
        Vec3 hi = Vec3::Zero();
        bool leaf() const { return left < 0; }
    };

    int build(int begin, int end);
    void knn_search(int node, const Vec3& q, int k,
                    std::vector<std::pair<double, int>>& heap) const;
    void ball_search(int node, const Vec3& q, double r2,
                     std::vector<std::pair<double, int>>& out) const;

    std::vector<Vec3> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

// Eigenvector of the centered covariance with smallest eigenvalue, unit
// length; sign unconstrained. Throws DegenerateNeighborhood when the
// covariance has rank < 2 (collinear or coincident points).
Vec3 pca_normal(const PointCloud& cloud, std::span<const int> neighborhood);

// Covariance eigenvalues of the k-NN neighborhood of a point, ascending.
Vec3 neighborhood_eigenvalues(const PointCloud& cloud, const SpatialIndex& index,
                              int point, int k);

// Point i is Candidate iff the surface variation lambda_1 / (lambda_1 +
// lambda_2 + lambda_3) of its k-NN covariance exceeds tau.
std::vector<PointClass> classify_points(const PointCloud& cloud, const SpatialIndex& index,
                                        int k, double tau);

}  // namespace normalforge

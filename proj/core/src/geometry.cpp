#include "normalforge/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>

#include "normalforge/parallel.hpp"

namespace normalforge {

void validate_cloud(const PointCloud& cloud) {
    if (cloud.points.size() < 4)
        throw InvalidCloud("cloud '" + cloud.name + "' has fewer than 4 points");
    for (const Vec3& p : cloud.points) {
        if (!p.allFinite()) throw InvalidCloud("cloud '" + cloud.name + "' has non-finite coordinates");
    }
    if (cloud.has_gt()) {
        if (cloud.gt_normals.size() != cloud.points.size())
            throw InvalidCloud("gt normal count does not match point count");
        for (const Vec3& n : cloud.gt_normals) {
            if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-6)
                throw InvalidCloud("gt normals must be unit length");
        }
    }
}

double bbox_diagonal(const PointCloud& cloud) {
    if (cloud.points.empty()) return 0.0;
    Vec3 lo = cloud.points[0];
    Vec3 hi = cloud.points[0];
    for (const Vec3& p : cloud.points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    return (hi - lo).norm();
}

namespace {
constexpr int kLeafSize = 16;
}

SpatialIndex::SpatialIndex(const PointCloud& cloud) : points_(cloud.points) {
    order_.resize(points_.size());
    for (int i = 0; i < static_cast<int>(order_.size()); ++i) order_[i] = i;
    nodes_.reserve(points_.empty() ? 1 : 2 * points_.size() / kLeafSize + 2);
    if (!points_.empty()) root_ = build(0, static_cast<int>(points_.size()));
}

int SpatialIndex::build(int begin, int end) {
    Node node;
    node.lo = points_[order_[begin]];
    node.hi = node.lo;
    for (int i = begin + 1; i < end; ++i) {
        node.lo = node.lo.cwiseMin(points_[order_[i]]);
        node.hi = node.hi.cwiseMax(points_[order_[i]]);
    }
    if (end - begin <= kLeafSize) {
        node.begin = begin;
        node.end = end;
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size()) - 1;
    }

    Vec3 extent = node.hi - node.lo;
    int axis = 0;
    if (extent[1] > extent[axis]) axis = 1;
    if (extent[2] > extent[axis]) axis = 2;
    int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                         double ca = points_[a][axis], cb = points_[b][axis];
                         return ca < cb || (ca == cb && a < b);
                     });
    node.axis = axis;
    node.split = points_[order_[mid]][axis];

    int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    int left = build(begin, mid);
    int right = build(mid, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
}

namespace {

double box_dist2(const Vec3& q, const Vec3& lo, const Vec3& hi) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        double d = 0.0;
        if (q[a] < lo[a]) d = lo[a] - q[a];
        else if (q[a] > hi[a]) d = q[a] - hi[a];
        d2 += d * d;
    }
    return d2;
}

// max-heap entry ordering on (dist2, index): the worst candidate sits on top
bool heap_less(const std::pair<double, int>& a, const std::pair<double, int>& b) {
    return a.first < b.first || (a.first == b.first && a.second < b.second);
}

}  // namespace

void SpatialIndex::knn_search(int ni, const Vec3& q, int k,
                              std::vector<std::pair<double, int>>& heap) const {
    const Node& node = nodes_[ni];
    if (static_cast<int>(heap.size()) == k &&
        box_dist2(q, node.lo, node.hi) > heap.front().first)
        return;
    if (node.leaf()) {
        for (int i = node.begin; i < node.end; ++i) {
            int idx = order_[i];
            double d2 = (points_[idx] - q).squaredNorm();
            std::pair<double, int> cand{d2, idx};
            if (static_cast<int>(heap.size()) < k) {
                heap.push_back(cand);
                std::push_heap(heap.begin(), heap.end(), heap_less);
            } else if (heap_less(cand, heap.front())) {
                std::pop_heap(heap.begin(), heap.end(), heap_less);
                heap.back() = cand;
                std::push_heap(heap.begin(), heap.end(), heap_less);
            }
        }
        return;
    }
    // nearer child first
    int first = q[node.axis] < node.split ? node.left : node.right;
    int second = first == node.left ? node.right : node.left;
    knn_search(first, q, k, heap);
    knn_search(second, q, k, heap);
}

std::vector<int> SpatialIndex::knn(const Vec3& query, int k) const {
    std::vector<int> result;
    if (k <= 0 || root_ < 0) return result;
    k = std::min<int>(k, static_cast<int>(points_.size()));
    std::vector<std::pair<double, int>> heap;
    heap.reserve(k + 1);
    knn_search(root_, query, k, heap);
    std::sort(heap.begin(), heap.end());
    result.reserve(heap.size());
    for (const auto& [d2, idx] : heap) result.push_back(idx);
    return result;
}

void SpatialIndex::ball_search(int ni, const Vec3& q, double r2,
                               std::vector<std::pair<double, int>>& out) const {
    const Node& node = nodes_[ni];
    if (box_dist2(q, node.lo, node.hi) > r2) return;
    if (node.leaf()) {
        for (int i = node.begin; i < node.end; ++i) {
            int idx = order_[i];
            double d2 = (points_[idx] - q).squaredNorm();
            if (d2 <= r2) out.emplace_back(d2, idx);
        }
        return;
    }
    ball_search(node.left, q, r2, out);
    ball_search(node.right, q, r2, out);
}

std::vector<int> SpatialIndex::ball(const Vec3& query, double radius) const {
    std::vector<int> result;
    if (root_ < 0 || radius < 0.0) return result;
    std::vector<std::pair<double, int>> found;
    ball_search(root_, query, radius * radius, found);
    std::sort(found.begin(), found.end());
    result.reserve(found.size());
    for (const auto& [d2, idx] : found) result.push_back(idx);
    return result;
}

namespace {

Mat3 centered_covariance(const PointCloud& cloud, std::span<const int> nbhd) {
    Vec3 mean = Vec3::Zero();
    for (int idx : nbhd) mean += cloud.points[idx];
    mean /= static_cast<double>(nbhd.size());
    Mat3 cov = Mat3::Zero();
    for (int idx : nbhd) {
        Vec3 d = cloud.points[idx] - mean;
        cov += d * d.transpose();
    }
    return cov / static_cast<double>(nbhd.size());
}

}  // namespace

Vec3 pca_normal(const PointCloud& cloud, std::span<const int> neighborhood) {
    if (neighborhood.size() < 3)
        throw DegenerateNeighborhood("pca_normal requires at least 3 points");
    Mat3 cov = centered_covariance(cloud, neighborhood);
    Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
    Vec3 evals = solver.eigenvalues();  // ascending
    if (evals[2] <= 0.0 || evals[1] <= 1e-12 * evals[2])
        throw DegenerateNeighborhood("neighborhood covariance has rank < 2");
    return solver.eigenvectors().col(0).normalized();
}

Vec3 neighborhood_eigenvalues(const PointCloud& cloud, const SpatialIndex& index,
                              int point, int k) {
    std::vector<int> nbhd = index.knn(cloud.points[point], k);
    Mat3 cov = centered_covariance(cloud, nbhd);
    Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
    return solver.eigenvalues();
}

std::vector<PointClass> classify_points(const PointCloud& cloud, const SpatialIndex& index,
                                        int k, double tau) {
    if (k < 3) throw DegenerateNeighborhood("classify_points requires k >= 3");
    std::vector<PointClass> classes(cloud.points.size(), PointClass::Smooth);
    std::exception_ptr error;
    std::mutex error_mutex;
    parallel_for(cloud.size(), [&](std::int64_t i) {
        Vec3 evals = neighborhood_eigenvalues(cloud, index, static_cast<int>(i), k);
        double total = evals.sum();
        if (total <= 0.0) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error)
                error = std::make_exception_ptr(
                    DegenerateNeighborhood("coincident neighborhood in classify_points"));
            return;
        }
        double variation = evals[0] / total;
        classes[i] = variation > tau ? PointClass::Candidate : PointClass::Smooth;
    });
    if (error) std::rethrow_exception(error);
    return classes;
}

}  // namespace normalforge

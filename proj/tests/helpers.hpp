#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "normalforge/geometry.hpp"
#include "normalforge/rng.hpp"

namespace nf = normalforge;

namespace test_util {

inline nf::PointCloud random_blob(int n, std::uint64_t seed, double extent = 1.0) {
    nf::Rng rng(seed);
    nf::PointCloud cloud;
    cloud.name = "blob";
    cloud.points.reserve(n);
    for (int i = 0; i < n; ++i)
        cloud.points.emplace_back(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                                  rng.uniform(-extent, extent));
    return cloud;
}

// rotation about a random axis, built from an angle-axis pair
inline nf::Mat3 random_rotation(std::uint64_t seed) {
    nf::Rng rng(seed);
    nf::Vec3 axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
    axis.normalize();
    double angle = rng.uniform(0.3, 2.8);
    double c = std::cos(angle), s = std::sin(angle);
    nf::Mat3 k;
    k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
    return nf::Mat3::Identity() + s * k + (1 - c) * k * k;
}

// angle between two directions ignoring sign, in radians
inline double unoriented_angle(const nf::Vec3& a, const nf::Vec3& b) {
    double c = std::abs(a.normalized().dot(b.normalized()));
    return std::acos(std::min(1.0, c));
}

// eigenvalues of a symmetric 3x3 matrix via the trigonometric closed form;
// independent of any library eigensolver
inline std::array<double, 3> symmetric_eigenvalues(const nf::Mat3& a) {
    double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
    double q = (a(0, 0) + a(1, 1) + a(2, 2)) / 3.0;
    if (p1 < 1e-30) {
        std::array<double, 3> ev{a(0, 0), a(1, 1), a(2, 2)};
        std::sort(ev.begin(), ev.end());
        return ev;
    }
    double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) +
                (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
    double p = std::sqrt(p2 / 6.0);
    nf::Mat3 b = (a - q * nf::Mat3::Identity()) / p;
    double r = b.determinant() / 2.0;
    r = std::clamp(r, -1.0, 1.0);
    double phi = std::acos(r) / 3.0;
    double e1 = q + 2.0 * p * std::cos(phi);
    double e3 = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
    double e2 = 3.0 * q - e1 - e3;
    std::array<double, 3> ev{e1, e2, e3};
    std::sort(ev.begin(), ev.end());
    return ev;
}

}  // namespace test_util

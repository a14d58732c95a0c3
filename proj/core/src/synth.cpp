#include "normalforge/synth.hpp"

#include <cmath>

#include "normalforge/rng.hpp"

namespace normalforge {

ShapeKind shape_kind_from_string(const std::string& s) {
    if (s == "plane") return ShapeKind::Plane;
    if (s == "sphere") return ShapeKind::Sphere;
    if (s == "cube") return ShapeKind::Cube;
    if (s == "cylinder") return ShapeKind::Cylinder;
    if (s == "dihedral") return ShapeKind::Dihedral;
    throw ConfigError("unknown shape kind '" + s + "'");
}

std::string to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::Plane: return "plane";
        case ShapeKind::Sphere: return "sphere";
        case ShapeKind::Cube: return "cube";
        case ShapeKind::Cylinder: return "cylinder";
        case ShapeKind::Dihedral: return "dihedral";
    }
    return "?";
}

namespace {

void sample_plane(Rng& rng, Vec3& p, Vec3& n) {
    p = Vec3(rng.uniform(), rng.uniform(), 0.0);
    n = Vec3(0, 0, 1);
}

void sample_sphere(Rng& rng, Vec3& p, Vec3& n) {
    Vec3 dir;
    do {
        dir = Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
    } while (dir.norm() < 1e-12);
    n = dir.normalized();
    p = n;  // unit sphere centered at the origin
}

void sample_cube(Rng& rng, Vec3& p, Vec3& n) {
    int face = rng.uniform_int(6);
    double u = rng.uniform(), v = rng.uniform();
    int axis = face / 2;
    double side = face % 2 ? 1.0 : 0.0;
    p[axis] = side;
    p[(axis + 1) % 3] = u;
    p[(axis + 2) % 3] = v;
    n = Vec3::Zero();
    n[axis] = side > 0.5 ? 1.0 : -1.0;
}

void sample_cylinder(Rng& rng, Vec3& p, Vec3& n) {
    // radius 0.5, z in [-1, 1], closed caps; sampled proportional to area
    const double r = 0.5, h = 2.0;
    const double lateral = 2.0 * M_PI * r * h;
    const double cap = M_PI * r * r;
    double pick = rng.uniform() * (lateral + 2.0 * cap);
    if (pick < lateral) {
        double a = rng.uniform() * 2.0 * M_PI;
        double z = rng.uniform(-1.0, 1.0);
        n = Vec3(std::cos(a), std::sin(a), 0.0);
        p = Vec3(r * n.x(), r * n.y(), z);
    } else {
        double z = pick < lateral + cap ? -1.0 : 1.0;
        double a = rng.uniform() * 2.0 * M_PI;
        double rr = r * std::sqrt(rng.uniform());
        p = Vec3(rr * std::cos(a), rr * std::sin(a), z);
        n = Vec3(0, 0, z);
    }
}

void sample_dihedral(Rng& rng, double angle_deg, Vec3& p, Vec3& n) {
    // two unit-square faces hinged on the x-axis, opening angle between them
    double a = angle_deg * M_PI / 180.0;
    double x = rng.uniform(), t = rng.uniform();
    if (rng.uniform() < 0.5) {
        p = Vec3(x, t, 0.0);
        n = Vec3(0, 0, 1);
    } else {
        p = Vec3(x, t * std::cos(a), t * std::sin(a));
        n = Vec3(0, -std::sin(a), std::cos(a));
    }
}

}  // namespace

PointCloud synth_generate(const SynthShape& shape) {
    return synth_generate(shape, nullptr);
}

PointCloud synth_generate(const SynthShape& shape, std::vector<Vec3>* clean_positions) {
    PointCloud cloud;
    cloud.name = to_string(shape.kind);
    cloud.points.resize(shape.count);
    cloud.gt_normals.resize(shape.count);

    Rng rng(Rng::mix(shape.seed, 0x53594e54));
    for (int i = 0; i < shape.count; ++i) {
        Vec3 p, n;
        switch (shape.kind) {
            case ShapeKind::Plane: sample_plane(rng, p, n); break;
            case ShapeKind::Sphere: sample_sphere(rng, p, n); break;
            case ShapeKind::Cube: sample_cube(rng, p, n); break;
            case ShapeKind::Cylinder: sample_cylinder(rng, p, n); break;
            case ShapeKind::Dihedral: sample_dihedral(rng, shape.dihedral_angle_deg, p, n); break;
        }
        cloud.points[i] = p;
        cloud.gt_normals[i] = n;
    }
    if (clean_positions) *clean_positions = cloud.points;

    if (shape.noise_frac > 0.0) {
        double sigma = shape.noise_frac * bbox_diagonal(cloud);
        for (Vec3& p : cloud.points)
            p += sigma * Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
    }
    return cloud;
}

}  // namespace normalforge

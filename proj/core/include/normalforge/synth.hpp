#pragma once

#include <cstdint>
#include <string>

#include "normalforge/geometry.hpp"

namespace normalforge {

enum class ShapeKind { Plane, Sphere, Cube, Cylinder, Dihedral };

ShapeKind shape_kind_from_string(const std::string& s);
std::string to_string(ShapeKind kind);

struct SynthShape {
    ShapeKind kind = ShapeKind::Plane;
    int count = 1000;
    double noise_frac = 0.0;           // Gaussian sigma as fraction of the clean bbox diagonal
    double dihedral_angle_deg = 90.0;  // opening angle between the two faces
    std::uint64_t seed = 0;
};

// Uniform surface sampling with analytic ground-truth normals taken at the
// clean positions; isotropic Gaussian displacement (per-axis sigma =
// noise_frac * clean bbox diagonal) is then added to the positions only.
PointCloud synth_generate(const SynthShape& shape);

// Same, but also returns the clean (pre-noise) positions for callers that
// need analytic references.
PointCloud synth_generate(const SynthShape& shape, std::vector<Vec3>* clean_positions);

}  // namespace normalforge

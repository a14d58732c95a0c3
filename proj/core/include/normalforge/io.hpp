#pragma once

#include <string>
#include <vector>

#include "normalforge/geometry.hpp"

namespace normalforge {

// ASCII triple files: one whitespace-separated "x y z" per line. Used for
// both point and normal files. Values are written with 9 significant digits
// so that write -> read -> write is a byte-level fixpoint.
std::vector<Vec3> read_vec3_file(const std::string& path);
void write_vec3_file(const std::string& path, const std::vector<Vec3>& rows);

std::string format_vec3(const Vec3& v);

PointCloud read_cloud(const std::string& points_path, const std::string& normals_path = "");

// ASCII PLY 1.0 with x y z nx ny nz red green blue per vertex; colors map the
// per-point angular error linearly blue -> red over [0, 30] degrees, clamped.
void write_ply_heatmap(const std::string& path, const PointCloud& cloud,
                       const NormalField& normals, const std::vector<double>& errors_deg);

}  // namespace normalforge

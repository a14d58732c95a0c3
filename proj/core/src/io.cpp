#include "normalforge/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace normalforge {

std::vector<Vec3> read_vec3_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open '" + path + "'");
    std::vector<Vec3> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        std::istringstream ss(line);
        Vec3 v;
        if (!(ss >> v.x() >> v.y() >> v.z()))
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected three floats");
        std::string extra;
        if (ss >> extra)
            throw ParseError(path + ":" + std::to_string(lineno) + ": trailing token '" + extra + "'");
        rows.push_back(v);
    }
    return rows;
}

std::string format_vec3(const Vec3& v) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g", v.x(), v.y(), v.z());
    return buf;
}

void write_vec3_file(const std::string& path, const std::vector<Vec3>& rows) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    for (const Vec3& v : rows) out << format_vec3(v) << '\n';
    if (!out) throw ParseError("failed writing '" + path + "'");
}

PointCloud read_cloud(const std::string& points_path, const std::string& normals_path) {
    PointCloud cloud;
    cloud.points = read_vec3_file(points_path);
    cloud.name = points_path;
    if (!normals_path.empty()) {
        cloud.gt_normals = read_vec3_file(normals_path);
        if (cloud.gt_normals.size() != cloud.points.size())
            throw LengthMismatch("'" + normals_path + "' has " +
                                 std::to_string(cloud.gt_normals.size()) + " rows but '" +
                                 points_path + "' has " + std::to_string(cloud.points.size()));
    }
    return cloud;
}

void write_ply_heatmap(const std::string& path, const PointCloud& cloud,
                       const NormalField& normals, const std::vector<double>& errors_deg) {
    if (normals.size() != cloud.points.size() || errors_deg.size() != cloud.points.size())
        throw LengthMismatch("heatmap export: points, normals and errors must have equal length");
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    out << "ply\nformat ascii 1.0\n";
    out << "element vertex " << cloud.points.size() << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    out << "property float nx\nproperty float ny\nproperty float nz\n";
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out << "end_header\n";
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        double t = std::clamp(errors_deg[i] / 30.0, 0.0, 1.0);
        int red = static_cast<int>(std::lround(255.0 * t));
        int blue = static_cast<int>(std::lround(255.0 * (1.0 - t)));
        out << format_vec3(cloud.points[i]) << ' ' << format_vec3(normals[i]) << ' ' << red
            << " 0 " << blue << '\n';
    }
    if (!out) throw ParseError("failed writing '" + path + "'");
}

}  // namespace normalforge

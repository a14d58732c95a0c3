#pragma once

#include <map>
#include <vector>

#include "normalforge/geometry.hpp"

namespace normalforge {

struct EvalReport {
    double mean_deg = 0.0;
    double rmse_deg = 0.0;
    std::map<double, double> pgp;  // alpha (degrees) -> fraction of points below alpha
    std::vector<double> per_point_errors_deg;
};

// Unoriented angular error in degrees: acos(clamp(|a.b|, 0, 1)), in [0, 90].
double angular_error_deg(const Vec3& pred, const Vec3& gt);

// mean / rmse over per-point errors; pgp[alpha] counts errors strictly below
// alpha. Throws LengthMismatch when field lengths differ.
EvalReport evaluate(const NormalField& pred, const NormalField& gt,
                    const std::vector<double>& alphas, bool keep_per_point = false);

}  // namespace normalforge

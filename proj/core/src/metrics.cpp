#include "normalforge/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "normalforge/parallel.hpp"

namespace normalforge {

double angular_error_deg(const Vec3& pred, const Vec3& gt) {
    double c = std::clamp(std::abs(pred.dot(gt)), 0.0, 1.0);
    return std::acos(c) * 180.0 / M_PI;
}

EvalReport evaluate(const NormalField& pred, const NormalField& gt,
                    const std::vector<double>& alphas, bool keep_per_point) {
    if (pred.size() != gt.size())
        throw LengthMismatch("evaluate: " + std::to_string(pred.size()) + " predictions vs " +
                             std::to_string(gt.size()) + " ground-truth normals");
    const std::int64_t n = static_cast<std::int64_t>(pred.size());
    std::vector<double> errors(n, 0.0);
    parallel_for(n, [&](std::int64_t i) { errors[i] = angular_error_deg(pred[i], gt[i]); });

    EvalReport report;
    // fixed-order reductions keep the result independent of thread count
    double sum = 0.0, sum_sq = 0.0;
    for (double e : errors) {
        sum += e;
        sum_sq += e * e;
    }
    if (n > 0) {
        report.mean_deg = sum / static_cast<double>(n);
        report.rmse_deg = std::sqrt(sum_sq / static_cast<double>(n));
    }
    for (double alpha : alphas) {
        std::int64_t good = 0;
        for (double e : errors)
            if (e < alpha) ++good;
        report.pgp[alpha] = n > 0 ? static_cast<double>(good) / static_cast<double>(n) : 0.0;
    }
    if (keep_per_point) report.per_point_errors_deg = std::move(errors);
    return report;
}

}  // namespace normalforge

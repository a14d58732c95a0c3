#include <doctest.h>

#include "helpers.hpp"
#include "normalforge/metrics.hpp"

using namespace normalforge;

namespace {

Vec3 tilted(double degrees) {
    double rad = degrees * M_PI / 180.0;
    return Vec3(std::sin(rad), 0.0, std::cos(rad));
}

}  // namespace

TEST_CASE("angular_error basics") {
    Vec3 z(0, 0, 1);
    CHECK(angular_error_deg(z, z) == doctest::Approx(0.0));
    CHECK(angular_error_deg(-z, z) == doctest::Approx(0.0));
    CHECK(angular_error_deg(Vec3(1, 0, 0), z) == doctest::Approx(90.0));
    CHECK(angular_error_deg(tilted(33.0), z) == doctest::Approx(33.0).epsilon(1e-10));
}

TEST_CASE("evaluate on the two-point example is exact") {
    NormalField pred{tilted(3.0), tilted(7.0)};
    NormalField gt{Vec3(0, 0, 1), Vec3(0, 0, 1)};
    EvalReport report = evaluate(pred, gt, {5.0, 10.0});
    CHECK(report.mean_deg == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(report.rmse_deg == doctest::Approx(std::sqrt(29.0)).epsilon(1e-12));
    CHECK(report.pgp.at(5.0) == doctest::Approx(0.5));
    CHECK(report.pgp.at(10.0) == doctest::Approx(1.0));
}

TEST_CASE("evaluate of a field against itself is zero") {
    Rng rng(5);
    NormalField field;
    for (int i = 0; i < 50; ++i)
        field.push_back(Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian()).normalized());
    EvalReport report = evaluate(field, field, {1.0}, true);
    CHECK(report.mean_deg == doctest::Approx(0.0));
    CHECK(report.rmse_deg == doctest::Approx(0.0));
    CHECK(report.pgp.at(1.0) == doctest::Approx(1.0));
    for (double e : report.per_point_errors_deg) CHECK(e == doctest::Approx(0.0));
}

TEST_CASE("evaluate matches a scalar loop oracle and is symmetric") {
    Rng rng(9);
    NormalField pred, gt;
    for (int i = 0; i < 200; ++i) {
        pred.push_back(Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian()).normalized());
        gt.push_back(Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian()).normalized());
    }
    EvalReport report = evaluate(pred, gt, {5, 10, 30, 60}, true);

    double sum = 0, sum_sq = 0;
    int below30 = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        double c = std::clamp(std::abs(pred[i].dot(gt[i])), 0.0, 1.0);
        double e = std::acos(c) * 180.0 / M_PI;
        sum += e;
        sum_sq += e * e;
        if (e < 30.0) ++below30;
        CHECK(report.per_point_errors_deg[i] == doctest::Approx(e).epsilon(1e-12));
    }
    CHECK(report.mean_deg == doctest::Approx(sum / pred.size()).epsilon(1e-12));
    CHECK(report.rmse_deg == doctest::Approx(std::sqrt(sum_sq / pred.size())).epsilon(1e-12));
    CHECK(report.pgp.at(30.0) ==
          doctest::Approx(static_cast<double>(below30) / pred.size()).epsilon(1e-12));
    CHECK(report.rmse_deg * report.rmse_deg ==
          doctest::Approx(sum_sq / pred.size()).epsilon(1e-12));

    // pgp is monotone in alpha
    double prev = 0.0;
    for (const auto& [alpha, frac] : report.pgp) {
        CHECK(frac >= prev);
        prev = frac;
    }

    EvalReport swapped = evaluate(gt, pred, {5, 10, 30, 60});
    CHECK(swapped.mean_deg == doctest::Approx(report.mean_deg));
    CHECK(swapped.rmse_deg == doctest::Approx(report.rmse_deg));
}

TEST_CASE("evaluate rejects mismatched lengths") {
    NormalField a(3, Vec3(0, 0, 1)), b(4, Vec3(0, 0, 1));
    CHECK_THROWS_AS(evaluate(a, b, {5.0}), LengthMismatch);
}

#include <doctest.h>

#include "normalforge/config.hpp"

using namespace normalforge;

TEST_CASE("default config validates and round trips through json") {
    Config config = default_config();
    CHECK_NOTHROW(config.validate());
    std::string text = config_to_json_text(config);
    Config parsed = config_from_json_text(text);
    CHECK(config_to_json_text(parsed) == text);
    CHECK(parsed.mfps.scales == std::vector<int>{50, 100, 150});
    CHECK(parsed.filter.spatial_sigma_fracs == std::vector<double>{0.025, 0.05});
    CHECK(parsed.filter.range_sigmas == std::vector<double>{0.1, 0.2, 0.35, 0.5});
    CHECK(parsed.features.patch_radius_frac == 0.05);
    CHECK(parsed.features.max_pts == 300);
    CHECK(parsed.features.grid_m == 7);
    CHECK(parsed.arch.weight_p == 64);
    CHECK(parsed.arch.weight_p2 == 64);
    CHECK(parsed.arch.lambda_reg == 0.02);
    CHECK(parsed.arch.dropout_keep == 0.3);
    CHECK(parsed.train.lr == 1e-4);
    CHECK(parsed.train.bn_momentum == 0.9);
    CHECK(parsed.denoise.lambda == 0.5);
    CHECK(parsed.denoise.iterations == 20);
    CHECK(parsed.eval_alphas == std::vector<double>{5.0, 10.0});
}

TEST_CASE("partial configs keep defaults for missing keys") {
    Config config = config_from_json_text(R"({"seed": 7, "mfps": {"beta": 0.8}})");
    CHECK(config.seed == 7);
    CHECK(config.mfps.beta == 0.8);
    CHECK(config.mfps.scales == std::vector<int>{50, 100, 150});
    CHECK(config.train.batch == 512);
}

TEST_CASE("unknown keys are rejected with their path") {
    CHECK_THROWS_WITH_AS(config_from_json_text(R"({"mfps": {"betta": 0.8}})"),
                         doctest::Contains("mfps.betta"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"extra_section": {}})"), ConfigError);
}

TEST_CASE("out-of-range values are rejected") {
    CHECK_THROWS_AS(config_from_json_text(R"({"mfps": {"beta": 1.5}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"mfps": {"scales": [100, 50]}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"features": {"grid_m": 4}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"train": {"lr": 0}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"denoise": {"sigma": -1}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"eval": {"alphas": [5, -10]}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"arch": {"connection1": "nope"}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{ not json"), ConfigError);
}

TEST_CASE("connection kinds and loss parse from strings") {
    Config config = config_from_json_text(
        R"({"arch": {"connection1": "rotation", "connection2": "weight", "loss": "l1"}})");
    CHECK(config.arch.connection1 == ConnectionKind::RotationQuaternion);
    CHECK(config.arch.connection2 == ConnectionKind::WeightMatrix);
    CHECK(config.arch.loss == LossKind::L1);
}

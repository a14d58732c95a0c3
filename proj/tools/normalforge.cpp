// Command-line front end: synthetic data, normal estimation, filtering,
// training, refinement, denoising, evaluation and heatmap export.

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "normalforge/config.hpp"
#include "normalforge/denoise.hpp"
#include "normalforge/features.hpp"
#include "normalforge/filtering.hpp"
#include "normalforge/geometry.hpp"
#include "normalforge/io.hpp"
#include "normalforge/metrics.hpp"
#include "normalforge/mfps.hpp"
#include "normalforge/refine.hpp"
#include "normalforge/synth.hpp"

namespace nf = normalforge;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file (defaults when omitted)");
    cmd->add_option("--seed", args.seed, "Seed override")->each([&](const std::string&) {
        args.seed_set = true;
    });
    cmd->add_flag("--quiet", args.quiet, "Suppress the resolved-config log");
}

nf::Config resolve_config(const CommonArgs& args) {
    nf::Config config =
        args.config_path.empty() ? nf::default_config() : nf::load_config(args.config_path);
    if (args.seed_set) config.seed = args.seed;
    config.validate();
    if (!args.quiet)
        std::clog << "resolved config (seed " << config.seed
                  << "):\n" << nf::config_to_json_text(config) << "\n";
    return config;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

nf::NormalField read_normals(const std::string& path, size_t expected) {
    nf::NormalField normals = nf::read_vec3_file(path);
    if (normals.size() != expected)
        throw nf::LengthMismatch("'" + path + "' has " + std::to_string(normals.size()) +
                                 " rows, expected " + std::to_string(expected));
    for (nf::Vec3& n : normals) {
        double len = n.norm();
        if (len < 1e-12) throw nf::ZeroVector("'" + path + "' contains a zero normal");
        n /= len;
    }
    return normals;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"normalforge: point-cloud normal estimation toolkit"};
    app.require_subcommand(1);

    // synth
    CommonArgs synth_args;
    std::string synth_shape, synth_out, synth_gt;
    int synth_count = -1;
    double synth_noise = -1.0, synth_angle = -1.0;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic shape with ground truth");
    add_common(synth, synth_args);
    synth->add_option("--shape", synth_shape, "plane|sphere|cube|cylinder|dihedral");
    synth->add_option("--count", synth_count, "Sample count");
    synth->add_option("--noise", synth_noise, "Gaussian sigma as fraction of the bbox diagonal");
    synth->add_option("--angle", synth_angle, "Dihedral opening angle (degrees)");
    synth->add_option("--out", synth_out, "Points file to write")->required();
    synth->add_option("--gt", synth_gt, "Ground-truth normals file to write")->required();

    // estimate
    CommonArgs est_args;
    std::string est_in, est_out, est_method = "mfps";
    auto* estimate = app.add_subcommand("estimate", "Estimate normals (pca|mfps|simple-mfps)");
    add_common(estimate, est_args);
    estimate->add_option("--in", est_in, "Points file")->required();
    estimate->add_option("--method", est_method, "pca|mfps|simple-mfps");
    estimate->add_option("--out", est_out, "Normals file to write")->required();

    // filter
    CommonArgs filter_args;
    std::string filter_in, filter_normals, filter_out;
    double filter_sigma_s_frac = 0.05, filter_sigma_r = 0.35;
    auto* filter = app.add_subcommand("filter", "One bilateral filtering pass over a normal field");
    add_common(filter, filter_args);
    filter->add_option("--in", filter_in, "Points file")->required();
    filter->add_option("--normals", filter_normals, "Normals file to filter")->required();
    filter->add_option("--sigma-s-frac", filter_sigma_s_frac,
                       "Spatial sigma as fraction of the bbox diagonal");
    filter->add_option("--sigma-r", filter_sigma_r, "Range sigma (unitless)");
    filter->add_option("--out", filter_out, "Filtered normals file")->required();

    // train
    CommonArgs train_args;
    std::string train_in, train_gt, train_init, train_model;
    auto* train = app.add_subcommand("train", "Train a refinement model");
    add_common(train, train_args);
    train->add_option("--in", train_in, "Comma-separated points files")->required();
    train->add_option("--gt", train_gt, "Comma-separated ground-truth normal files")->required();
    train->add_option("--init", train_init,
                      "Comma-separated initial normal files (MFPS when omitted)");
    train->add_option("--model", train_model, "Model file to write")->required();

    // refine
    CommonArgs refine_args;
    std::string refine_in, refine_normals, refine_model_path, refine_out;
    auto* refine = app.add_subcommand("refine", "Refine an initial normal field with a model");
    add_common(refine, refine_args);
    refine->add_option("--in", refine_in, "Points file")->required();
    refine->add_option("--normals", refine_normals,
                       "Initial normals file (MFPS when omitted); any estimator's output works");
    refine->add_option("--model", refine_model_path, "Model file")->required();
    refine->add_option("--out", refine_out, "Refined normals file")->required();

    // denoise
    CommonArgs denoise_args;
    std::string denoise_in, denoise_normals, denoise_out;
    auto* denoise = app.add_subcommand("denoise", "Normal-guided point update");
    add_common(denoise, denoise_args);
    denoise->add_option("--in", denoise_in, "Points file")->required();
    denoise->add_option("--normals", denoise_normals, "Normals file")->required();
    denoise->add_option("--out", denoise_out, "Updated points file")->required();

    // eval
    CommonArgs eval_args;
    std::string eval_in, eval_gt, eval_alphas, eval_out, eval_errors;
    auto* eval = app.add_subcommand("eval", "Angular-error report (mean, rmse, PGP)");
    add_common(eval, eval_args);
    eval->add_option("--in", eval_in, "Predicted normals file")->required();
    eval->add_option("--gt", eval_gt, "Ground-truth normals file")->required();
    eval->add_option("--alphas", eval_alphas, "Comma-separated PGP thresholds, e.g. 5,10");
    eval->add_option("--out", eval_out, "Write the JSON report here as well");
    eval->add_option("--errors-out", eval_errors, "Per-point error file for heatmaps");

    // export-heatmap
    CommonArgs heat_args;
    std::string heat_in, heat_normals, heat_gt, heat_out;
    auto* heatmap = app.add_subcommand("export-heatmap", "PLY with per-vertex error colors");
    add_common(heatmap, heat_args);
    heatmap->add_option("--in", heat_in, "Points file")->required();
    heatmap->add_option("--normals", heat_normals, "Predicted normals file")->required();
    heatmap->add_option("--gt", heat_gt, "Ground-truth normals file")->required();
    heatmap->add_option("--out", heat_out, "PLY file to write")->required();

    // hmp dump
    CommonArgs hmp_args;
    std::string hmp_in, hmp_normals, hmp_out;
    int hmp_point = 0;
    auto* hmp = app.add_subcommand("dump-hmp", "Write one point's height-map grids as CSV");
    add_common(hmp, hmp_args);
    hmp->add_option("--in", hmp_in, "Points file")->required();
    hmp->add_option("--normals", hmp_normals, "Initial normals file")->required();
    hmp->add_option("--point", hmp_point, "Point index");
    hmp->add_option("--out", hmp_out, "CSV file to write")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            nf::Config config = resolve_config(synth_args);
            nf::SynthShape shape = config.synth;
            shape.seed = config.seed;
            if (!synth_shape.empty()) shape.kind = nf::shape_kind_from_string(synth_shape);
            if (synth_count > 0) shape.count = synth_count;
            if (synth_noise >= 0.0) shape.noise_frac = synth_noise;
            if (synth_angle > 0.0) shape.dihedral_angle_deg = synth_angle;
            nf::PointCloud cloud = nf::synth_generate(shape);
            nf::write_vec3_file(synth_out, cloud.points);
            nf::write_vec3_file(synth_gt, cloud.gt_normals);
        } else if (*estimate) {
            nf::Config config = resolve_config(est_args);
            nf::PointCloud cloud = nf::read_cloud(est_in);
            nf::validate_cloud(cloud);
            nf::NormalField normals;
            if (est_method == "pca") {
                nf::SpatialIndex index(cloud);
                int k = std::min(config.mfps.classify_k, cloud.size());
                normals.resize(cloud.points.size());
                for (int i = 0; i < cloud.size(); ++i)
                    normals[i] = nf::pca_normal(cloud, index.knn(cloud.points[i], k));
            } else if (est_method == "mfps") {
                normals = nf::mfps_estimate(cloud, config.mfps, config.seed,
                                            est_args.quiet ? nullptr : &std::clog);
            } else if (est_method == "simple-mfps") {
                normals = nf::simple_mfps_estimate(cloud, config.mfps, config.seed,
                                                   est_args.quiet ? nullptr : &std::clog);
            } else {
                throw nf::ConfigError("unknown method '" + est_method + "'");
            }
            nf::write_vec3_file(est_out, normals);
        } else if (*filter) {
            nf::Config config = resolve_config(filter_args);
            (void)config;
            nf::PointCloud cloud = nf::read_cloud(filter_in);
            nf::validate_cloud(cloud);
            nf::NormalField normals = read_normals(filter_normals, cloud.points.size());
            nf::SpatialIndex index(cloud);
            double sigma_s = filter_sigma_s_frac * nf::bbox_diagonal(cloud);
            nf::NormalField filtered =
                nf::bilateral_filter(cloud, index, normals, sigma_s, filter_sigma_r);
            nf::write_vec3_file(filter_out, filtered);
        } else if (*train) {
            nf::Config config = resolve_config(train_args);
            std::vector<std::string> point_files = split_list(train_in);
            std::vector<std::string> gt_files = split_list(train_gt);
            std::vector<std::string> init_files = split_list(train_init);
            if (point_files.size() != gt_files.size() || point_files.empty())
                throw nf::ConfigError("train: --in and --gt need matching non-empty lists");
            if (!init_files.empty() && init_files.size() != point_files.size())
                throw nf::ConfigError("train: --init list must match --in");

            std::vector<nf::TrainSample> samples;
            for (size_t f = 0; f < point_files.size(); ++f) {
                nf::PointCloud cloud = nf::read_cloud(point_files[f], gt_files[f]);
                nf::validate_cloud(cloud);
                nf::NormalField initial;
                if (!init_files.empty()) {
                    initial = read_normals(init_files[f], cloud.points.size());
                } else {
                    initial = nf::mfps_estimate(cloud, config.mfps, config.seed,
                                                train_args.quiet ? nullptr : &std::clog);
                }
                nf::SpatialIndex index(cloud);
                nf::FilterParams filter_params = nf::FilterParams::from_fracs(
                    config.filter.spatial_sigma_fracs, config.filter.range_sigmas,
                    config.filter.include_unfiltered, nf::bbox_diagonal(cloud));
                nf::BranchInputs inputs = nf::build_branch_inputs(
                    cloud, index, initial, filter_params, config.features, config.seed);
                std::vector<nf::TrainSample> cloud_samples = nf::make_train_samples(inputs, cloud);
                samples.insert(samples.end(), std::make_move_iterator(cloud_samples.begin()),
                               std::make_move_iterator(cloud_samples.end()));
            }
            nf::TrainResult result = nf::train_refine_model(
                config.model_meta(), samples, config.train_hyper(),
                train_args.quiet ? nullptr : &std::clog);
            nf::save_model(result.model, train_model);
            if (!train_args.quiet && !result.epoch_loss.empty())
                std::clog << "train: first epoch loss " << result.epoch_loss.front()
                          << ", final " << result.epoch_loss.back() << "\n";
        } else if (*refine) {
            nf::Config config = resolve_config(refine_args);
            nf::PointCloud cloud = nf::read_cloud(refine_in);
            nf::validate_cloud(cloud);
            nf::RefineModel model = nf::load_model(refine_model_path);
            nf::NormalField initial;
            if (!refine_normals.empty()) {
                initial = read_normals(refine_normals, cloud.points.size());
            } else {
                initial = nf::mfps_estimate(cloud, config.mfps, config.seed,
                                            refine_args.quiet ? nullptr : &std::clog);
            }
            nf::NormalField refined = nf::refine_field(cloud, initial, model);
            nf::write_vec3_file(refine_out, refined);
        } else if (*denoise) {
            nf::Config config = resolve_config(denoise_args);
            nf::PointCloud cloud = nf::read_cloud(denoise_in);
            nf::validate_cloud(cloud);
            nf::NormalField normals = read_normals(denoise_normals, cloud.points.size());
            nf::PointCloud updated = nf::point_update(cloud, normals, config.denoise);
            nf::write_vec3_file(denoise_out, updated.points);
        } else if (*eval) {
            nf::Config config = resolve_config(eval_args);
            nf::NormalField pred = nf::read_vec3_file(eval_in);
            for (nf::Vec3& n : pred) {
                double len = n.norm();
                if (len < 1e-12) throw nf::ZeroVector("'" + eval_in + "' contains a zero normal");
                n /= len;
            }
            nf::NormalField gt = read_normals(eval_gt, pred.size());
            std::vector<double> alphas = config.eval_alphas;
            if (!eval_alphas.empty()) {
                alphas.clear();
                for (const std::string& a : split_list(eval_alphas)) alphas.push_back(std::stod(a));
            }
            nf::EvalReport report = nf::evaluate(pred, gt, alphas, !eval_errors.empty());
            json out{{"mean_deg", report.mean_deg}, {"rmse_deg", report.rmse_deg}};
            json pgp = json::object();
            for (const auto& [alpha, frac] : report.pgp) {
                char key[32];
                std::snprintf(key, sizeof(key), "%g", alpha);
                pgp[key] = frac;
            }
            out["pgp"] = pgp;
            std::cout << out.dump(2) << "\n";
            if (!eval_out.empty()) {
                std::ofstream f(eval_out);
                f << out.dump(2) << "\n";
            }
            if (!eval_errors.empty()) {
                std::ofstream f(eval_errors);
                for (double e : report.per_point_errors_deg) {
                    char buf[32];
                    std::snprintf(buf, sizeof(buf), "%.9g\n", e);
                    f << buf;
                }
            }
        } else if (*heatmap) {
            resolve_config(heat_args);
            nf::PointCloud cloud = nf::read_cloud(heat_in);
            nf::NormalField pred = read_normals(heat_normals, cloud.points.size());
            nf::NormalField gt = read_normals(heat_gt, cloud.points.size());
            std::vector<double> errors(pred.size());
            for (size_t i = 0; i < pred.size(); ++i)
                errors[i] = nf::angular_error_deg(pred[i], gt[i]);
            nf::write_ply_heatmap(heat_out, cloud, pred, errors);
        } else if (*hmp) {
            nf::Config config = resolve_config(hmp_args);
            nf::PointCloud cloud = nf::read_cloud(hmp_in);
            nf::validate_cloud(cloud);
            nf::NormalField initial = read_normals(hmp_normals, cloud.points.size());
            if (hmp_point < 0 || hmp_point >= cloud.size())
                throw nf::ConfigError("dump-hmp: point index out of range");
            nf::SpatialIndex index(cloud);
            nf::FilterParams filter_params = nf::FilterParams::from_fracs(
                config.filter.spatial_sigma_fracs, config.filter.range_sigmas,
                config.filter.include_unfiltered, nf::bbox_diagonal(cloud));
            nf::BranchInputs inputs = nf::build_branch_inputs(cloud, index, initial, filter_params,
                                                              config.features, config.seed);
            std::ofstream f(hmp_out);
            for (int b = 0; b < inputs.branches; ++b)
                f << nf::hmp_csv(inputs.hmp_at(hmp_point, b));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

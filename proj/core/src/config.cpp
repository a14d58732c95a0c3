#include "normalforge/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace normalforge {

using nlohmann::json;

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (k_c < 1) throw ConfigError("train: k_c must be >= 1");
    if (bn_momentum < 0.0 || bn_momentum >= 1.0)
        throw ConfigError("train: bn_momentum must be in [0, 1)");
    if (kmeans_iters < 1) throw ConfigError("train: kmeans_iters must be >= 1");
}

void FilterConfig::validate() const {
    for (double f : spatial_sigma_fracs)
        if (f <= 0.0) throw ConfigError("filter: spatial_sigma_fracs must be positive");
    for (double s : range_sigmas)
        if (s <= 0.0) throw ConfigError("filter: range_sigmas must be positive");
    if (spatial_sigma_fracs.empty() && !include_unfiltered)
        throw ConfigError("filter: at least one branch required");
}

void Config::validate() const {
    mfps.validate();
    filter.validate();
    features.validate();
    arch.validate();
    train.validate();
    denoise.validate();
    if (synth.count < 4) throw ConfigError("synth: count must be >= 4");
    if (synth.noise_frac < 0.0) throw ConfigError("synth: noise_frac must be >= 0");
    for (double a : eval_alphas)
        if (a <= 0.0) throw ConfigError("eval: alphas must be positive");
}

namespace {

json to_json(const Config& c) {
    return json{
        {"seed", c.seed},
        {"synth",
         {{"shape", to_string(c.synth.kind)},
          {"count", c.synth.count},
          {"noise_frac", c.synth.noise_frac},
          {"dihedral_angle_deg", c.synth.dihedral_angle_deg}}},
        {"mfps",
         {{"scales", c.mfps.scales},
          {"beta", c.mfps.beta},
          {"sigma", c.mfps.sigma},
          {"sigma_scale", c.mfps.sigma_scale},
          {"plane_samples", c.mfps.plane_samples},
          {"w_t_deg", c.mfps.w_t_deg},
          {"orient_k", c.mfps.orient_k},
          {"classify_k", c.mfps.classify_k},
          {"classify_tau", c.mfps.classify_tau}}},
        {"filter",
         {{"spatial_sigma_fracs", c.filter.spatial_sigma_fracs},
          {"range_sigmas", c.filter.range_sigmas},
          {"include_unfiltered", c.filter.include_unfiltered}}},
        {"features",
         {{"patch_radius_frac", c.features.patch_radius_frac},
          {"max_pts", c.features.max_pts},
          {"grid_m", c.features.grid_m},
          {"ball_r_spacings", c.features.ball_r_spacings},
          {"sigma_d_spacings", c.features.sigma_d_spacings}}},
        {"arch",
         {{"point_mlp", c.arch.point_mlp},
          {"point_fc", c.arch.point_fc},
          {"hmp_convs", c.arch.hmp_convs},
          {"hmp_fc", c.arch.hmp_fc},
          {"lift_fc", c.arch.lift_fc},
          {"head_fc", c.arch.head_fc},
          {"weight_p", c.arch.weight_p},
          {"weight_p2", c.arch.weight_p2},
          {"dropout_keep", c.arch.dropout_keep},
          {"connection1", to_string(c.arch.connection1)},
          {"connection2", to_string(c.arch.connection2)},
          {"lambda_reg", c.arch.lambda_reg},
          {"loss", c.arch.loss == LossKind::L2 ? "l2" : "l1"}}},
        {"train",
         {{"lr", c.train.lr},
          {"batch", c.train.batch},
          {"epochs", c.train.epochs},
          {"k_c", c.train.k_c},
          {"bn_momentum", c.train.bn_momentum},
          {"kmeans_iters", c.train.kmeans_iters}}},
        {"denoise",
         {{"lambda", c.denoise.lambda},
          {"iterations", c.denoise.iterations},
          {"sigma", c.denoise.sigma},
          {"ball_radius_frac", c.denoise.ball_radius_frac},
          {"step_gamma", c.denoise.step_gamma}}},
        {"eval", {{"alphas", c.eval_alphas}}},
    };
}

void reject_unknown_keys(const json& given, const json& allowed, const std::string& path) {
    if (!given.is_object()) return;
    for (const auto& [key, value] : given.items()) {
        if (!allowed.contains(key))
            throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) +
                              "'");
        if (value.is_object()) reject_unknown_keys(value, allowed.at(key), path.empty() ? key : path + "." + key);
    }
}

Config from_json(const json& j) {
    Config c;
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& s = j.at("synth");
    c.synth.kind = shape_kind_from_string(s.at("shape").get<std::string>());
    c.synth.count = s.at("count").get<int>();
    c.synth.noise_frac = s.at("noise_frac").get<double>();
    c.synth.dihedral_angle_deg = s.at("dihedral_angle_deg").get<double>();
    const json& m = j.at("mfps");
    c.mfps.scales = m.at("scales").get<std::vector<int>>();
    c.mfps.beta = m.at("beta").get<double>();
    c.mfps.sigma = m.at("sigma").get<double>();
    c.mfps.sigma_scale = m.at("sigma_scale").get<double>();
    c.mfps.plane_samples = m.at("plane_samples").get<int>();
    c.mfps.w_t_deg = m.at("w_t_deg").get<double>();
    c.mfps.orient_k = m.at("orient_k").get<int>();
    c.mfps.classify_k = m.at("classify_k").get<int>();
    c.mfps.classify_tau = m.at("classify_tau").get<double>();
    const json& f = j.at("filter");
    c.filter.spatial_sigma_fracs = f.at("spatial_sigma_fracs").get<std::vector<double>>();
    c.filter.range_sigmas = f.at("range_sigmas").get<std::vector<double>>();
    c.filter.include_unfiltered = f.at("include_unfiltered").get<bool>();
    const json& feat = j.at("features");
    c.features.patch_radius_frac = feat.at("patch_radius_frac").get<double>();
    c.features.max_pts = feat.at("max_pts").get<int>();
    c.features.grid_m = feat.at("grid_m").get<int>();
    c.features.ball_r_spacings = feat.at("ball_r_spacings").get<double>();
    c.features.sigma_d_spacings = feat.at("sigma_d_spacings").get<double>();
    const json& a = j.at("arch");
    c.arch.point_mlp = a.at("point_mlp").get<std::vector<int>>();
    c.arch.point_fc = a.at("point_fc").get<std::vector<int>>();
    c.arch.hmp_convs = a.at("hmp_convs").get<std::vector<int>>();
    c.arch.hmp_fc = a.at("hmp_fc").get<std::vector<int>>();
    c.arch.lift_fc = a.at("lift_fc").get<std::vector<int>>();
    c.arch.head_fc = a.at("head_fc").get<std::vector<int>>();
    c.arch.weight_p = a.at("weight_p").get<int>();
    c.arch.weight_p2 = a.at("weight_p2").get<int>();
    c.arch.dropout_keep = a.at("dropout_keep").get<double>();
    c.arch.connection1 = connection_kind_from_string(a.at("connection1").get<std::string>());
    c.arch.connection2 = connection_kind_from_string(a.at("connection2").get<std::string>());
    c.arch.lambda_reg = a.at("lambda_reg").get<double>();
    c.arch.loss = a.at("loss").get<std::string>() == "l1" ? LossKind::L1 : LossKind::L2;
    const json& t = j.at("train");
    c.train.lr = t.at("lr").get<double>();
    c.train.batch = t.at("batch").get<int>();
    c.train.epochs = t.at("epochs").get<int>();
    c.train.k_c = t.at("k_c").get<int>();
    c.train.bn_momentum = t.at("bn_momentum").get<double>();
    c.train.kmeans_iters = t.at("kmeans_iters").get<int>();
    const json& d = j.at("denoise");
    c.denoise.lambda = d.at("lambda").get<double>();
    c.denoise.iterations = d.at("iterations").get<int>();
    c.denoise.sigma = d.at("sigma").get<double>();
    c.denoise.ball_radius_frac = d.at("ball_radius_frac").get<double>();
    c.denoise.step_gamma = d.at("step_gamma").get<double>();
    c.eval_alphas = j.at("eval").at("alphas").get<std::vector<double>>();
    return c;
}

}  // namespace

Config default_config() { return Config{}; }

Config config_from_json_text(const std::string& text) {
    try {
        json given = json::parse(text);
        json defaults = to_json(Config{});
        reject_unknown_keys(given, defaults, "");
        defaults.merge_patch(given);
        Config config = from_json(defaults);
        config.validate();
        return config;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return config_from_json_text(buffer.str());
}

std::string config_to_json_text(const Config& config) { return to_json(config).dump(2); }

}  // namespace normalforge

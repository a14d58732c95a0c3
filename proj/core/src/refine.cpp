#include "normalforge/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "normalforge/parallel.hpp"

namespace normalforge {

using nn::Graph;
using nn::LayerSpec;
using nn::Mode;
using nn::ParamStore;
using nn::Tensor;

ConnectionKind connection_kind_from_string(const std::string& s) {
    if (s == "rotation") return ConnectionKind::RotationQuaternion;
    if (s == "transform") return ConnectionKind::TransformMatrix;
    if (s == "weight") return ConnectionKind::WeightMatrix;
    throw ConfigError("unknown connection kind '" + s + "'");
}

std::string to_string(ConnectionKind kind) {
    switch (kind) {
        case ConnectionKind::RotationQuaternion: return "rotation";
        case ConnectionKind::TransformMatrix: return "transform";
        case ConnectionKind::WeightMatrix: return "weight";
    }
    return "?";
}

int ArchParams::d1() const {
    switch (connection1) {
        case ConnectionKind::RotationQuaternion: return 4;
        case ConnectionKind::TransformMatrix: return 9;
        case ConnectionKind::WeightMatrix: return weight_p * 3;
    }
    return 0;
}

int ArchParams::feat1_dim() const {
    return connection1 == ConnectionKind::WeightMatrix ? weight_p : 3;
}

int ArchParams::d2() const {
    switch (connection2) {
        case ConnectionKind::RotationQuaternion: return 4;
        case ConnectionKind::TransformMatrix: return 9;
        case ConnectionKind::WeightMatrix: return weight_p2 * feat1_dim();
    }
    return 0;
}

int ArchParams::feat2_dim() const {
    return connection2 == ConnectionKind::WeightMatrix ? weight_p2 : 3;
}

void ArchParams::validate() const {
    if (point_mlp.empty() || point_fc.empty() || hmp_fc.empty() || lift_fc.empty() ||
        head_fc.empty())
        throw ConfigError("arch: layer width lists must be non-empty");
    for (int w : point_mlp)
        if (w < 1) throw ConfigError("arch: bad point_mlp width");
    bool any_conv = false;
    for (int c : hmp_convs) {
        if (c < 0) throw ConfigError("arch: bad hmp_convs entry");
        if (c > 0) any_conv = true;
    }
    if (!any_conv) throw ConfigError("arch: hmp_convs needs at least one conv layer");
    if (weight_p < 1 || weight_p2 < 1) throw ConfigError("arch: weight matrix sizes must be >= 1");
    if (dropout_keep <= 0.0 || dropout_keep > 1.0)
        throw ConfigError("arch: dropout_keep must be in (0, 1]");
    if (lambda_reg < 0.0) throw ConfigError("arch: lambda_reg must be >= 0");
    if (connection2 != ConnectionKind::WeightMatrix && feat1_dim() != 3)
        throw ConfigError("arch: refinement-2 rotation/transform connections need a 3-dim feature");
}

std::vector<LayerSpec> point_module_layers(const ArchParams& arch) {
    std::vector<LayerSpec> layers;
    int in = 3;
    for (size_t i = 0; i < arch.point_mlp.size(); ++i) {
        std::string name = "point.mlp" + std::to_string(i);
        layers.push_back(nn::mlp_layer(name, in, arch.point_mlp[i]));
        layers.push_back(nn::bn_layer(name + ".bn", arch.point_mlp[i]));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        in = arch.point_mlp[i];
    }
    layers.push_back({LayerSpec::Kind::MaxOverSet, 0, 0, 1.0, {}});
    for (size_t i = 0; i < arch.point_fc.size(); ++i) {
        std::string name = "point.fc" + std::to_string(i);
        layers.push_back(nn::fc_layer(name, in, arch.point_fc[i]));
        layers.push_back(nn::bn_layer(name + ".bn", arch.point_fc[i]));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        layers.push_back({LayerSpec::Kind::Dropout, 0, 0, arch.dropout_keep, {}});
        in = arch.point_fc[i];
    }
    layers.push_back(nn::fc_layer("point.out", in, arch.d1()));
    return layers;
}

std::vector<LayerSpec> hmp_module_layers(const ArchParams& arch, int branches, int grid_m) {
    std::vector<LayerSpec> layers;
    int channels = branches;
    int conv_idx = 0;
    for (int c : arch.hmp_convs) {
        if (c == 0) {
            layers.push_back({LayerSpec::Kind::MaxPool3x3, 0, 0, 1.0, {}});
            continue;
        }
        layers.push_back(nn::conv_layer("hmp.conv" + std::to_string(conv_idx++), channels, c));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        channels = c;
    }
    layers.push_back({LayerSpec::Kind::Flatten, 0, 0, 1.0, {}});
    int in = channels * grid_m * grid_m;
    for (size_t i = 0; i < arch.hmp_fc.size(); ++i) {
        std::string name = "hmp.fc" + std::to_string(i);
        layers.push_back(nn::fc_layer(name, in, arch.hmp_fc[i]));
        layers.push_back(nn::bn_layer(name + ".bn", arch.hmp_fc[i]));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        layers.push_back({LayerSpec::Kind::Dropout, 0, 0, arch.dropout_keep, {}});
        in = arch.hmp_fc[i];
    }
    layers.push_back(nn::fc_layer("hmp.out", in, arch.d2()));
    return layers;
}

std::vector<LayerSpec> lift_layers(const ArchParams& arch, int branch) {
    std::vector<LayerSpec> layers;
    int in = 3;
    for (size_t i = 0; i < arch.lift_fc.size(); ++i) {
        std::string name = "lift" + std::to_string(branch) + ".fc" + std::to_string(i);
        layers.push_back(nn::fc_layer(name, in, arch.lift_fc[i]));
        layers.push_back(nn::bn_layer(name + ".bn", arch.lift_fc[i]));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        in = arch.lift_fc[i];
    }
    return layers;
}

std::vector<LayerSpec> head_layers(const ArchParams& arch, int branches) {
    std::vector<LayerSpec> layers;
    int in = branches * arch.branch_dim();
    for (size_t i = 0; i < arch.head_fc.size(); ++i) {
        std::string name = "head.fc" + std::to_string(i);
        layers.push_back(nn::fc_layer(name, in, arch.head_fc[i]));
        layers.push_back(nn::bn_layer(name + ".bn", arch.head_fc[i]));
        layers.push_back({LayerSpec::Kind::Relu, 0, 0, 1.0, {}});
        layers.push_back({LayerSpec::Kind::Dropout, 0, 0, arch.dropout_keep, {}});
        in = arch.head_fc[i];
    }
    layers.push_back(nn::fc_layer("head.out", in, 3));
    return layers;
}

void init_net_params(const ArchParams& arch, int branches, int grid_m, ParamStore& store,
                     Rng rng) {
    nn::init_stack_params(point_module_layers(arch), store, rng);
    nn::init_stack_params(hmp_module_layers(arch, branches, grid_m), store, rng);
    for (int b = 0; b < branches; ++b) nn::init_stack_params(lift_layers(arch, b), store, rng);
    nn::init_stack_params(head_layers(arch, branches), store, rng);
}

std::vector<TrainSample> make_train_samples(const BranchInputs& inputs, const PointCloud& cloud) {
    if (!cloud.has_gt()) throw InvalidCloud("make_train_samples: cloud has no ground truth");
    const int n = static_cast<int>(inputs.patches.size());
    const int x = inputs.branches;
    std::vector<TrainSample> samples(n);
    for (int i = 0; i < n; ++i) {
        TrainSample& s = samples[i];
        s.patch = inputs.patches[i];
        s.hmps.assign(inputs.hmps.begin() + static_cast<size_t>(i) * x,
                      inputs.hmps.begin() + static_cast<size_t>(i + 1) * x);
        auto row = inputs.normals_row(i);
        s.rotated_normals.assign(row.begin(), row.end());
        Vec3 gt = inputs.rotations[i].transpose() * cloud.gt_normals[i];
        if (gt.z() < 0.0) gt = -gt;
        s.gt_rotated = gt;
    }
    return samples;
}

std::vector<double> cluster_feature(std::span<const Vec3> rotated_normals) {
    std::vector<double> feature;
    feature.reserve(rotated_normals.size() * 3);
    for (const Vec3& n : rotated_normals) {
        feature.push_back(n.x());
        feature.push_back(n.y());
        feature.push_back(n.z());
    }
    return feature;
}

NetBatch make_batch(std::span<const TrainSample* const> samples, int branches, int max_pts,
                    int grid_m) {
    const int b = static_cast<int>(samples.size());
    NetBatch batch;
    batch.count = b;
    batch.patches = Tensor({b, max_pts, 3});
    batch.hmps = Tensor({b, branches, grid_m, grid_m});
    batch.normals = Tensor({b, branches, 3});
    const int grid_sz = grid_m * grid_m;
    for (int s = 0; s < b; ++s) {
        const TrainSample& sample = *samples[s];
        for (int p = 0; p < max_pts; ++p)
            for (int k = 0; k < 3; ++k)
                batch.patches.data[(static_cast<size_t>(s) * max_pts + p) * 3 + k] =
                    sample.patch.coords[p][k];
        for (int x = 0; x < branches; ++x) {
            std::copy(sample.hmps[x].values.begin(), sample.hmps[x].values.end(),
                      batch.hmps.data.begin() + (static_cast<size_t>(s) * branches + x) * grid_sz);
            for (int k = 0; k < 3; ++k)
                batch.normals.data[(static_cast<size_t>(s) * branches + x) * 3 + k] =
                    sample.rotated_normals[x][k];
        }
    }
    return batch;
}

std::vector<double> connection_apply(ConnectionKind kind, std::span<const double> t_raw,
                                     std::span<const double> v) {
    Graph g;
    Tensor t({1, static_cast<int>(t_raw.size())});
    std::copy(t_raw.begin(), t_raw.end(), t.data.begin());
    Tensor vv({1, static_cast<int>(v.size())});
    std::copy(v.begin(), v.end(), vv.data.begin());
    int out = connection_node(g, kind, g.constant(std::move(t)), g.constant(std::move(vv)));
    return g.value(out).data;
}

int connection_node(Graph& g, ConnectionKind kind, int t, int v) {
    const Tensor& tv = g.value(t);
    const Tensor& vv = g.value(v);
    const int b = tv.dim(0);
    const int d = tv.dim(1);
    const int q = vv.dim(1);
    switch (kind) {
        case ConnectionKind::RotationQuaternion:
            if (d != 4 || q != 3)
                throw ShapeMismatch("rotation connection needs d=4, q=3");
            return nn::quat_rotate(g, t, v);
        case ConnectionKind::TransformMatrix:
            if (d != 9 || q != 3)
                throw ShapeMismatch("transform connection needs d=9, q=3");
            return nn::bmm_vec(g, nn::reshape(g, t, {b, 3, 3}), v);
        case ConnectionKind::WeightMatrix: {
            if (d % q != 0)
                throw ShapeMismatch("weight connection: d=" + std::to_string(d) +
                                    " not divisible by q=" + std::to_string(q));
            return nn::bmm_vec(g, nn::reshape(g, t, {b, d / q, q}), v);
        }
    }
    throw ShapeMismatch("unknown connection kind");
}

int refine_forward(Graph& g, const RefineModel& model, ParamStore& net,
                   std::map<std::string, int>& param_nodes, const NetBatch& batch, Mode mode,
                   Rng& rng, std::vector<nn::BnPending>* bn_pending) {
    const ArchParams& arch = model.arch;
    const int x = model.branches();

    int patches = g.constant(batch.patches);
    int hmps = g.constant(batch.hmps);
    int normals = g.constant(batch.normals);

    int t1 = run_stack(g, point_module_layers(arch), net, param_nodes, patches, mode, rng,
                       bn_pending);
    int t2 = run_stack(g, hmp_module_layers(arch, x, model.features.grid_m), net, param_nodes,
                       hmps, mode, rng, bn_pending);

    std::vector<int> branch_feats;
    branch_feats.reserve(x);
    for (int b = 0; b < x; ++b) {
        int n_b = nn::select_axis1(g, normals, b);
        int feat1 = connection_node(g, arch.connection1, t1, n_b);
        int feat2 = connection_node(g, arch.connection2, t2, feat1);
        int lifted = run_stack(g, lift_layers(arch, b), net, param_nodes, n_b, mode, rng,
                               bn_pending);
        std::vector<int> parts{feat1, feat2, lifted};
        branch_feats.push_back(nn::concat_features(g, parts));
    }
    int all = nn::concat_features(g, branch_feats);
    return run_stack(g, head_layers(arch, x), net, param_nodes, all, mode, rng, bn_pending);
}

int refine_loss(Graph& g, int pred_raw, const Tensor& gt,
                const std::map<std::string, int>& param_nodes, const ParamStore& net,
                double lambda, LossKind kind) {
    const int b = g.value(pred_raw).dim(0);
    int unit = nn::normalize_rows(g, pred_raw);
    int diff = nn::sub(g, unit, g.constant(gt));
    int data = kind == LossKind::L2 ? nn::sum_sq(g, diff) : nn::sum_abs(g, diff);
    int loss = nn::scale(g, data, 1.0 / b);
    if (lambda > 0.0) {
        std::vector<int> regs;
        for (const auto& [name, node] : param_nodes)
            if (net.at(name).is_weight) regs.push_back(nn::sum_sq(g, node));
        if (!regs.empty())
            loss = nn::add(g, loss, nn::scale(g, nn::add_all(g, regs), lambda));
    }
    return loss;
}

double loss_value(const Vec3& pred_raw, const Vec3& gt, double weight_sq_sum, double lambda,
                  LossKind kind) {
    double n = pred_raw.norm();
    if (n < 1e-12) throw ZeroVector("loss: zero prediction vector");
    Vec3 diff = pred_raw / n - gt;
    double data = kind == LossKind::L2 ? diff.squaredNorm() : diff.cwiseAbs().sum();
    return data + lambda * weight_sq_sum;
}

namespace {

TrainSample bundle_sample(const LocalPatch& patch, std::span<const HmpGrid> hmps,
                          std::span<const Vec3> rotated_normals) {
    TrainSample s;
    s.patch = patch;
    s.hmps.assign(hmps.begin(), hmps.end());
    s.rotated_normals.assign(rotated_normals.begin(), rotated_normals.end());
    return s;
}

}  // namespace

Tensor point_module_forward(const LocalPatch& patch, const ArchParams& arch, ParamStore& net,
                            Mode mode, std::uint64_t dropout_seed) {
    Tensor x({1, static_cast<int>(patch.coords.size()), 3});
    for (size_t p = 0; p < patch.coords.size(); ++p)
        for (int k = 0; k < 3; ++k) x.data[p * 3 + k] = patch.coords[p][k];
    return nn::forward(point_module_layers(arch), net, x, mode, Rng(dropout_seed)).output;
}

Tensor hmp_module_forward(std::span<const HmpGrid> hmps, const ArchParams& arch, ParamStore& net,
                          Mode mode, std::uint64_t dropout_seed) {
    const int x = static_cast<int>(hmps.size());
    const int m = hmps[0].m;
    Tensor input({1, x, m, m});
    for (int b = 0; b < x; ++b)
        std::copy(hmps[b].values.begin(), hmps[b].values.end(),
                  input.data.begin() + static_cast<size_t>(b) * m * m);
    return nn::forward(hmp_module_layers(arch, x, m), net, input, mode, Rng(dropout_seed)).output;
}

Tensor branch_forward(const RefineModel& model, ParamStore& net, const LocalPatch& patch,
                      std::span<const HmpGrid> hmps, std::span<const Vec3> rotated_normals,
                      int branch, Mode mode) {
    const ArchParams& arch = model.arch;
    TrainSample sample = bundle_sample(patch, hmps, rotated_normals);
    const TrainSample* ptr = &sample;
    NetBatch batch = make_batch({&ptr, 1}, model.branches(),
                                static_cast<int>(patch.coords.size()), hmps[0].m);

    Graph g;
    std::map<std::string, int> nodes;
    Rng rng(0);
    int patches = g.constant(batch.patches);
    int hmp_in = g.constant(batch.hmps);
    int normals = g.constant(batch.normals);
    int t1 = run_stack(g, point_module_layers(arch), net, nodes, patches, mode, rng, nullptr);
    int t2 = run_stack(g, hmp_module_layers(arch, model.branches(), model.features.grid_m), net,
                       nodes, hmp_in, mode, rng, nullptr);
    int n_b = nn::select_axis1(g, normals, branch);
    int feat1 = connection_node(g, arch.connection1, t1, n_b);
    int feat2 = connection_node(g, arch.connection2, t2, feat1);
    int lifted = run_stack(g, lift_layers(arch, branch), net, nodes, n_b, mode, rng, nullptr);
    std::vector<int> parts{feat1, feat2, lifted};
    return g.value(nn::concat_features(g, parts));
}

Vec3 predict_normal(const RefineModel& model, const LocalPatch& patch,
                    std::span<const HmpGrid> hmps, std::span<const Vec3> rotated_normals,
                    const Mat3& rotation) {
    std::vector<double> feature = cluster_feature(rotated_normals);
    int c = assign_cluster(model.cluster, feature);

    TrainSample sample = bundle_sample(patch, hmps, rotated_normals);
    const TrainSample* ptr = &sample;
    NetBatch batch = make_batch({&ptr, 1}, model.branches(),
                                static_cast<int>(patch.coords.size()), hmps[0].m);

    Graph g;
    std::map<std::string, int> nodes;
    Rng rng(0);
    // nets are stored per cluster; prediction never touches dropout or batch stats
    ParamStore& net = const_cast<ParamStore&>(model.nets[c]);
    int out = refine_forward(g, model, net, nodes, batch, Mode::Eval, rng, nullptr);
    int unit = nn::normalize_rows(g, out);
    const Tensor& y = g.value(unit);
    Vec3 canonical(y.data[0], y.data[1], y.data[2]);
    return rotation * canonical;
}

TrainResult train_refine_model(RefineModel meta, const std::vector<TrainSample>& samples,
                               const TrainHyper& hyper, std::ostream* log) {
    meta.arch.validate();
    meta.features.validate();
    if (static_cast<int>(samples.size()) < hyper.k_c)
        throw ConfigError("train: need at least k_c samples");
    const int x = meta.branches();
    for (const TrainSample& s : samples)
        if (static_cast<int>(s.rotated_normals.size()) != x ||
            static_cast<int>(s.hmps.size()) != x)
            throw DimensionMismatch("train: sample branch count does not match model");

    Rng root(Rng::mix(hyper.seed, 0x5245464e));
    meta.seed = hyper.seed;

    // cluster over concatenated canonical normals
    std::vector<std::vector<double>> features;
    features.reserve(samples.size());
    for (const TrainSample& s : samples) features.push_back(cluster_feature(s.rotated_normals));
    Rng kmeans_rng = root.derive(1);
    meta.cluster = kmeans_cluster(features, hyper.k_c, kmeans_rng, hyper.kmeans_iters);

    const int max_pts = static_cast<int>(samples[0].patch.coords.size());
    const int grid_m = samples[0].hmps[0].m;

    TrainResult result;
    result.cluster_epoch_loss.assign(hyper.k_c, {});
    meta.nets.resize(hyper.k_c);

    std::vector<std::vector<int>> members(hyper.k_c);
    for (size_t i = 0; i < samples.size(); ++i)
        members[meta.cluster.assignments[i]].push_back(static_cast<int>(i));

    for (int c = 0; c < hyper.k_c; ++c) {
        ParamStore& net = meta.nets[c];
        init_net_params(meta.arch, x, grid_m, net, root.derive(100 + c));
        if (members[c].empty()) {
            if (log) *log << "train: cluster " << c << " is empty, keeping initialization\n";
            result.cluster_epoch_loss[c].assign(hyper.epochs, 0.0);
            continue;
        }
        if (log)
            *log << "train: cluster " << c << " with " << members[c].size() << " samples\n";

        for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
            std::vector<int> order = members[c];
            Rng shuffle_rng = root.derive(Rng::mix(1000 + c, epoch));
            for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
                std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

            double loss_sum = 0.0;
            int loss_count = 0;
            for (size_t start = 0; start < order.size(); start += hyper.batch) {
                size_t end = std::min(order.size(), start + hyper.batch);
                std::vector<const TrainSample*> ptrs;
                ptrs.reserve(end - start);
                for (size_t i = start; i < end; ++i) ptrs.push_back(&samples[order[i]]);
                NetBatch batch = make_batch(ptrs, x, max_pts, grid_m);
                Tensor gt({batch.count, 3});
                for (int i = 0; i < batch.count; ++i)
                    for (int k = 0; k < 3; ++k)
                        gt.data[static_cast<size_t>(i) * 3 + k] = ptrs[i]->gt_rotated[k];

                Graph g;
                std::map<std::string, int> nodes;
                std::vector<nn::BnPending> bn;
                Rng drop_rng = root.derive(Rng::mix(Rng::mix(2000 + c, epoch), start));
                int out = refine_forward(g, meta, net, nodes, batch, Mode::Train, drop_rng, &bn);
                int loss = refine_loss(g, out, gt, nodes, net, meta.arch.lambda_reg,
                                       meta.arch.loss);
                double loss_val = g.value(loss).data[0];
                g.backward(loss, Tensor::scalar(1.0));

                std::map<std::string, Tensor> grads;
                for (const auto& [name, node] : nodes) {
                    if (!g.requires_grad(node)) continue;
                    if (g.has_grad(node)) grads[name] = g.grad(node);
                }
                nn::sgd_step(net, grads, hyper.lr);
                nn::apply_bn_updates(net, bn, hyper.bn_momentum);

                loss_sum += loss_val * batch.count;
                loss_count += batch.count;
            }
            double epoch_loss = loss_sum / loss_count;
            result.cluster_epoch_loss[c].push_back(epoch_loss);
            if (log && (epoch % 25 == 0 || epoch + 1 == hyper.epochs))
                *log << "train: cluster " << c << " epoch " << epoch << " loss " << epoch_loss
                     << "\n";
        }
    }

    // sample-weighted aggregate per epoch
    result.epoch_loss.assign(hyper.epochs, 0.0);
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        double total = 0.0;
        int count = 0;
        for (int c = 0; c < hyper.k_c; ++c) {
            if (members[c].empty() ||
                epoch >= static_cast<int>(result.cluster_epoch_loss[c].size()))
                continue;
            total += result.cluster_epoch_loss[c][epoch] * members[c].size();
            count += static_cast<int>(members[c].size());
        }
        result.epoch_loss[epoch] = count > 0 ? total / count : 0.0;
    }

    result.model = std::move(meta);
    return result;
}

NormalField refine_field(const PointCloud& cloud, const NormalField& initial,
                         const RefineModel& model) {
    if (initial.size() != cloud.points.size())
        throw LengthMismatch("refine_field: one initial normal per point required");
    SpatialIndex index(cloud);
    FilterParams filter = model.filter_for(bbox_diagonal(cloud));
    BranchInputs inputs = build_branch_inputs(cloud, index, initial, filter, model.features,
                                              model.seed);
    const int x = inputs.branches;
    NormalField out(cloud.points.size());
    parallel_for(cloud.size(), [&](std::int64_t i) {
        std::span<const HmpGrid> hmps{inputs.hmps.data() + static_cast<size_t>(i) * x,
                                      static_cast<size_t>(x)};
        out[i] = predict_normal(model, inputs.patches[i], hmps, inputs.normals_row(i),
                                inputs.rotations[i]);
    });
    return out;
}

// ---- model file ----------------------------------------------------------

namespace {

using nlohmann::json;

constexpr std::uint32_t kModelMagic = 0x4d52464e;  // "NFRM"
constexpr std::uint32_t kModelVersion = 1;

json arch_to_json(const ArchParams& a) {
    return json{{"point_mlp", a.point_mlp},
                {"point_fc", a.point_fc},
                {"hmp_convs", a.hmp_convs},
                {"hmp_fc", a.hmp_fc},
                {"lift_fc", a.lift_fc},
                {"head_fc", a.head_fc},
                {"weight_p", a.weight_p},
                {"weight_p2", a.weight_p2},
                {"dropout_keep", a.dropout_keep},
                {"connection1", to_string(a.connection1)},
                {"connection2", to_string(a.connection2)},
                {"lambda_reg", a.lambda_reg},
                {"loss", a.loss == LossKind::L2 ? "l2" : "l1"}};
}

ArchParams arch_from_json(const json& j) {
    ArchParams a;
    a.point_mlp = j.at("point_mlp").get<std::vector<int>>();
    a.point_fc = j.at("point_fc").get<std::vector<int>>();
    a.hmp_convs = j.at("hmp_convs").get<std::vector<int>>();
    a.hmp_fc = j.at("hmp_fc").get<std::vector<int>>();
    a.lift_fc = j.at("lift_fc").get<std::vector<int>>();
    a.head_fc = j.at("head_fc").get<std::vector<int>>();
    a.weight_p = j.at("weight_p").get<int>();
    a.weight_p2 = j.at("weight_p2").get<int>();
    a.dropout_keep = j.at("dropout_keep").get<double>();
    a.connection1 = connection_kind_from_string(j.at("connection1").get<std::string>());
    a.connection2 = connection_kind_from_string(j.at("connection2").get<std::string>());
    a.lambda_reg = j.at("lambda_reg").get<double>();
    a.loss = j.at("loss").get<std::string>() == "l1" ? LossKind::L1 : LossKind::L2;
    return a;
}

template <typename T>
void write_raw(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("model file: truncated stream");
    return v;
}

}  // namespace

void save_model(const RefineModel& model, const std::string& path) {
    json header{
        {"format_version", kModelVersion},
        {"spatial_sigma_fracs", model.spatial_sigma_fracs},
        {"range_sigmas", model.range_sigmas},
        {"include_unfiltered", model.include_unfiltered},
        {"features",
         {{"patch_radius_frac", model.features.patch_radius_frac},
          {"max_pts", model.features.max_pts},
          {"grid_m", model.features.grid_m},
          {"ball_r_spacings", model.features.ball_r_spacings},
          {"sigma_d_spacings", model.features.sigma_d_spacings}}},
        {"arch", arch_to_json(model.arch)},
        {"cluster", {{"dim", model.cluster.dim}, {"centers", model.cluster.centers}}},
        {"seed", model.seed},
        {"clusters", model.nets.size()},
    };
    std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    write_raw<std::uint32_t>(out, kModelMagic);
    write_raw<std::uint32_t>(out, kModelVersion);
    write_raw<std::uint64_t>(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& net : model.nets) net.save(out);
    if (!out) throw ParseError("failed writing '" + path + "'");
}

RefineModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    if (read_raw<std::uint32_t>(in) != kModelMagic) throw ParseError("model file: bad magic");
    if (read_raw<std::uint32_t>(in) != kModelVersion)
        throw ParseError("model file: unsupported version");
    auto header_len = read_raw<std::uint64_t>(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw ParseError("model file: truncated header");
    json header = json::parse(header_text);

    RefineModel model;
    model.spatial_sigma_fracs = header.at("spatial_sigma_fracs").get<std::vector<double>>();
    model.range_sigmas = header.at("range_sigmas").get<std::vector<double>>();
    model.include_unfiltered = header.at("include_unfiltered").get<bool>();
    const json& f = header.at("features");
    model.features.patch_radius_frac = f.at("patch_radius_frac").get<double>();
    model.features.max_pts = f.at("max_pts").get<int>();
    model.features.grid_m = f.at("grid_m").get<int>();
    model.features.ball_r_spacings = f.at("ball_r_spacings").get<double>();
    model.features.sigma_d_spacings = f.at("sigma_d_spacings").get<double>();
    model.arch = arch_from_json(header.at("arch"));
    model.cluster.dim = header.at("cluster").at("dim").get<int>();
    model.cluster.centers =
        header.at("cluster").at("centers").get<std::vector<std::vector<double>>>();
    model.seed = header.at("seed").get<std::uint64_t>();
    auto clusters = header.at("clusters").get<size_t>();
    model.nets.reserve(clusters);
    for (size_t c = 0; c < clusters; ++c) model.nets.push_back(ParamStore::load(in));
    return model;
}

}  // namespace normalforge

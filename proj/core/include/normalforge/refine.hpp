#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "normalforge/features.hpp"
#include "normalforge/filtering.hpp"
#include "normalforge/geometry.hpp"
#include "normalforge/nn.hpp"

namespace normalforge {

enum class ConnectionKind { RotationQuaternion, TransformMatrix, WeightMatrix };
enum class LossKind { L1, L2 };

ConnectionKind connection_kind_from_string(const std::string& s);
std::string to_string(ConnectionKind kind);

// Layer widths of the refinement network. Defaults follow the reference
// architecture; the acceptance and unit suites shrink them through the
// config so CPU training stays tractable.
struct ArchParams {
    std::vector<int> point_mlp{64, 64, 64, 128, 1024};
    std::vector<int> point_fc{256, 128};
    std::vector<int> hmp_convs{64, 64, 0, 128, 128, 0, 128};  // 0 marks a 3x3/s1 max-pool
    std::vector<int> hmp_fc{256, 128};
    std::vector<int> lift_fc{64, 64};
    std::vector<int> head_fc{512, 256};
    int weight_p = 64;   // refinement-1 output feature size for WeightMatrix
    int weight_p2 = 64;  // refinement-2 output feature size
    double dropout_keep = 0.3;
    ConnectionKind connection1 = ConnectionKind::WeightMatrix;
    ConnectionKind connection2 = ConnectionKind::WeightMatrix;
    double lambda_reg = 0.02;
    LossKind loss = LossKind::L2;

    // transformation vector size produced by the point module
    int d1() const;
    // feature size after refinement 1
    int feat1_dim() const;
    // transformation vector size produced by the height-map module
    int d2() const;
    int feat2_dim() const;
    int branch_dim() const { return feat1_dim() + feat2_dim() + lift_fc.back(); }

    void validate() const;
};

// Layer stacks of the four sub-networks; parameter names are stable so
// stores can be saved and reloaded.
std::vector<nn::LayerSpec> point_module_layers(const ArchParams& arch);
std::vector<nn::LayerSpec> hmp_module_layers(const ArchParams& arch, int branches, int grid_m);
std::vector<nn::LayerSpec> lift_layers(const ArchParams& arch, int branch);
std::vector<nn::LayerSpec> head_layers(const ArchParams& arch, int branches);
void init_net_params(const ArchParams& arch, int branches, int grid_m, nn::ParamStore& store,
                     Rng rng);

// Trained model: filtering/feature metadata (scale-free fractions), the
// cluster model over concatenated canonical normals, and one parameter store
// per cluster.
struct RefineModel {
    std::vector<double> spatial_sigma_fracs{0.025, 0.05};
    std::vector<double> range_sigmas{0.1, 0.2, 0.35, 0.5};
    bool include_unfiltered = true;
    FeatureParams features;
    ArchParams arch;
    ClusterModel cluster;
    std::vector<nn::ParamStore> nets;
    std::uint64_t seed = 0;

    int branches() const {
        return static_cast<int>(spatial_sigma_fracs.size() * range_sigmas.size()) +
               (include_unfiltered ? 1 : 0);
    }
    FilterParams filter_for(double bbox_diag) const {
        return FilterParams::from_fracs(spatial_sigma_fracs, range_sigmas, include_unfiltered,
                                        bbox_diag);
    }
};

// One training sample: a point's branch bundle plus its ground-truth normal
// expressed in the same canonical frame (z >= 0).
struct TrainSample {
    LocalPatch patch;
    std::vector<HmpGrid> hmps;           // X grids
    std::vector<Vec3> rotated_normals;   // X canonical-frame normals
    Vec3 gt_rotated = Vec3::UnitZ();
};

// Slices a cloud's branch bundle into samples; the cloud must carry ground
// truth. gt normals are rotated into each point's canonical frame and
// z-flipped to match the input convention.
std::vector<TrainSample> make_train_samples(const BranchInputs& inputs, const PointCloud& cloud);

// Concatenated canonical normals (3X), the clustering feature.
std::vector<double> cluster_feature(std::span<const Vec3> rotated_normals);

// ---- network assembly -------------------------------------------------------

struct NetBatch {
    nn::Tensor patches;  // (B, max_pts, 3)
    nn::Tensor hmps;     // (B, X, m, m)
    nn::Tensor normals;  // (B, X, 3)
    int count = 0;
};

NetBatch make_batch(std::span<const TrainSample* const> samples, int branches, int max_pts,
                    int grid_m);

// Learned transformation applied by matrix multiplication: quaternion ->
// rotation, 9-vector -> 3x3 matrix, or p*q weights -> (p, q) matrix.
// Plain-math single-sample version.
std::vector<double> connection_apply(ConnectionKind kind, std::span<const double> t_raw,
                                     std::span<const double> v);
// Graph version over a batch: t (B, d), v (B, q) -> (B, out).
int connection_node(nn::Graph& g, ConnectionKind kind, int t, int v);

// Full forward over a batch: returns the raw (pre-normalization) output node
// of shape (B, 3).
int refine_forward(nn::Graph& g, const RefineModel& model, nn::ParamStore& net,
                   std::map<std::string, int>& param_nodes, const NetBatch& batch, nn::Mode mode,
                   Rng& rng, std::vector<nn::BnPending>* bn_pending);

// Loss node: mean over the batch of |Lambda(pred) - gt|_2^2 (or L1 sum), plus
// lambda * sum of squared weight-matrix entries.
int refine_loss(nn::Graph& g, int pred_raw, const nn::Tensor& gt,
                const std::map<std::string, int>& param_nodes, const nn::ParamStore& net,
                double lambda, LossKind kind);

// Scalar single-sample loss for spot checks; weight_sq_sum is the
// regularizer's sum of squared weight entries.
double loss_value(const Vec3& pred_raw, const Vec3& gt, double weight_sq_sum, double lambda,
                  LossKind kind);

// Single-sample module wrappers.
nn::Tensor point_module_forward(const LocalPatch& patch, const ArchParams& arch,
                                nn::ParamStore& net, nn::Mode mode, std::uint64_t dropout_seed = 0);
nn::Tensor hmp_module_forward(std::span<const HmpGrid> hmps, const ArchParams& arch,
                              nn::ParamStore& net, nn::Mode mode, std::uint64_t dropout_seed = 0);
// One branch's 192-feature (feat1 | feat2 | lifted normal).
nn::Tensor branch_forward(const RefineModel& model, nn::ParamStore& net, const LocalPatch& patch,
                          std::span<const HmpGrid> hmps, std::span<const Vec3> rotated_normals,
                          int branch, nn::Mode mode);

// Predicted world-frame unit normal for one point bundle (Eval mode).
Vec3 predict_normal(const RefineModel& model, const LocalPatch& patch,
                    std::span<const HmpGrid> hmps, std::span<const Vec3> rotated_normals,
                    const Mat3& rotation);

// ---- training ---------------------------------------------------------------

struct TrainHyper {
    double lr = 1e-4;
    int batch = 64;
    int epochs = 200;
    int k_c = 4;
    double bn_momentum = 0.9;
    int kmeans_iters = 100;
    std::uint64_t seed = 0;
};

struct TrainResult {
    RefineModel model;
    std::vector<double> epoch_loss;                      // sample-weighted over clusters
    std::vector<std::vector<double>> cluster_epoch_loss;  // per cluster
};

// Clusters the samples by k-means over their concatenated canonical normals
// and trains one network per cluster by minibatch SGD. Deterministic for a
// fixed seed, independent of thread count.
TrainResult train_refine_model(RefineModel meta, const std::vector<TrainSample>& samples,
                               const TrainHyper& hyper, std::ostream* log = nullptr);

// Full refinement pipeline on any initial unit-normal field: filter,
// canonicalize, build features, predict per point.
NormalField refine_field(const PointCloud& cloud, const NormalField& initial,
                         const RefineModel& model);

// Model file: JSON metadata header plus one parameter-store blob per cluster.
void save_model(const RefineModel& model, const std::string& path);
RefineModel load_model(const std::string& path);

}  // namespace normalforge

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "normalforge/geometry.hpp"
#include "normalforge/rng.hpp"

namespace normalforge {

struct Plane {
    Vec3 normal = Vec3::UnitZ();  // unit length
    Vec3 point = Vec3::Zero();

    double signed_distance(const Vec3& p) const { return normal.dot(p - point); }
};

// A multi-scale neighborhood with its fitted plane and consistency score.
struct FitPatch {
    int center_index = -1;
    int scale = 0;             // neighbor count k_t
    std::vector<int> members;  // |members| == scale
    Plane plane;
    double sigma = 0.0;   // residual bandwidth the energy was evaluated with
    double energy = 0.0;  // mean Gaussian residual weight of the selected plane, in (0, 1]
    double score = 0.0;   // energy * eta(scale), in (0, 1]
};

struct MfpsParams {
    std::vector<int> scales{50, 100, 150};  // strictly increasing neighbor counts
    double beta = 0.9;                      // scale-tradeoff floor, in (0, 1]
    double sigma = 0.0;                     // residual bandwidth; > 0 fixes it globally
    double sigma_scale = 0.3;  // otherwise sigma_j = sigma_scale * k_t-th neighbor distance
    int plane_samples = 100;   // candidate plane draws per patch
    double w_t_deg = 60.0;     // anisotropic angular threshold
    int orient_k = 50;         // neighborhood size for the exterior-orientation test
    int classify_k = 100;      // candidate/smooth covariance neighborhood
    double classify_tau = 0.05;

    void validate() const;
};

// Mean Gaussian residual weight of `members` against the plane:
// mean over p of exp(-d(p, plane)^2 / sigma^2).
double plane_energy(const PointCloud& cloud, std::span<const int> members, const Plane& plane,
                    double sigma);

// Among `samples` candidate planes, each through a uniformly drawn
// non-collinear member triple, returns the one maximizing the energy, plus
// that energy. Throws DegeneratePatch if no non-collinear triple is found.
std::pair<Plane, double> fit_patch_plane(const PointCloud& cloud, std::span<const int> members,
                                         double sigma, int samples, Rng& rng);

// energy * (beta + (1 - beta) * (scale - k_min) / (k_max - k_min)); the scale
// weight is 1 when only one scale is configured.
double patch_score(double energy, int scale, const MfpsParams& params);

struct PatchPool {
    std::vector<FitPatch> patches;
    std::vector<std::vector<int>> containing;  // per point: patch ids that contain it
    int degenerate_skipped = 0;
};

// One FitPatch per (point, scale) pair; degenerate patches are skipped and
// counted (and noted on `log` when given). Scales larger than the cloud are
// skipped. Deterministic for a fixed seed regardless of thread count.
PatchPool build_patch_pool(const PointCloud& cloud, const SpatialIndex& index,
                           const MfpsParams& params, std::uint64_t seed,
                           std::ostream* log = nullptr);

struct AnisoPatch {
    const FitPatch* patch = nullptr;
    Vec3 normal = Vec3::UnitZ();
};

// Greedy filter over patches sorted by descending score: keep a patch iff its
// plane normal differs by more than w_t degrees (unoriented) from every
// already-kept normal. The first patch is always kept.
std::vector<AnisoPatch> select_anisotropic(std::span<const FitPatch* const> sorted_by_score,
                                           double w_t_deg);

// Reorients every candidate normal to the surface exterior over the orient_k
// nearest neighbors of point i, then returns the normal whose signed
// reference-point offset n . (p_ref - p_i) is smallest. A flip criterion of
// exactly 0 keeps the current sign and bumps *ambiguous_flips.
Vec3 choose_fitting_normal(const PointCloud& cloud, const SpatialIndex& index, int i,
                           std::span<const AnisoPatch> aniso, int orient_k,
                           std::ostream* log = nullptr, int* ambiguous_flips = nullptr);

// Full multi-scale fitting patch selection: smooth points take PCA normals at
// the largest scale, candidate points take the best anisotropic fitting-patch
// normal (falling back to PCA when no patch contains them).
NormalField mfps_estimate(const PointCloud& cloud, const MfpsParams& params, std::uint64_t seed,
                          std::ostream* log = nullptr);

// Ablation variant: every candidate point takes the normal of its
// highest-score containing patch, with no anisotropic selection and no
// exterior-orientation test.
NormalField simple_mfps_estimate(const PointCloud& cloud, const MfpsParams& params,
                                 std::uint64_t seed, std::ostream* log = nullptr);

}  // namespace normalforge

#include "normalforge/mfps.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ostream>

#include "normalforge/parallel.hpp"

namespace normalforge {

void MfpsParams::validate() const {
    if (scales.empty()) throw ConfigError("mfps: scales must be non-empty");
    for (size_t i = 0; i + 1 < scales.size(); ++i)
        if (scales[i] >= scales[i + 1]) throw ConfigError("mfps: scales must be strictly increasing");
    if (scales.front() < 3) throw ConfigError("mfps: smallest scale must be >= 3");
    if (beta <= 0.0 || beta > 1.0) throw ConfigError("mfps: beta must be in (0, 1]");
    if (plane_samples < 1) throw ConfigError("mfps: plane_samples must be >= 1");
    if (w_t_deg <= 0.0 || w_t_deg >= 180.0) throw ConfigError("mfps: w_t_deg must be in (0, 180)");
    if (orient_k < 1) throw ConfigError("mfps: orient_k must be >= 1");
    if (classify_k < 3) throw ConfigError("mfps: classify_k must be >= 3");
    if (classify_tau <= 0.0 || classify_tau >= 1.0)
        throw ConfigError("mfps: classify_tau must be in (0, 1)");
    if (sigma < 0.0 || sigma_scale <= 0.0) throw ConfigError("mfps: bad sigma settings");
}

double plane_energy(const PointCloud& cloud, std::span<const int> members, const Plane& plane,
                    double sigma) {
    double sum = 0.0;
    double inv = 1.0 / (sigma * sigma);
    for (int idx : members) {
        double d = plane.signed_distance(cloud.points[idx]);
        sum += std::exp(-d * d * inv);
    }
    return sum / static_cast<double>(members.size());
}

std::pair<Plane, double> fit_patch_plane(const PointCloud& cloud, std::span<const int> members,
                                         double sigma, int samples, Rng& rng) {
    if (members.size() < 3) throw DegeneratePatch("patch has fewer than 3 members");
    if (sigma <= 0.0) throw DegeneratePatch("non-positive residual bandwidth");

    const int n = static_cast<int>(members.size());
    Plane best;
    double best_energy = -1.0;
    for (int s = 0; s < samples; ++s) {
        int ia = rng.uniform_int(n);
        int ib = rng.uniform_int(n);
        int ic = rng.uniform_int(n);
        if (ia == ib || ia == ic || ib == ic) continue;
        const Vec3& a = cloud.points[members[ia]];
        const Vec3& b = cloud.points[members[ib]];
        const Vec3& c = cloud.points[members[ic]];
        Vec3 cross = (b - a).cross(c - a);
        double scale2 = (b - a).squaredNorm() * (c - a).squaredNorm();
        if (cross.squaredNorm() <= 1e-24 * scale2 || scale2 == 0.0) continue;
        Plane plane{cross.normalized(), a};
        double energy = plane_energy(cloud, members, plane, sigma);
        if (energy > best_energy) {
            best_energy = energy;
            best = plane;
        }
    }
    if (best_energy < 0.0) throw DegeneratePatch("no non-collinear member triple found");
    return {best, best_energy};
}

double patch_score(double energy, int scale, const MfpsParams& params) {
    int k_min = params.scales.front();
    int k_max = params.scales.back();
    double eta = 1.0;
    if (k_max > k_min)
        eta = params.beta + (1.0 - params.beta) * static_cast<double>(scale - k_min) /
                                static_cast<double>(k_max - k_min);
    return energy * eta;
}

PatchPool build_patch_pool(const PointCloud& cloud, const SpatialIndex& index,
                           const MfpsParams& params, std::uint64_t seed, std::ostream* log) {
    const int n = cloud.size();
    std::vector<int> scales;
    for (int k : params.scales) {
        if (k <= n) scales.push_back(k);
        else if (log) *log << "mfps: skipping scale " << k << " > cloud size " << n << "\n";
    }

    const int per_point = static_cast<int>(scales.size());
    std::vector<FitPatch> slots(static_cast<size_t>(n) * per_point);
    std::vector<char> valid(slots.size(), 0);
    Rng base(Rng::mix(seed, 0x4d465053));

    parallel_for(n, [&](std::int64_t j) {
        for (int t = 0; t < per_point; ++t) {
            int k_t = scales[t];
            std::vector<int> members = index.knn(cloud.points[j], k_t);
            double far_dist = (cloud.points[members.back()] - cloud.points[j]).norm();
            double sigma = params.sigma > 0.0 ? params.sigma : params.sigma_scale * far_dist;
            if (sigma <= 0.0) continue;
            Rng rng = base.derive(static_cast<std::uint64_t>(j) * 64 + t);
            FitPatch patch;
            patch.center_index = static_cast<int>(j);
            patch.scale = k_t;
            patch.sigma = sigma;
            try {
                auto [plane, energy] = fit_patch_plane(cloud, members, sigma, params.plane_samples, rng);
                patch.plane = plane;
                patch.energy = energy;
            } catch (const DegeneratePatch&) {
                continue;
            }
            patch.score = patch_score(patch.energy, k_t, params);
            patch.members = std::move(members);
            size_t slot = static_cast<size_t>(j) * per_point + t;
            slots[slot] = std::move(patch);
            valid[slot] = 1;
        }
    });

    PatchPool pool;
    pool.patches.reserve(slots.size());
    for (size_t s = 0; s < slots.size(); ++s) {
        if (valid[s]) pool.patches.push_back(std::move(slots[s]));
        else ++pool.degenerate_skipped;
    }
    if (pool.degenerate_skipped > 0 && log)
        *log << "mfps: skipped " << pool.degenerate_skipped << " degenerate patches\n";

    pool.containing.resize(n);
    for (int pid = 0; pid < static_cast<int>(pool.patches.size()); ++pid)
        for (int member : pool.patches[pid].members) pool.containing[member].push_back(pid);
    return pool;
}

namespace {

double unoriented_angle_deg(const Vec3& a, const Vec3& b) {
    double c = std::clamp(std::abs(a.dot(b)), 0.0, 1.0);
    return std::acos(c) * 180.0 / M_PI;
}

// total order: descending score, then ascending center index, then scale
bool patch_order(const FitPatch* a, const FitPatch* b) {
    if (a->score != b->score) return a->score > b->score;
    if (a->center_index != b->center_index) return a->center_index < b->center_index;
    return a->scale < b->scale;
}

}  // namespace

std::vector<AnisoPatch> select_anisotropic(std::span<const FitPatch* const> sorted_by_score,
                                           double w_t_deg) {
    std::vector<AnisoPatch> kept;
    for (const FitPatch* patch : sorted_by_score) {
        bool distinct = true;
        for (const AnisoPatch& a : kept) {
            if (unoriented_angle_deg(patch->plane.normal, a.normal) <= w_t_deg) {
                distinct = false;
                break;
            }
        }
        if (distinct) kept.push_back({patch, patch->plane.normal});
    }
    return kept;
}

Vec3 choose_fitting_normal(const PointCloud& cloud, const SpatialIndex& index, int i,
                           std::span<const AnisoPatch> aniso, int orient_k, std::ostream* log,
                           int* ambiguous_flips) {
    const Vec3& p = cloud.points[i];
    std::vector<int> nbhd = index.knn(p, orient_k);

    Vec3 best_normal = Vec3::UnitZ();
    double best_value = 0.0;
    bool have_best = false;
    for (const AnisoPatch& entry : aniso) {
        Vec3 n = entry.normal;
        const Plane& plane = entry.patch->plane;
        Vec3 p_ref = p - plane.signed_distance(p) * plane.normal;
        // exterior: the normal points away from the local point mass, so a
        // wrong-side plane (with the target on its interior side) scores a
        // positive reference offset and loses the minimum below
        double flip_sum = 0.0;
        for (int k : nbhd) flip_sum += n.dot(p_ref - cloud.points[k]);
        if (flip_sum < 0.0) {
            n = -n;
        } else if (flip_sum == 0.0) {
            if (ambiguous_flips) ++*ambiguous_flips;
            if (log) *log << "mfps: ambiguous exterior orientation at point " << i
                          << ", keeping sign\n";
        }
        double value = n.dot(p_ref - p);
        if (!have_best || value < best_value) {
            have_best = true;
            best_value = value;
            best_normal = n;
        }
    }
    return best_normal;
}

namespace {

NormalField estimate_impl(const PointCloud& cloud, const MfpsParams& params, std::uint64_t seed,
                          bool anisotropic_selection, std::ostream* log) {
    params.validate();
    const int n = cloud.size();
    SpatialIndex index(cloud);

    const int classify_k = std::min(params.classify_k, n);
    std::vector<PointClass> classes = classify_points(cloud, index, classify_k, params.classify_tau);
    PatchPool pool = build_patch_pool(cloud, index, params, seed, log);

    const int pca_k = std::min(params.scales.back(), n);
    NormalField normals(n);
    std::atomic<int> fallbacks{0};
    std::atomic<int> ambiguous{0};

    parallel_for(n, [&](std::int64_t i) {
        std::vector<int> nbhd = index.knn(cloud.points[i], pca_k);
        Vec3 pca = pca_normal(cloud, nbhd);
        if (classes[i] == PointClass::Smooth) {
            normals[i] = pca;
            return;
        }
        const std::vector<int>& containing = pool.containing[i];
        if (containing.empty()) {
            normals[i] = pca;
            fallbacks.fetch_add(1, std::memory_order_relaxed);
            return;
        }
        std::vector<const FitPatch*> sorted;
        sorted.reserve(containing.size());
        for (int pid : containing) sorted.push_back(&pool.patches[pid]);
        std::sort(sorted.begin(), sorted.end(), patch_order);

        if (anisotropic_selection) {
            std::vector<AnisoPatch> aniso = select_anisotropic(sorted, params.w_t_deg);
            int amb = 0;
            normals[i] = choose_fitting_normal(cloud, index, static_cast<int>(i), aniso,
                                               std::min(params.orient_k, n), nullptr, &amb);
            if (amb) ambiguous.fetch_add(amb, std::memory_order_relaxed);
        } else {
            normals[i] = sorted.front()->plane.normal;
        }
    });
    if (log && fallbacks.load() > 0)
        *log << "mfps: " << fallbacks.load() << " candidate points fell back to PCA\n";
    if (log && ambiguous.load() > 0)
        *log << "mfps: " << ambiguous.load() << " ambiguous exterior orientations kept their sign\n";
    return normals;
}

}  // namespace

NormalField mfps_estimate(const PointCloud& cloud, const MfpsParams& params, std::uint64_t seed,
                          std::ostream* log) {
    return estimate_impl(cloud, params, seed, true, log);
}

NormalField simple_mfps_estimate(const PointCloud& cloud, const MfpsParams& params,
                                 std::uint64_t seed, std::ostream* log) {
    return estimate_impl(cloud, params, seed, false, log);
}

}  // namespace normalforge

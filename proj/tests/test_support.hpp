// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_TESTS_SUPPORT_HPP
#define GTRACE_TESTS_SUPPORT_HPP

#include "gtrace/git_trace.hpp"
#include "gtrace/rng.hpp"
#include "gtrace/scene.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace gtrace::testing {

/// Camera at `eye` looking down +z (image y along world +y).
inline CameraView front_camera(int width, int height, double focal, const Vec3 &eye = Vec3::Zero(),
                               std::uint32_t index = 0) {
    CameraView v;
    v.view_index = index;
    v.translation = -eye;
    v.fx = v.fy = focal;
    v.cx = width * 0.5;
    v.cy = height * 0.5;
    v.width = width;
    v.height = height;
    return v;
}

inline GaussianDisk flat_disk(const Vec3 &center, double scale, double opacity, const Vec3 &color,
                              std::size_t feature_dim = kDefaultFeatureDim) {
    GaussianDisk g;
    g.center = center;
    g.scale_u = g.scale_v = scale;
    g.opacity = opacity;
    g.color = color;
    g.feature = VecX::Zero(static_cast<Eigen::Index>(feature_dim));
    return g;
}

/// Random orthonormal tangent frame whose normal stays within ~60 degrees of the z axis.
inline void random_frame(Rng &rng, GaussianDisk &g) {
    Vec3 n(uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8), 1.0);
    n.normalize();
    Vec3 a = Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    Vec3 tu = (a - a.dot(n) * n);
    if (tu.norm() < 1e-3)
        tu = Vec3::UnitX() - n.x() * n;
    tu.normalize();
    g.tangent_u = tu;
    g.tangent_v = n.cross(tu).normalized();
}

/// Random disks in front of a single camera at the origin looking down +z, with random
/// labels in [1, labels]. Opacity is kept below `max_opacity`.
inline Scene random_scene(std::uint64_t seed, std::size_t n, int width = 16, int height = 16,
                          std::size_t feature_dim = 4, std::uint32_t labels = 3, double max_opacity = 0.95) {
    Rng rng(seed);
    Scene s;
    s.feature_dim = feature_dim;
    s.views.push_back(front_camera(width, height, 0.9 * width));
    for (std::size_t i = 0; i < n; ++i) {
        GaussianDisk g;
        g.center = Vec3(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), uniform(rng, 1.5, 3.0));
        random_frame(rng, g);
        g.scale_u = uniform(rng, 0.08, 0.35);
        g.scale_v = uniform(rng, 0.08, 0.35);
        g.opacity = uniform(rng, 0.1, max_opacity);
        g.color = Vec3(uniform01(rng), uniform01(rng), uniform01(rng));
        g.feature.resize(static_cast<Eigen::Index>(feature_dim));
        for (std::size_t k = 0; k < feature_dim; ++k)
            g.feature[static_cast<Eigen::Index>(k)] = uniform(rng, -1, 1);
        g.gt_instance = static_cast<InstanceId>(1 + uniform_index(rng, labels));
        s.gaussians.push_back(g);
    }
    return s;
}

/// Weight matrix from dense rows: rows[v][i] is Gaussian i's distribution in view v
/// (all zero = not visible).
inline WeightMatrix from_dense(const std::vector<std::vector<std::vector<double>>> &rows) {
    WeightMatrix wm;
    wm.gaussian_count = rows.front().size();
    for (const auto &view : rows) {
        ViewWeightRows r;
        r.patch_count = static_cast<std::uint32_t>(view.front().size());
        r.offsets.push_back(0);
        for (const auto &dist : view) {
            double m = 0.0;
            for (std::uint32_t t = 0; t < dist.size(); ++t)
                if (dist[t] > 0.0) {
                    r.entries.push_back({t, dist[t]});
                    m += dist[t];
                }
            r.mass.push_back(m);
            r.offsets.push_back(r.entries.size());
        }
        wm.views.push_back(std::move(r));
    }
    fill_argmax(wm);
    return wm;
}

} // namespace gtrace::testing

#endif // GTRACE_TESTS_SUPPORT_HPP

// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_TESTS_FIXTURES_HPP
#define GTRACE_TESTS_FIXTURES_HPP

#include "gtrace/rasterizer.hpp"
#include "gtrace/scene.hpp"

#include <vector>

namespace gtrace::testing {

/// Two abutting panels plus a row of wide disks sitting on their seam, slightly in front.
/// The seam disks straddle both objects in every view. Instance maps and target images
/// come from the scene without the seam disks.
struct StraddleScene {
    Scene scene;
    Scene clean;
    std::vector<InstanceMap> maps;
    std::vector<ImageF> targets;
    std::size_t straddlers = 0;
};

inline StraddleScene straddle_scene(int seam_disks = 6, int image = 64, std::uint64_t seed = 1) {
    // The panels overfill every view, so the seam is the only boundary in the instance maps.
    SceneSpec spec;
    spec.object_count = 2;
    spec.objects.resize(2);
    spec.objects[0].panels.push_back({Vec3(-1.0, 0.0, 0.0), 2.0, 3.6});
    spec.objects[1].panels.push_back({Vec3(1.0, 0.0, 0.0), 2.0, 3.6});
    spec.disks_u = 20;
    spec.disks_v = 36;
    spec.sigma_factor = 0.4;
    spec.fov_degrees = 30.0;
    spec.ring_radius = 0.5;
    spec.image_width = spec.image_height = image;
    spec.seed = seed;
    StraddleScene s;
    s.clean = generate_scene(spec);
    s.scene = s.clean;
    for (int k = 0; k < seam_disks; ++k) {
        GaussianDisk g = s.clean.gaussians.front();
        g.center = Vec3(0.0, -0.4 + 0.8 * (k + 0.5) / seam_disks, -0.02);
        g.scale_u = g.scale_v = 0.15;
        g.opacity = 0.8;
        g.color = Vec3(0.6, 0.45, 0.2);
        g.gt_instance = 1;
        s.scene.gaussians.push_back(g);
    }
    s.straddlers = static_cast<std::size_t>(seam_disks);
    for (std::size_t v = 0; v < s.clean.views.size(); ++v) {
        s.maps.push_back(render_gt_instance_map(s.clean, v));
        s.targets.push_back(render(s.clean, v).color);
    }
    return s;
}

} // namespace gtrace::testing

#endif // GTRACE_TESTS_FIXTURES_HPP

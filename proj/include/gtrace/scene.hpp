// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_SCENE_HPP
#define GTRACE_SCENE_HPP

#include "gtrace/error.hpp"
#include "gtrace/rng.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gtrace {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;

/// Instance ID 0 means "unlabeled / background pixel". Objects are numbered from 1.
using InstanceId = std::uint32_t;
inline constexpr InstanceId kUnlabeled = 0;

inline constexpr std::size_t kDefaultFeatureDim = 16;
inline constexpr double kFrameTolerance = 1e-9;

/// One oriented planar Gaussian disk (surfel primitive). Colors are view independent.
struct GaussianDisk {
    Vec3 center = Vec3::Zero();
    Vec3 tangent_u = Vec3::UnitX();
    Vec3 tangent_v = Vec3::UnitY();
    double scale_u = 1.0;
    double scale_v = 1.0;
    double opacity = 1.0;
    Vec3 color = Vec3::Zero();
    VecX feature;
    std::optional<InstanceId> gt_instance;

    Vec3 normal() const { return tangent_u.cross(tangent_v); }

    bool operator==(const GaussianDisk &) const = default;
};

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (x_cam = R x_world + t); the camera looks down +z, image y grows downward.
struct CameraView {
    std::uint32_t view_index = 0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 1, height = 1;

    Vec3 center() const { return -rotation.transpose() * translation; }

    /// World-space direction through the centre of pixel (x, y), scaled so its camera-space z is 1.
    Vec3 ray_direction(int x, int y) const {
        const Vec3 cam((x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1.0);
        return rotation.transpose() * cam;
    }

    /// Pixel coordinates of a world point; nullopt when behind the camera.
    std::optional<Vec2> project(const Vec3 &world) const {
        const Vec3 cam = rotation * world + translation;
        if (cam.z() <= 0.0)
            return std::nullopt;
        return Vec2(fx * cam.x() / cam.z() + cx, fy * cam.y() / cam.z() + cy);
    }

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    bool operator==(const CameraView &) const = default;
};

struct Scene {
    std::vector<GaussianDisk> gaussians;
    std::vector<CameraView> views;
    std::size_t feature_dim = kDefaultFeatureDim;

    std::size_t size() const { return gaussians.size(); }

    bool operator==(const Scene &) const = default;
};

/// Throws ValidationError naming `path` if the disk breaks an invariant.
inline void validate(const GaussianDisk &g, std::size_t feature_dim, const std::string &path) {
    auto fail = [&](const std::string &field, const std::string &msg) {
        throw ValidationError(path + "." + field, msg);
    };
    if (!g.center.allFinite())
        fail("center", "not finite");
    if (std::abs(g.tangent_u.norm() - 1.0) > kFrameTolerance)
        fail("tangent_u", "not unit length");
    if (std::abs(g.tangent_v.norm() - 1.0) > kFrameTolerance)
        fail("tangent_v", "not unit length");
    if (std::abs(g.tangent_u.dot(g.tangent_v)) > kFrameTolerance)
        fail("tangent_v", "not orthogonal to tangent_u");
    if (!(g.scale_u > 0.0) || !std::isfinite(g.scale_u))
        fail("scale_u", "must be positive");
    if (!(g.scale_v > 0.0) || !std::isfinite(g.scale_v))
        fail("scale_v", "must be positive");
    if (!(g.opacity >= 0.0 && g.opacity <= 1.0))
        fail("opacity", "must lie in [0, 1]");
    if (!g.color.allFinite())
        fail("color", "not finite");
    if (static_cast<std::size_t>(g.feature.size()) != feature_dim)
        fail("feature", "length " + std::to_string(g.feature.size()) + " != feature_dim " +
                            std::to_string(feature_dim));
    if (!g.feature.allFinite())
        fail("feature", "not finite");
}

inline void validate(const CameraView &v, const std::string &path) {
    auto fail = [&](const std::string &field, const std::string &msg) {
        throw ValidationError(path + "." + field, msg);
    };
    if (!((v.rotation * v.rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <=
          kFrameTolerance))
        fail("rotation", "not orthonormal");
    if (!v.translation.allFinite())
        fail("translation", "not finite");
    if (!(v.fx > 0.0) || !(v.fy > 0.0))
        fail("focal", "must be positive");
    if (v.width < 1 || v.height < 1)
        fail("size", "width and height must be >= 1");
}

inline void validate(const Scene &scene) {
    if (scene.feature_dim == 0)
        throw ValidationError("feature_dim", "must be >= 1");
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i)
        validate(scene.gaussians[i], scene.feature_dim, "gaussians[" + std::to_string(i) + "]");
    for (std::size_t v = 0; v < scene.views.size(); ++v)
        validate(scene.views[v], "views[" + std::to_string(v) + "]");
}

/// Builds a camera at `eye` looking at `target`. Image y follows world -`up`.
inline CameraView look_at(std::uint32_t view_index, const Vec3 &eye, const Vec3 &target, const Vec3 &up,
                          double focal, int width, int height) {
    const Vec3 z = (target - eye).normalized();
    const Vec3 x = (-up).cross(z).normalized();
    const Vec3 y = z.cross(x);
    CameraView v;
    v.view_index = view_index;
    v.rotation.row(0) = x.transpose();
    v.rotation.row(1) = y.transpose();
    v.rotation.row(2) = z.transpose();
    v.translation = -v.rotation * eye;
    v.fx = v.fy = focal;
    v.cx = width * 0.5;
    v.cy = height * 0.5;
    v.width = width;
    v.height = height;
    return v;
}

/// Axis-aligned rectangle in a constant-z plane, facing the cameras.
struct PanelSpec {
    Vec3 center = Vec3::Zero();
    double width = 1.0;
    double height = 1.0;
};

struct ObjectSpec {
    std::vector<PanelSpec> panels;
};

/// Parameters of the synthetic scene generator. The seed fully determines the output.
struct SceneSpec {
    std::size_t object_count = 3;
    /// Explicit layout; when empty, objects are laid out on a grid automatically.
    std::vector<ObjectSpec> objects;
    double panel_size = 1.0;
    double panel_gap = 0.35;
    double depth_step = 0.1;

    int disks_u = 12; ///< disks per panel along its width
    int disks_v = 12; ///< disks per panel along its height
    double sigma_factor = 0.5; ///< disk sigma as a fraction of the grid spacing
    double base_opacity = 0.9;

    bool background_panel = false;
    double background_depth = 1.0;

    std::uint64_t seed = 0;
    double jitter_center = 0.0;
    double jitter_scale = 0.0;
    double jitter_opacity = 0.0;
    double jitter_color = 0.03;

    std::size_t feature_dim = kDefaultFeatureDim;
    double feature_init_std = 1e-3;

    std::size_t view_count = 8;
    int image_width = 64;
    int image_height = 64;
    double fov_degrees = 50.0;
    double camera_distance = 4.0;
    double ring_radius = 1.0;
};

namespace detail {

inline Vec3 palette_color(std::size_t k) {
    static const double table[][3] = {{0.90, 0.20, 0.20}, {0.20, 0.70, 0.25}, {0.20, 0.35, 0.90},
                                      {0.90, 0.80, 0.20}, {0.75, 0.30, 0.80}, {0.20, 0.80, 0.80},
                                      {0.95, 0.55, 0.15}, {0.55, 0.55, 0.55}};
    const auto &c = table[k % 8];
    return {c[0], c[1], c[2]};
}

inline std::vector<ObjectSpec> auto_layout(const SceneSpec &spec) {
    const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(double(spec.object_count))));
    const std::size_t rows = (spec.object_count + cols - 1) / cols;
    const double pitch = spec.panel_size + spec.panel_gap;
    std::vector<ObjectSpec> out(spec.object_count);
    for (std::size_t k = 0; k < spec.object_count; ++k) {
        const double col = double(k % cols) - 0.5 * double(cols - 1);
        const double row = double(k / cols) - 0.5 * double(rows - 1);
        PanelSpec p;
        p.center = Vec3(col * pitch, row * pitch, spec.depth_step * double(k % 2));
        p.width = p.height = spec.panel_size;
        out[k].panels.push_back(p);
    }
    return out;
}

inline void tessellate_panel(const SceneSpec &spec, const PanelSpec &panel, InstanceId id, const Vec3 &base_color,
                             Rng &rng, std::vector<GaussianDisk> &out) {
    const double du = panel.width / spec.disks_u;
    const double dv = panel.height / spec.disks_v;
    for (int j = 0; j < spec.disks_v; ++j) {
        for (int i = 0; i < spec.disks_u; ++i) {
            GaussianDisk g;
            g.center = panel.center + Vec3((i + 0.5) * du - 0.5 * panel.width, (j + 0.5) * dv - 0.5 * panel.height, 0.0);
            for (int a = 0; a < 3; ++a)
                g.center[a] += uniform(rng, -spec.jitter_center, spec.jitter_center);
            g.scale_u = spec.sigma_factor * du * (1.0 + uniform(rng, -spec.jitter_scale, spec.jitter_scale));
            g.scale_v = spec.sigma_factor * dv * (1.0 + uniform(rng, -spec.jitter_scale, spec.jitter_scale));
            g.opacity = std::clamp(spec.base_opacity + uniform(rng, -spec.jitter_opacity, spec.jitter_opacity), 0.05, 1.0);
            for (int a = 0; a < 3; ++a)
                g.color[a] = std::clamp(base_color[a] + uniform(rng, -spec.jitter_color, spec.jitter_color), 0.0, 1.0);
            g.feature.resize(static_cast<Eigen::Index>(spec.feature_dim));
            for (std::size_t f = 0; f < spec.feature_dim; ++f)
                g.feature[static_cast<Eigen::Index>(f)] = spec.feature_init_std * standard_normal(rng);
            g.gt_instance = id;
            out.push_back(std::move(g));
        }
    }
}

} // namespace detail

/// Ring of `spec.view_count` cameras on a circle parallel to the panels, all looking at `target`.
inline std::vector<CameraView> ring_views(const SceneSpec &spec, const Vec3 &target) {
    const double focal = 0.5 * spec.image_width / std::tan(0.5 * spec.fov_degrees * M_PI / 180.0);
    std::vector<CameraView> views;
    for (std::size_t v = 0; v < spec.view_count; ++v) {
        const double phi = 2.0 * M_PI * double(v) / double(spec.view_count);
        const Vec3 eye = target + Vec3(spec.ring_radius * std::cos(phi), spec.ring_radius * std::sin(phi),
                                       -spec.camera_distance);
        views.push_back(look_at(static_cast<std::uint32_t>(v), eye, target, Vec3(0, -1, 0), focal,
                                spec.image_width, spec.image_height));
    }
    return views;
}

/// Deterministic synthetic scene: one or more flat panels of disks per object, every disk labelled.
inline Scene generate_scene(const SceneSpec &spec) {
    if (spec.object_count == 0)
        throw InvalidArgument("generate_scene: object_count must be >= 1");
    if (spec.disks_u <= 0 || spec.disks_v <= 0)
        throw InvalidArgument("generate_scene: disks per panel must be >= 1");
    if (spec.view_count < 8)
        throw InvalidArgument("generate_scene: view_count must be >= 8");
    if (spec.feature_dim == 0)
        throw InvalidArgument("generate_scene: feature_dim must be >= 1");
    if (!spec.objects.empty() && spec.objects.size() != spec.object_count)
        throw InvalidArgument("generate_scene: objects.size() != object_count");

    const std::vector<ObjectSpec> layout = spec.objects.empty() ? detail::auto_layout(spec) : spec.objects;
    Rng rng(spec.seed);
    Scene scene;
    scene.feature_dim = spec.feature_dim;

    Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
    for (std::size_t k = 0; k < layout.size(); ++k) {
        if (layout[k].panels.empty())
            throw InvalidArgument("generate_scene: object " + std::to_string(k + 1) + " has no panels");
        for (const auto &panel : layout[k].panels) {
            detail::tessellate_panel(spec, panel, static_cast<InstanceId>(k + 1), detail::palette_color(k), rng,
                                     scene.gaussians);
            const Vec3 half(0.5 * panel.width, 0.5 * panel.height, 0.0);
            lo = lo.cwiseMin(panel.center - half);
            hi = hi.cwiseMax(panel.center + half);
        }
    }
    const Vec3 target(0.5 * (lo.x() + hi.x()), 0.5 * (lo.y() + hi.y()), lo.z());
    if (spec.background_panel) {
        PanelSpec bg;
        bg.width = 1.6 * (hi.x() - lo.x()) + spec.panel_size;
        bg.height = 1.6 * (hi.y() - lo.y()) + spec.panel_size;
        bg.center = Vec3(target.x(), target.y(), hi.z() + spec.background_depth);
        detail::tessellate_panel(spec, bg, static_cast<InstanceId>(layout.size() + 1), Vec3(0.35, 0.33, 0.30), rng,
                                 scene.gaussians);
    }
    scene.views = ring_views(spec, target);
    return scene;
}

/// Copy of `scene` restricted to views [first, first + count).
inline Scene view_subset(const Scene &scene, std::size_t first, std::size_t count) {
    detail::require(first + count <= scene.views.size(), "view_subset: range out of bounds");
    Scene out;
    out.gaussians = scene.gaussians;
    out.feature_dim = scene.feature_dim;
    out.views.assign(scene.views.begin() + static_cast<std::ptrdiff_t>(first),
                     scene.views.begin() + static_cast<std::ptrdiff_t>(first + count));
    return out;
}

} // namespace gtrace

#endif // GTRACE_SCENE_HPP

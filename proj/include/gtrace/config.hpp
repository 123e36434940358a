// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_CONFIG_HPP
#define GTRACE_CONFIG_HPP

#include "gtrace/contrastive.hpp"
#include "gtrace/error.hpp"
#include "gtrace/git_trace.hpp"
#include "gtrace/masks.hpp"
#include "gtrace/merge.hpp"
#include "gtrace/refine.hpp"
#include "gtrace/rng.hpp"
#include "gtrace/scene.hpp"
#include "gtrace/segment.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace gtrace {

inline constexpr int kConfigSchemaVersion = 1;

/// Everything one pipeline run needs. All module seeds derive from `seed`.
struct RunConfig {
    std::uint64_t seed = 0;
    SceneSpec scene;
    std::string scene_file; ///< when set, the scene is loaded instead of generated
    std::vector<std::size_t> heldout_views; ///< excluded from every training-side stage
    RasterOptions raster;
    TraceOptions trace;
    InjectorParams injector;
    MergeOptions merge;
    RefineConfig refine;
    ContrastiveConfig contrastive;
    QueryOptions query;
    std::size_t reference_view = 0; ///< position within the training views
    SelfPromptOptions selfprompt;
    InjectorParams selfprompt_noise; ///< corruption applied to the oracle prompter's masks
    std::string output_dir = "out";

    /// Seed of the named stream.
    std::uint64_t stream(std::string_view name) const { return derive_seed(seed, name); }

    void validate() const {
        gtrace::validate(raster);
        injector.validate();
        selfprompt_noise.validate();
        refine.validate();
        contrastive.validate();
        detail::require(merge.theta >= 0.0, "RunConfig: merge.theta must be >= 0");
        detail::require(trace.trace_eps >= 0.0 && trace.vis_eps >= 0.0, "RunConfig: trace thresholds must be >= 0");
        detail::require(query.max_queries >= 1 && query.tau > 0.0, "RunConfig: bad query options");
        detail::require(selfprompt.max_views >= 1, "RunConfig: selfprompt.max_views must be >= 1");
        std::set<std::size_t> seen;
        for (auto v : heldout_views) {
            detail::require(v < scene.view_count || !scene_file.empty(), "RunConfig: held-out view out of range");
            detail::require(seen.insert(v).second, "RunConfig: duplicate held-out view");
        }
        detail::require(heldout_views.size() < scene.view_count || !scene_file.empty(),
                        "RunConfig: no training views left");
    }
};

namespace detail {

using json = nlohmann::json;

/// Rejects keys outside `allowed` so typos in config files fail loudly.
inline void check_keys(const json &j, const std::string &path, std::initializer_list<const char *> allowed) {
    if (!j.is_object())
        throw ValidationError(path, "expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char *a : allowed)
            ok |= it.key() == a;
        if (!ok)
            throw ValidationError(path, "unknown key '" + it.key() + "'");
    }
}

template <typename T>
void read(const json &j, const char *key, T &out, const std::string &path) {
    if (!j.contains(key))
        return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception &e) {
        throw ValidationError(path + "." + key, e.what());
    }
}

inline Vec3 read_vec3(const json &j, const std::string &path) {
    if (!j.is_array() || j.size() != 3)
        throw ValidationError(path, "expected [x, y, z]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline SceneSpec scene_spec_from_json(const json &j, const std::string &path) {
    check_keys(j, path,
               {"object_count", "objects", "panel_size", "panel_gap", "depth_step", "disks_u", "disks_v",
                "sigma_factor", "base_opacity", "background_panel", "background_depth", "jitter_center",
                "jitter_scale", "jitter_opacity", "jitter_color", "feature_dim", "feature_init_std", "view_count",
                "image_width", "image_height", "fov_degrees", "camera_distance", "ring_radius"});
    SceneSpec s;
    read(j, "object_count", s.object_count, path);
    read(j, "panel_size", s.panel_size, path);
    read(j, "panel_gap", s.panel_gap, path);
    read(j, "depth_step", s.depth_step, path);
    read(j, "disks_u", s.disks_u, path);
    read(j, "disks_v", s.disks_v, path);
    read(j, "sigma_factor", s.sigma_factor, path);
    read(j, "base_opacity", s.base_opacity, path);
    read(j, "background_panel", s.background_panel, path);
    read(j, "background_depth", s.background_depth, path);
    read(j, "jitter_center", s.jitter_center, path);
    read(j, "jitter_scale", s.jitter_scale, path);
    read(j, "jitter_opacity", s.jitter_opacity, path);
    read(j, "jitter_color", s.jitter_color, path);
    read(j, "feature_dim", s.feature_dim, path);
    read(j, "feature_init_std", s.feature_init_std, path);
    read(j, "view_count", s.view_count, path);
    read(j, "image_width", s.image_width, path);
    read(j, "image_height", s.image_height, path);
    read(j, "fov_degrees", s.fov_degrees, path);
    read(j, "camera_distance", s.camera_distance, path);
    read(j, "ring_radius", s.ring_radius, path);
    if (j.contains("objects")) {
        for (std::size_t k = 0; k < j["objects"].size(); ++k) {
            const auto &o = j["objects"][k];
            const std::string op = path + ".objects[" + std::to_string(k) + "]";
            ObjectSpec obj;
            for (const auto &p : o.at("panels")) {
                check_keys(p, op + ".panels", {"center", "width", "height"});
                PanelSpec ps;
                ps.center = read_vec3(p.at("center"), op + ".center");
                read(p, "width", ps.width, op);
                read(p, "height", ps.height, op);
                obj.panels.push_back(ps);
            }
            s.objects.push_back(std::move(obj));
        }
    }
    return s;
}

inline InjectorParams injector_from_json(const json &j, const std::string &path) {
    check_keys(j, path,
               {"split_prob", "merge_prob", "split_prob_per_view", "merge_prob_per_view", "split_object",
                "merge_object", "boundary_radius", "emit_hierarchy"});
    InjectorParams p;
    read(j, "split_prob", p.split_prob, path);
    read(j, "merge_prob", p.merge_prob, path);
    read(j, "split_prob_per_view", p.split_prob_per_view, path);
    read(j, "merge_prob_per_view", p.merge_prob_per_view, path);
    if (j.contains("split_object"))
        p.split_object = j["split_object"].get<InstanceId>();
    if (j.contains("merge_object"))
        p.merge_object = j["merge_object"].get<InstanceId>();
    read(j, "boundary_radius", p.boundary_radius, path);
    read(j, "emit_hierarchy", p.emit_hierarchy, path);
    return p;
}

inline void raster_from_json(const json &j, const std::string &path, RasterOptions &r) {
    check_keys(j, path, {"cutoff_radius", "alpha_clamp", "term_eps", "tile_size"});
    read(j, "cutoff_radius", r.cutoff_radius, path);
    read(j, "alpha_clamp", r.alpha_clamp, path);
    read(j, "term_eps", r.term_eps, path);
    read(j, "tile_size", r.tile_size, path);
}

} // namespace detail

/// Propagates the shared raster and trace options into every stage and derives the module
/// seeds from the global seed. Call again after changing `seed` or `raster`.
inline void resolve(RunConfig &c) {
    // Raster and trace options are shared by every stage.
    c.trace.raster = c.raster;
    c.refine.trace = c.trace;
    c.contrastive.raster = c.raster;
    c.query.tau = c.contrastive.tau;
    c.query.extract.trace = c.trace;
    c.selfprompt.extract = c.query.extract;
    c.merge.trace_eps = c.trace.trace_eps;
    c.merge.threads = c.raster.threads;
    // Module seeds.
    c.scene.seed = c.stream("scene");
    c.injector.seed = c.stream("inject");
    c.selfprompt_noise.seed = c.stream("selfprompt/noise");
    c.contrastive.seed = c.stream("contrastive");
}

/// Parses a run configuration. Missing keys keep their defaults; unknown keys are errors.
inline RunConfig run_config_from_json(const nlohmann::json &j) {
    using detail::read;
    detail::check_keys(j, "config",
                       {"schema_version", "seed", "scene", "scene_file", "heldout_views", "raster", "trace", "injector",
                        "merge", "refine", "contrastive", "query", "reference_view", "selfprompt", "output_dir"});
    const int version = j.value("schema_version", kConfigSchemaVersion);
    if (version != kConfigSchemaVersion)
        throw ValidationError("config", "schema_version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kConfigSchemaVersion) + ")");
    RunConfig c;
    read(j, "seed", c.seed, "config");
    if (j.contains("scene"))
        c.scene = detail::scene_spec_from_json(j["scene"], "config.scene");
    read(j, "scene_file", c.scene_file, "config");
    read(j, "heldout_views", c.heldout_views, "config");
    if (j.contains("raster"))
        detail::raster_from_json(j["raster"], "config.raster", c.raster);
    if (j.contains("trace")) {
        detail::check_keys(j["trace"], "config.trace", {"vis_eps", "trace_eps"});
        read(j["trace"], "vis_eps", c.trace.vis_eps, "config.trace");
        read(j["trace"], "trace_eps", c.trace.trace_eps, "config.trace");
    }
    if (j.contains("injector"))
        c.injector = detail::injector_from_json(j["injector"], "config.injector");
    if (j.contains("merge")) {
        const auto &m = j["merge"];
        detail::check_keys(m, "config.merge", {"theta", "use_hierarchy", "cross_view", "cannot_link"});
        read(m, "theta", c.merge.theta, "config.merge");
        read(m, "use_hierarchy", c.merge.use_hierarchy, "config.merge");
        read(m, "cross_view", c.merge.cross_view, "config.merge");
        read(m, "cannot_link", c.merge.cannot_link, "config.merge");
    }
    if (j.contains("refine")) {
        const auto &r = j["refine"];
        detail::check_keys(r, "config.refine",
                           {"gamma", "theta_as", "scale_divisor", "round_period", "max_rounds", "refit_lr"});
        read(r, "gamma", c.refine.gamma, "config.refine");
        read(r, "theta_as", c.refine.theta_as, "config.refine");
        read(r, "scale_divisor", c.refine.scale_divisor, "config.refine");
        read(r, "round_period", c.refine.round_period, "config.refine");
        read(r, "max_rounds", c.refine.max_rounds, "config.refine");
        read(r, "refit_lr", c.refine.refit_lr, "config.refine");
    }
    if (j.contains("contrastive")) {
        const auto &r = j["contrastive"];
        detail::check_keys(r, "config.contrastive", {"lr", "tau", "batch", "steps", "balanced", "log_domain"});
        read(r, "lr", c.contrastive.lr, "config.contrastive");
        read(r, "tau", c.contrastive.tau, "config.contrastive");
        read(r, "batch", c.contrastive.batch, "config.contrastive");
        read(r, "steps", c.contrastive.steps, "config.contrastive");
        read(r, "balanced", c.contrastive.balanced, "config.contrastive");
        if (r.value("log_domain", false))
            c.contrastive.form = LogitForm::LogDomain;
    }
    if (j.contains("query")) {
        const auto &q = j["query"];
        detail::check_keys(q, "config.query", {"max_queries", "min_gain", "coverage", "extract_mass"});
        read(q, "max_queries", c.query.max_queries, "config.query");
        read(q, "min_gain", c.query.min_gain, "config.query");
        read(q, "coverage", c.query.coverage, "config.query");
        read(q, "extract_mass", c.query.extract.mass, "config.query");
    }
    read(j, "reference_view", c.reference_view, "config");
    if (j.contains("selfprompt")) {
        const auto &s = j["selfprompt"];
        detail::check_keys(s, "config.selfprompt", {"max_views", "prompts_per_view", "noise"});
        read(s, "max_views", c.selfprompt.max_views, "config.selfprompt");
        read(s, "prompts_per_view", c.selfprompt.prompts_per_view, "config.selfprompt");
        if (s.contains("noise"))
            c.selfprompt_noise = detail::injector_from_json(s["noise"], "config.selfprompt.noise");
    }
    read(j, "output_dir", c.output_dir, "config");

    resolve(c);
    c.validate();
    return c;
}

} // namespace gtrace

#endif // GTRACE_CONFIG_HPP

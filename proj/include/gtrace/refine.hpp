// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_REFINE_HPP
#define GTRACE_REFINE_HPP

#include "gtrace/error.hpp"
#include "gtrace/git_trace.hpp"
#include "gtrace/metrics.hpp"
#include "gtrace/rasterizer.hpp"
#include "gtrace/rng.hpp"
#include "gtrace/scene.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gtrace {

struct RefineConfig {
    double gamma = 0.8;    ///< a view is unsure when its row max is below gamma
    double theta_as = 0.5; ///< ambiguous when the unsure fraction exceeds theta_as
    double scale_divisor = 2.0;
    std::size_t round_period = 1000; ///< appearance-refit iterations per round
    std::size_t max_rounds = 5;
    double refit_lr = 0.5; ///< step on the diagonally preconditioned MSE gradient
    double loss_weight = 1.0;
    TraceOptions trace;

    void validate() const {
        detail::require(gamma > 0.0 && gamma < 1.0, "RefineConfig: gamma must be in (0, 1)");
        detail::require(theta_as > 0.0 && theta_as <= 1.0, "RefineConfig: theta_as must be in (0, 1]");
        detail::require(scale_divisor > 1.0, "RefineConfig: scale_divisor must be > 1");
        detail::require(refit_lr > 0.0 && loss_weight > 0.0, "RefineConfig: refit_lr and loss_weight must be > 0");
    }
};

struct AmbiguityReport {
    std::size_t round = 0;
    std::vector<double> score;              ///< As_i; 0 for invisible Gaussians
    std::vector<std::uint32_t> view_count;  ///< |V_i|
    std::vector<bool> ambiguous;
    std::vector<bool> invisible;

    std::size_t ambiguous_count() const { return static_cast<std::size_t>(std::count(ambiguous.begin(), ambiguous.end(), true)); }
    std::size_t invisible_count() const { return static_cast<std::size_t>(std::count(invisible.begin(), invisible.end(), true)); }
};

/// Fraction of each Gaussian's visible views whose row max is strictly below gamma; ambiguous
/// when that fraction is strictly above theta_as.
inline AmbiguityReport ambiguity_scores(const WeightMatrix &wm, double gamma = 0.8, double theta_as = 0.5) {
    AmbiguityReport r;
    const std::size_t n = wm.gaussian_count;
    r.score.assign(n, 0.0);
    r.view_count.assign(n, 0);
    r.ambiguous.assign(n, false);
    r.invisible.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t unsure = 0;
        for (const auto &view : wm.views) {
            const auto row = view.row(i);
            if (row.empty())
                continue;
            ++r.view_count[i];
            double mx = 0.0;
            for (const auto &e : row)
                mx = std::max(mx, e.prob);
            if (mx < gamma)
                ++unsure;
        }
        if (r.view_count[i] == 0) {
            r.invisible[i] = true;
            continue;
        }
        r.score[i] = static_cast<double>(unsure) / static_cast<double>(r.view_count[i]);
        r.ambiguous[i] = r.score[i] > theta_as;
    }
    return r;
}

/// Two children at half scale (by default), centres drawn from the parent's own density on
/// its plane. Appearance is inherited; the ground-truth label is dropped.
inline std::pair<GaussianDisk, GaussianDisk> split_gaussian(const GaussianDisk &disk, Rng &rng,
                                                            double scale_divisor = 2.0) {
    detail::require(scale_divisor > 1.0, "split_gaussian: scale_divisor must be > 1");
    auto child = [&] {
        GaussianDisk c = disk;
        const double u = standard_normal(rng);
        const double v = standard_normal(rng);
        c.center = disk.center + u * disk.scale_u * disk.tangent_u + v * disk.scale_v * disk.tangent_v;
        c.scale_u = disk.scale_u / scale_divisor;
        c.scale_v = disk.scale_v / scale_divisor;
        c.gt_instance.reset();
        return c;
    };
    GaussianDisk a = child();
    GaussianDisk b = child();
    return {std::move(a), std::move(b)};
}

struct DensityControlResult {
    Scene scene;
    AmbiguityReport before;      ///< on the input scene
    AmbiguityReport after_split; ///< after splitting, drives pruning
    AmbiguityReport after;       ///< on the returned scene
    std::size_t n_split = 0;
    std::size_t n_pruned = 0;
    /// For every Gaussian of the returned scene, the input index it came from and whether it is a child.
    std::vector<std::uint32_t> parent;
    std::vector<bool> is_child;
    /// For every input Gaussian, its indices in the returned scene (empty when pruned).
    std::vector<std::vector<std::uint32_t>> new_indices;

    bool unchanged() const { return n_split == 0 && n_pruned == 0; }
};

namespace detail {

inline void check_maps(const Scene &scene, std::span<const InstanceMap> maps) {
    if (maps.size() != scene.views.size())
        throw InvalidArgument("instance maps (" + std::to_string(maps.size()) + ") and scene views (" +
                              std::to_string(scene.views.size()) + ") disagree");
    for (std::size_t v = 0; v < maps.size(); ++v)
        if (maps[v].width() != scene.views[v].width || maps[v].height() != scene.views[v].height)
            throw ViewError(v, "instance map size differs from the view");
}

} // namespace detail

/// Trace, score, split every ambiguous Gaussian in place, re-trace, then remove every Gaussian
/// that is still ambiguous.
inline DensityControlResult density_control_round(const Scene &scene, std::span<const InstanceMap> maps,
                                                  const RefineConfig &cfg, Rng &rng) {
    cfg.validate();
    detail::check_maps(scene, maps);
    DensityControlResult out;
    out.before = ambiguity_scores(trace_all(scene, maps, cfg.trace), cfg.gamma, cfg.theta_as);
    const std::size_t n = scene.gaussians.size();
    out.new_indices.resize(n);

    if (out.before.ambiguous_count() == 0) {
        out.scene = scene;
        out.after_split = out.before;
        out.after = out.before;
        for (std::uint32_t i = 0; i < n; ++i) {
            out.parent.push_back(i);
            out.is_child.push_back(false);
            out.new_indices[i].push_back(i);
        }
        return out;
    }

    Scene mid;
    mid.views = scene.views;
    mid.feature_dim = scene.feature_dim;
    std::vector<std::uint32_t> mid_parent;
    std::vector<bool> mid_child;
    for (std::uint32_t i = 0; i < n; ++i) {
        if (out.before.ambiguous[i]) {
            auto [a, b] = split_gaussian(scene.gaussians[i], rng, cfg.scale_divisor);
            mid.gaussians.push_back(std::move(a));
            mid.gaussians.push_back(std::move(b));
            mid_parent.insert(mid_parent.end(), {i, i});
            mid_child.insert(mid_child.end(), {true, true});
            ++out.n_split;
        } else {
            mid.gaussians.push_back(scene.gaussians[i]);
            mid_parent.push_back(i);
            mid_child.push_back(false);
        }
    }
    out.after_split = ambiguity_scores(trace_all(mid, maps, cfg.trace), cfg.gamma, cfg.theta_as);

    out.scene.views = scene.views;
    out.scene.feature_dim = scene.feature_dim;
    for (std::size_t j = 0; j < mid.gaussians.size(); ++j) {
        if (out.after_split.ambiguous[j]) {
            ++out.n_pruned;
            continue;
        }
        const auto idx = static_cast<std::uint32_t>(out.scene.gaussians.size());
        out.new_indices[mid_parent[j]].push_back(idx);
        out.parent.push_back(mid_parent[j]);
        out.is_child.push_back(mid_child[j]);
        out.scene.gaussians.push_back(std::move(mid.gaussians[j]));
    }
    out.after = ambiguity_scores(trace_all(out.scene, maps, cfg.trace), cfg.gamma, cfg.theta_as);
    return out;
}

/// Mean squared error over every view, pixel and color channel.
inline double photometric_mse(const Scene &scene, std::span<const ImageF> targets, const RasterOptions &opts = {}) {
    double se = 0.0;
    std::size_t count = 0;
    for (std::size_t v = 0; v < scene.views.size(); ++v) {
        const auto out = render(scene, v, opts);
        for (std::size_t k = 0; k < out.color.data().size(); ++k) {
            const double d = out.color.data()[k] - targets[v].data()[k];
            se += d * d;
        }
        count += out.color.data().size();
    }
    return count ? se / static_cast<double>(count) : 0.0;
}

inline double photometric_psnr(const Scene &scene, std::span<const ImageF> targets, const RasterOptions &opts = {}) {
    return psnr_from_mse(photometric_mse(scene, targets, opts));
}

struct RefitTrace {
    std::vector<double> loss; ///< accepted loss before each iteration, then the final loss
    std::size_t halvings = 0;
};

/// Gradient descent on color and opacity against one target image per view. The gradient is
/// scaled by a per-Gaussian diagonal (sum of squared blend weights) and a step that raises the
/// loss is undone and retried at half the rate, so the accepted loss never increases.
inline Scene refine_appearance(const Scene &scene, std::span<const ImageF> targets, std::size_t iters, double lr,
                               const RasterOptions &opts = {}, RefitTrace *trace = nullptr) {
    detail::require(lr > 0.0, "refine_appearance: lr must be > 0");
    if (targets.size() != scene.views.size())
        throw InvalidArgument("refine_appearance: one target image per view required");
    for (std::size_t v = 0; v < targets.size(); ++v)
        if (targets[v].width() != scene.views[v].width || targets[v].height() != scene.views[v].height ||
            targets[v].channels() != 3)
            throw ViewError(v, "target image shape differs from the view");

    Scene cur = scene;
    const std::size_t n = cur.gaussians.size();
    const std::size_t L = cur.views.size();
    std::size_t terms = 0;
    for (const auto &t : targets)
        terms += t.data().size();
    if (iters == 0 || n == 0 || terms == 0)
        return cur;

    // Geometry never changes here, so the tile bins are built once.
    std::vector<PreparedView> views;
    views.reserve(L);
    for (std::size_t v = 0; v < L; ++v)
        views.emplace_back(cur, v, opts);

    std::vector<double> diag(n, 0.0);
    for (const auto &pv : views) {
        const auto c = render_contributions(pv);
        for (const auto &e : c.entries)
            diag[e.gaussian] += e.weight * e.weight;
    }
    for (auto &d : diag)
        d *= 2.0 / static_cast<double>(terms);

    auto loss_and_grad = [&](AppearanceGradients *grad) {
        double se = 0.0;
        if (grad)
            *grad = AppearanceGradients(n);
        for (std::size_t v = 0; v < L; ++v) {
            const auto out = render(views[v]);
            OutputGradients og;
            og.color = ImageF(out.color.width(), out.color.height(), 3);
            for (std::size_t k = 0; k < out.color.data().size(); ++k) {
                const double r = out.color.data()[k] - targets[v].data()[k];
                se += r * r;
                og.color.data()[k] = 2.0 * r / static_cast<double>(terms);
            }
            if (grad)
                *grad += appearance_gradients(views[v], og);
        }
        return se / static_cast<double>(terms);
    };

    AppearanceGradients g;
    double loss = loss_and_grad(&g);
    if (trace)
        trace->loss.push_back(loss);
    for (std::size_t it = 0; it < iters; ++it) {
        const std::vector<GaussianDisk> saved = cur.gaussians;
        bool moved = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (diag[i] <= 0.0)
                continue;
            auto &gi = cur.gaussians[i];
            const Vec3 c = (gi.color - lr * g.color[i] / diag[i]).cwiseMax(0.0).cwiseMin(1.0);
            const double a = std::clamp(gi.opacity - lr * g.opacity[i] / diag[i], 0.0, 1.0);
            moved |= c != gi.color || a != gi.opacity;
            gi.color = c;
            gi.opacity = a;
        }
        if (!moved)
            break;
        AppearanceGradients g_next;
        const double next = loss_and_grad(&g_next);
        if (next > loss) {
            cur.gaussians = saved;
            lr *= 0.5;
            if (trace)
                ++trace->halvings;
            continue;
        }
        loss = next;
        g = std::move(g_next);
        if (trace)
            trace->loss.push_back(loss);
    }
    return cur;
}

/// One line of the per-round report.
struct RoundReport {
    std::size_t round = 0;
    std::size_t n_gaussians = 0;
    std::size_t n_ambiguous = 0;       ///< at the start of the round
    std::size_t n_ambiguous_after = 0; ///< on the scene the round returns
    std::size_t n_split = 0;
    std::size_t n_pruned = 0;
    double psnr = 0.0; ///< full-view PSNR against the targets after the round's refit

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = {{"round", round},     {"n_gaussians", n_gaussians}, {"n_ambiguous", n_ambiguous},
                                    {"n_ambiguous_after", n_ambiguous_after},
                                    {"n_split", n_split}, {"n_pruned", n_pruned}};
        j["psnr"] = std::isinf(psnr) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(psnr);
        return j;
    }
};

struct RefinementResult {
    Scene scene;
    std::vector<RoundReport> rounds;
    std::vector<AmbiguityReport> reports; ///< ambiguity at the start of each round
    double psnr_before = 0.0;             ///< input scene vs targets
    double psnr_after = 0.0;              ///< returned scene vs targets
};

/// Alternates an appearance refit of `round_period` iterations with a density-control round,
/// stopping after `max_rounds` rounds or once nothing is ambiguous, then refits once more.
/// Without explicit targets the input scene's own renders are used.
inline RefinementResult run_refinement(const Scene &scene, std::span<const InstanceMap> maps, const RefineConfig &cfg,
                                       Rng &rng, std::span<const ImageF> targets = {}) {
    cfg.validate();
    detail::check_maps(scene, maps);
    std::vector<ImageF> own;
    if (targets.empty()) {
        for (std::size_t v = 0; v < scene.views.size(); ++v)
            own.push_back(render(scene, v, cfg.trace.raster).color);
        targets = own;
    }
    RefinementResult r;
    r.scene = scene;
    r.psnr_before = photometric_psnr(scene, targets, cfg.trace.raster);
    const double lr = cfg.refit_lr * cfg.loss_weight;
    for (std::size_t round = 0; round < cfg.max_rounds; ++round) {
        r.scene = refine_appearance(r.scene, targets, cfg.round_period, lr, cfg.trace.raster);
        auto dc = density_control_round(r.scene, maps, cfg, rng);
        dc.before.round = round;
        RoundReport rep;
        rep.round = round;
        rep.n_ambiguous = dc.before.ambiguous_count();
        rep.n_ambiguous_after = dc.after.ambiguous_count();
        rep.n_split = dc.n_split;
        rep.n_pruned = dc.n_pruned;
        r.reports.push_back(std::move(dc.before));
        r.scene = std::move(dc.scene);
        rep.n_gaussians = r.scene.gaussians.size();
        rep.psnr = photometric_psnr(r.scene, targets, cfg.trace.raster);
        r.rounds.push_back(rep);
        if (rep.n_ambiguous == 0)
            break;
    }
    r.scene = refine_appearance(r.scene, targets, cfg.round_period, lr, cfg.trace.raster);
    r.psnr_after = photometric_psnr(r.scene, targets, cfg.trace.raster);
    return r;
}

inline std::string rounds_jsonl(const RefinementResult &r) {
    std::string out;
    for (const auto &rep : r.rounds) {
        out += rep.to_json().dump();
        out += '\n';
    }
    return out;
}

} // namespace gtrace

#endif // GTRACE_REFINE_HPP

// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_SEGMENT_HPP
#define GTRACE_SEGMENT_HPP

#include "gtrace/contrastive.hpp"
#include "gtrace/error.hpp"
#include "gtrace/git_trace.hpp"
#include "gtrace/masks.hpp"
#include "gtrace/metrics.hpp"
#include "gtrace/rasterizer.hpp"
#include "gtrace/scene.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gtrace {

struct Pixel {
    int x = 0;
    int y = 0;

    bool operator==(const Pixel &) const = default;
};

/// Selection of Gaussians by multi-view mask vote.
struct Extraction {
    std::vector<std::uint32_t> selected;
    std::vector<std::uint32_t> complement;
    std::vector<std::uint32_t> yes_votes; ///< views whose mask holds more than `mass` of the Gaussian
    std::vector<std::uint32_t> visible;   ///< views that voted
};

struct ExtractOptions {
    double mass = 0.5;
    TraceOptions trace;
};

namespace detail {

inline InstanceMap mask_map(const Bitmap &mask) {
    LabelImage ids(mask.width(), mask.height());
    for (std::size_t p = 0; p < mask.data().size(); ++p)
        ids.data()[p] = mask.data()[p] ? 1u : 0u;
    auto m = make_instance_map(std::move(ids));
    m.patch_count = 2;
    m.pixel_counts.resize(2, 0);
    return m;
}

inline void check_mask(const Bitmap &m, const CameraView &view, std::size_t v) {
    if (m.width() != view.width || m.height() != view.height || m.channels() != 1)
        throw ViewError(v, "mask size differs from the view");
}

} // namespace detail

/// Gaussian i is selected when, in a strict majority of the views where it is visible, its
/// traced mass on the mask exceeds `mass`. Views with no mask (nullopt) do not vote.
inline Extraction extract_object(const Scene &scene, std::span<const std::optional<Bitmap>> masks,
                                 const ExtractOptions &opts = {}) {
    if (masks.size() != scene.views.size())
        throw InvalidArgument("extract_object: " + std::to_string(masks.size()) + " masks for " +
                              std::to_string(scene.views.size()) + " views");
    const std::size_t n = scene.gaussians.size();
    Extraction out;
    out.yes_votes.assign(n, 0);
    out.visible.assign(n, 0);
    for (std::size_t v = 0; v < masks.size(); ++v) {
        if (!masks[v])
            continue;
        detail::check_mask(*masks[v], scene.views[v], v);
        const auto rows = trace_view(PreparedView(scene, v, opts.trace.raster), detail::mask_map(*masks[v]), opts.trace);
        for (std::size_t i = 0; i < n; ++i) {
            if (!rows.visible(i))
                continue;
            ++out.visible[i];
            if (rows.prob(i, 1) > opts.mass)
                ++out.yes_votes[i];
        }
    }
    for (std::uint32_t i = 0; i < n; ++i)
        (2 * out.yes_votes[i] > out.visible[i] ? out.selected : out.complement).push_back(i);
    return out;
}

inline Scene subset_scene(const Scene &scene, std::span<const std::uint32_t> indices) {
    Scene out;
    out.views = scene.views;
    out.feature_dim = scene.feature_dim;
    for (auto i : indices)
        out.gaussians.push_back(scene.gaussians.at(i));
    return out;
}

/// Mask of the pixels a selection owns in the full render: covered (residual transmittance
/// at most 0.5) and carrying more selected than unselected blend weight.
inline Bitmap selection_mask(const Scene &scene, std::size_t view, std::span<const std::uint32_t> selection,
                             const RasterOptions &opts = {}) {
    std::vector<bool> in(scene.gaussians.size(), false);
    for (auto i : selection)
        in.at(i) = true;
    const auto c = render_contributions(scene, view, opts);
    Bitmap m(c.width, c.height);
    for (std::size_t p = 0; p < c.pixel_count(); ++p) {
        if (c.residual[p] > 0.5)
            continue;
        double a = 0.0, b = 0.0;
        for (const auto &e : c.at(p))
            (in[e.gaussian] ? a : b) += e.weight;
        m.data()[p] = a > b ? 1 : 0;
    }
    return m;
}

struct QueryOptions {
    std::size_t max_queries = 8;
    double min_gain = 1e-3;
    double tau = 0.01;
    double coverage = 0.5; ///< pixels with residual transmittance above 1 - coverage are never predicted
    ExtractOptions extract;
};

struct QueryPoint {
    std::size_t view = 0;
    Pixel pixel;
};

struct QueryResult {
    std::vector<VecX> queries;
    std::vector<QueryPoint> query_points;
    double threshold = 0.0;
    double reference_iou = 0.0;
    std::vector<Bitmap> masks; ///< predicted mask per scene view
    std::vector<std::uint32_t> selection;
};

/// Per-pixel max similarity to any query; -inf on uncovered pixels.
inline std::vector<double> query_scores(const RenderOutput &r, std::span<const VecX> queries, double tau,
                                        double coverage) {
    const std::size_t np = r.transmittance.pixel_count();
    const auto d = static_cast<Eigen::Index>(r.feature.channels());
    std::vector<double> s(np, -std::numeric_limits<double>::infinity());
    for (std::size_t p = 0; p < np; ++p) {
        if (r.transmittance.data()[p] > 1.0 - coverage)
            continue;
        const Eigen::Map<const VecX> f(r.feature.pixel(p).data(), d);
        for (const auto &q : queries)
            s[p] = std::max(s[p], std::exp(-tau * (f - q).squaredNorm()));
    }
    return s;
}

inline Bitmap threshold_scores(std::span<const double> s, int w, int h, double threshold) {
    Bitmap m(w, h);
    for (std::size_t p = 0; p < s.size(); ++p)
        m.data()[p] = s[p] >= threshold ? 1 : 0;
    return m;
}

namespace detail {

struct Sweep {
    double threshold = std::numeric_limits<double>::infinity();
    double iou = 0.0;
};

/// Threshold maximising IoU of {s >= t} against the mask; ties to the higher threshold.
inline Sweep best_threshold(std::span<const double> s, const Bitmap &mask) {
    std::vector<std::uint32_t> order;
    for (std::uint32_t p = 0; p < s.size(); ++p)
        if (std::isfinite(s[p]))
            order.push_back(p);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
    const double area = static_cast<double>(count_set(mask));
    Sweep best;
    double tp = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        tp += mask.data()[order[k]] ? 1.0 : 0.0;
        if (k + 1 < order.size() && s[order[k + 1]] == s[order[k]])
            continue;
        const double iou = tp / (area + double(k + 1) - tp);
        if (iou > best.iou) {
            best.iou = iou;
            best.threshold = s[order[k]];
        }
    }
    return best;
}

} // namespace detail

/// Predicted masks on every view of `scene` for a finished query.
inline std::vector<Bitmap> predict_masks(const Scene &scene, std::span<const VecX> queries, double threshold,
                                         const QueryOptions &opts = {}) {
    RasterOptions ro = opts.extract.trace.raster;
    ro.with_features = true;
    std::vector<Bitmap> out;
    for (std::size_t v = 0; v < scene.views.size(); ++v) {
        const auto r = render(scene, v, ro);
        const auto s = query_scores(r, queries, opts.tau, opts.coverage);
        out.push_back(threshold_scores(s, scene.views[v].width, scene.views[v].height, threshold));
    }
    return out;
}

/// Feature-query segmentation from one reference mask. Query points are added greedily at the
/// interior mask pixel the current queries cover worst (the first at the pixel nearest the
/// mask's mean feature); after each addition the threshold is re-chosen to maximise IoU
/// against the reference mask. A query that gains less than `min_gain` is dropped and ends
/// the search. The 3D selection is extract_object on the predicted masks.
inline QueryResult query_segment(const Scene &scene, std::size_t reference_view, const Bitmap &reference_mask,
                                 const QueryOptions &opts = {}) {
    if (reference_view >= scene.views.size())
        throw InvalidArgument("query_segment: reference view out of range");
    detail::check_mask(reference_mask, scene.views[reference_view], reference_view);
    if (count_set(reference_mask) == 0)
        throw InvalidArgument("query_segment: reference mask is empty");
    detail::require(opts.max_queries >= 1, "query_segment: max_queries must be >= 1");

    RasterOptions ro = opts.extract.trace.raster;
    ro.with_features = true;
    const auto ref = render(scene, reference_view, ro);
    const int w = scene.views[reference_view].width;
    const auto d = static_cast<Eigen::Index>(scene.feature_dim);
    auto feature_at = [&](std::size_t p) { return VecX(Eigen::Map<const VecX>(ref.feature.pixel(p).data(), d)); };

    // Interior: eroded mask, restricted to covered pixels when that leaves anything.
    auto restrict = [&](const Bitmap &m) {
        Bitmap r = m;
        for (std::size_t p = 0; p < r.data().size(); ++p)
            if (ref.transmittance.data()[p] > 1.0 - opts.coverage)
                r.data()[p] = 0;
        return count_set(r) > 0 ? r : m;
    };
    Bitmap interior = restrict(detail::morph(reference_mask, 1, false));
    if (count_set(interior) == 0)
        interior = restrict(reference_mask);
    std::vector<std::uint32_t> cand;
    for (std::uint32_t p = 0; p < interior.data().size(); ++p)
        if (interior.data()[p])
            cand.push_back(p);

    QueryResult out;
    VecX mean = VecX::Zero(d);
    for (auto p : cand)
        mean += feature_at(p);
    mean /= double(cand.size());
    std::uint32_t first = cand.front();
    double best_d = std::numeric_limits<double>::infinity();
    for (auto p : cand) {
        const double dd = (feature_at(p) - mean).squaredNorm();
        if (dd < best_d) {
            best_d = dd;
            first = p;
        }
    }

    // Coverage of every candidate by the current queries.
    std::vector<double> cover(cand.size(), -std::numeric_limits<double>::infinity());
    std::uint32_t next = first;
    detail::Sweep current;
    while (out.queries.size() < opts.max_queries) {
        std::vector<VecX> trial = out.queries;
        trial.push_back(feature_at(next));
        const auto s = query_scores(ref, trial, opts.tau, opts.coverage);
        const auto sweep = detail::best_threshold(s, reference_mask);
        if (!out.queries.empty() && sweep.iou - current.iou < opts.min_gain)
            break;
        out.queries = std::move(trial);
        out.query_points.push_back({reference_view, {static_cast<int>(next % w), static_cast<int>(next / w)}});
        current = sweep;
        std::size_t worst = 0;
        for (std::size_t k = 0; k < cand.size(); ++k) {
            cover[k] = std::max(cover[k], std::exp(-opts.tau * (feature_at(cand[k]) - out.queries.back()).squaredNorm()));
            if (cover[k] < cover[worst])
                worst = k;
        }
        next = cand[worst];
    }
    out.threshold = current.threshold;
    out.reference_iou = current.iou;
    out.masks = predict_masks(scene, out.queries, out.threshold, opts);
    std::vector<std::optional<Bitmap>> votes(out.masks.begin(), out.masks.end());
    out.selection = extract_object(scene, votes, opts.extract).selected;
    return out;
}

/// JSON manifest of a query; per_view_iou is supplied by the caller (null entries allowed).
inline nlohmann::ordered_json query_manifest(const QueryResult &q, const std::vector<std::optional<double>> &per_view_iou) {
    nlohmann::ordered_json j;
    j["query_points"] = nlohmann::ordered_json::array();
    for (const auto &p : q.query_points)
        j["query_points"].push_back({{"view", p.view}, {"x", p.pixel.x}, {"y", p.pixel.y}});
    j["threshold"] = q.threshold;
    j["reference_iou"] = q.reference_iou;
    j["per_view_iou"] = nlohmann::ordered_json::array();
    for (const auto &v : per_view_iou)
        j["per_view_iou"].push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json());
    j["n_selected_gaussians"] = q.selection.size();
    return j;
}

/// Returns a mask on `view` for the given point prompts.
using Prompter = std::function<Bitmap(std::size_t view, std::span<const Pixel> points)>;

/// Answers a prompt with the mask of the view's mask set that holds the most prompt points
/// (ties to the smaller mask, then the lower index); empty when no mask holds any point.
class OraclePrompter {
  public:
    explicit OraclePrompter(std::vector<BinaryMaskSet> sets) : sets_(std::move(sets)) {}

    /// One mask per object of each ground-truth map.
    static OraclePrompter from_maps(std::span<const InstanceMap> maps) {
        std::vector<BinaryMaskSet> sets;
        for (const auto &m : maps) {
            BinaryMaskSet s{m.width(), m.height(), {}, {}};
            for (auto &om : object_masks(m))
                s.masks.push_back(std::move(om.mask));
            sets.push_back(std::move(s));
        }
        return OraclePrompter(std::move(sets));
    }

    Bitmap operator()(std::size_t view, std::span<const Pixel> points) const {
        if (view >= sets_.size())
            throw InvalidArgument("OraclePrompter: no masks for view " + std::to_string(view));
        const auto &set = sets_[view];
        std::size_t best = set.masks.size(), best_hits = 0, best_area = 0;
        for (std::size_t j = 0; j < set.masks.size(); ++j) {
            const auto &m = set.masks[j];
            std::size_t hits = 0;
            for (const auto &p : points)
                if (p.x >= 0 && p.y >= 0 && p.x < m.width() && p.y < m.height() && m(p.x, p.y))
                    ++hits;
            if (hits == 0)
                continue;
            const std::size_t area = count_set(m);
            if (hits > best_hits || (hits == best_hits && area < best_area)) {
                best = j;
                best_hits = hits;
                best_area = area;
            }
        }
        return best < set.masks.size() ? set.masks[best] : Bitmap(set.width, set.height);
    }

  private:
    std::vector<BinaryMaskSet> sets_;
};

struct SelfPromptOptions {
    std::size_t max_views = 8;
    std::size_t prompts_per_view = 3;
    ExtractOptions extract;
};

struct SelfPromptResult {
    std::vector<std::size_t> visited;
    std::vector<std::vector<Pixel>> prompts;  ///< per visited view
    std::vector<std::optional<Bitmap>> masks; ///< per scene view; nullopt where not visited
    std::vector<double> votes;                ///< accumulated traced mass on the masks
    std::vector<std::uint32_t> selection;
};

/// Online segmentation: the prompter masks the current view, the masked Gaussians accumulate
/// their traced mass as votes, and the next view (cyclically after the reference) is prompted
/// at the projected centres of the highest-voted Gaussians visible there. The selection is
/// extract_object over the visited views.
inline SelfPromptResult self_prompt(const Scene &scene, std::size_t reference_view, std::span<const Pixel> points,
                                    const Prompter &prompter, const SelfPromptOptions &opts = {}) {
    const std::size_t L = scene.views.size();
    if (reference_view >= L)
        throw InvalidArgument("self_prompt: reference view out of range");
    if (points.empty())
        throw InvalidArgument("self_prompt: at least one point prompt required");
    if (!prompter)
        throw InvalidArgument("self_prompt: no prompter");
    detail::require(opts.max_views >= 1, "self_prompt: max_views must be >= 1");

    const std::size_t n = scene.gaussians.size();
    SelfPromptResult out;
    out.masks.assign(L, std::nullopt);
    out.votes.assign(n, 0.0);
    std::vector<Pixel> prompts(points.begin(), points.end());
    const std::size_t budget = std::min(opts.max_views, L);
    for (std::size_t k = 0; k < budget; ++k) {
        const std::size_t v = (reference_view + k) % L;
        Bitmap mask;
        try {
            mask = prompter(v, prompts);
        } catch (const ViewError &) {
            throw;
        } catch (const std::exception &e) {
            throw ViewError(v, std::string("prompter failed: ") + e.what());
        }
        detail::check_mask(mask, scene.views[v], v);
        const auto rows = trace_view(PreparedView(scene, v, opts.extract.trace.raster), detail::mask_map(mask),
                                     opts.extract.trace);
        for (std::size_t i = 0; i < n; ++i)
            out.votes[i] += rows.prob(i, 1);
        out.visited.push_back(v);
        out.prompts.push_back(prompts);
        out.masks[v] = std::move(mask);
        if (k + 1 == budget)
            break;

        const std::size_t u = (v + 1) % L;
        const auto &cam = scene.views[u];
        const auto c = render_contributions(PreparedView(scene, u, opts.extract.trace.raster));
        std::vector<double> mass(n, 0.0);
        for (const auto &e : c.entries)
            mass[e.gaussian] += e.weight;
        std::vector<std::uint32_t> order;
        for (std::uint32_t i = 0; i < n; ++i)
            if (out.votes[i] > 0.0 && mass[i] >= opts.extract.trace.vis_eps)
                order.push_back(i);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return out.votes[a] > out.votes[b]; });
        prompts.clear();
        for (auto i : order) {
            if (prompts.size() == opts.prompts_per_view)
                break;
            const auto p = cam.project(scene.gaussians[i].center);
            if (!p)
                continue;
            const int x = static_cast<int>(std::floor(p->x())), y = static_cast<int>(std::floor(p->y()));
            if (x >= 0 && y >= 0 && x < cam.width && y < cam.height)
                prompts.push_back({x, y});
        }
        if (prompts.empty())
            break;
    }
    out.selection = extract_object(scene, out.masks, opts.extract).selected;
    return out;
}

} // namespace gtrace

#endif // GTRACE_SEGMENT_HPP

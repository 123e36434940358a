// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_MASKS_HPP
#define GTRACE_MASKS_HPP

#include "gtrace/error.hpp"
#include "gtrace/image.hpp"
#include "gtrace/instance_map.hpp"
#include "gtrace/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gtrace {

/// Binary masks of one view plus an optional containment relation.
struct BinaryMaskSet {
    int width = 0;
    int height = 0;
    std::vector<Bitmap> masks;
    /// (j, k): mask j's footprint contains mask k's. Edges point from coarse to fine.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> contains;

    bool has_hierarchy() const { return !contains.empty(); }

    /// Masks that contain at least one other mask.
    std::vector<bool> coarse_flags() const {
        std::vector<bool> f(masks.size(), false);
        for (const auto &[j, k] : contains)
            f[j] = true;
        return f;
    }
};

/// Overlays all masks: each distinct covering-mask signature becomes one patch, IDs in
/// row-major first-occurrence order. Uncovered pixels get 0.
inline InstanceMap overlap_masks(const BinaryMaskSet &set) {
    for (std::size_t j = 0; j < set.masks.size(); ++j) {
        const auto &m = set.masks[j];
        if (m.width() != set.width || m.height() != set.height || m.channels() != 1)
            throw InvalidArgument("overlap_masks: mask " + std::to_string(j) + " does not fit the view");
        if (count_set(m) == 0)
            throw InvalidArgument("overlap_masks: mask " + std::to_string(j) + " is empty");
    }
    for (const auto &[j, k] : set.contains)
        detail::require(j < set.masks.size() && k < set.masks.size() && j != k, "overlap_masks: bad hierarchy edge");

    InstanceMap out;
    out.ids = LabelImage(set.width, set.height);
    out.signatures.push_back({});
    std::map<std::vector<std::uint32_t>, std::uint32_t> ids;
    std::vector<std::uint32_t> sig;
    for (std::size_t p = 0; p < out.ids.pixel_count(); ++p) {
        sig.clear();
        for (std::uint32_t j = 0; j < set.masks.size(); ++j)
            if (set.masks[j].data()[p])
                sig.push_back(j);
        if (sig.empty())
            continue;
        auto [it, fresh] = ids.emplace(sig, static_cast<std::uint32_t>(out.signatures.size()));
        if (fresh)
            out.signatures.push_back(sig);
        out.ids.data()[p] = it->second;
    }
    out.patch_count = static_cast<std::uint32_t>(out.signatures.size());
    out.pixel_counts.assign(out.patch_count, 0);
    for (auto id : out.ids.data())
        ++out.pixel_counts[id];
    return out;
}

/// One ground-truth object mask.
struct ObjectMask {
    InstanceId id;
    Bitmap mask;
};

/// Per-object masks of a label map, ascending ID, background skipped.
inline std::vector<ObjectMask> object_masks(const InstanceMap &map) {
    std::vector<ObjectMask> out;
    for (std::uint32_t id = 1; id < map.patch_count; ++id)
        if (id < map.pixel_counts.size() && map.pixel_counts[id] > 0)
            out.push_back({id, mask_of(map, id)});
    return out;
}

struct InjectorParams {
    double split_prob = 0.0; ///< per object, per view
    double merge_prob = 0.0; ///< per view: merge one pair of adjacent objects
    /// Per-view overrides; when non-empty, entry v replaces the scalar for view v.
    std::vector<double> split_prob_per_view;
    std::vector<double> merge_prob_per_view;
    /// Restricts splits and the first member of merges to this object when set.
    std::optional<InstanceId> split_object;
    std::optional<InstanceId> merge_object;
    int boundary_radius = 0; ///< dilate or erode every mask by this many pixels
    std::uint64_t seed = 0;
    /// Also emit one coarse mask per GT object (the union of its pieces) with containment edges.
    bool emit_hierarchy = false;

    void validate() const {
        auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        detail::require(prob(split_prob) && prob(merge_prob), "InjectorParams: probabilities must be in [0, 1]");
        for (double p : split_prob_per_view)
            detail::require(prob(p), "InjectorParams: probabilities must be in [0, 1]");
        for (double p : merge_prob_per_view)
            detail::require(prob(p), "InjectorParams: probabilities must be in [0, 1]");
        detail::require(boundary_radius >= 0, "InjectorParams: boundary_radius must be >= 0");
    }
};

namespace detail {

struct Box {
    int x0 = std::numeric_limits<int>::max(), y0 = std::numeric_limits<int>::max(), x1 = -1, y1 = -1;
    bool empty() const { return x1 < 0; }
};

inline Box bounding_box(const Bitmap &m) {
    Box b;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m(x, y)) {
                b.x0 = std::min(b.x0, x);
                b.y0 = std::min(b.y0, y);
                b.x1 = std::max(b.x1, x);
                b.y1 = std::max(b.y1, y);
            }
    return b;
}

/// Halves along the bounding box's long axis; nullopt when one half would be empty.
inline std::optional<std::pair<Bitmap, Bitmap>> split_long_axis(const Bitmap &m) {
    const Box b = bounding_box(m);
    if (b.empty())
        return std::nullopt;
    const bool horizontal = (b.x1 - b.x0) >= (b.y1 - b.y0);
    const int mid = horizontal ? (b.x0 + b.x1 + 1) / 2 : (b.y0 + b.y1 + 1) / 2;
    Bitmap lo(m.width(), m.height()), hi(m.width(), m.height());
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m(x, y))
                ((horizontal ? x : y) < mid ? lo : hi)(x, y) = 1;
    if (count_set(lo) == 0 || count_set(hi) == 0)
        return std::nullopt;
    return std::make_pair(std::move(lo), std::move(hi));
}

/// Morphological dilation (grow) or erosion with a disk of radius r.
inline Bitmap morph(const Bitmap &m, int r, bool grow) {
    if (r == 0)
        return m;
    Bitmap out(m.width(), m.height());
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            bool any = false, all = true;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    if (dx * dx + dy * dy > r * r)
                        continue;
                    const int xx = x + dx, yy = y + dy;
                    const bool in = xx >= 0 && yy >= 0 && xx < m.width() && yy < m.height() && m(xx, yy);
                    any |= in;
                    all &= in;
                }
            out(x, y) = (grow ? any : all) ? 1 : 0;
        }
    return out;
}

inline Bitmap mask_union(const Bitmap &a, const Bitmap &b) {
    Bitmap out = a;
    for (std::size_t p = 0; p < out.data().size(); ++p)
        out.data()[p] = static_cast<std::uint8_t>(a.data()[p] | b.data()[p]);
    return out;
}

/// Gap between two boxes (0 when they touch or overlap), Chebyshev style.
inline int box_gap(const Box &a, const Box &b) {
    const int gx = std::max({0, a.x0 - b.x1 - 1, b.x0 - a.x1 - 1});
    const int gy = std::max({0, a.y0 - b.y1 - 1, b.y0 - a.y1 - 1});
    return std::max(gx, gy);
}

} // namespace detail

/// Simulated segmenter inconsistency for one view: merges, splits and boundary noise applied
/// to the ground-truth object masks. `view` selects the per-view probability and RNG stream.
inline BinaryMaskSet inject_view(std::span<const ObjectMask> gt, int width, int height, std::size_t view,
                                 const InjectorParams &params) {
    params.validate();
    Rng rng(derive_seed(params.seed, "inject/view/" + std::to_string(view)));
    const double ps = view < params.split_prob_per_view.size() ? params.split_prob_per_view[view] : params.split_prob;
    const double pm = view < params.merge_prob_per_view.size() ? params.merge_prob_per_view[view] : params.merge_prob;

    // Pieces per object; a merge turns two objects into one group.
    struct Group {
        std::vector<std::size_t> objects;
        std::vector<Bitmap> pieces;
    };
    std::vector<Group> groups;
    std::vector<bool> used(gt.size(), false);

    if (gt.size() >= 2 && pm > 0.0 && uniform01(rng) < pm) {
        std::optional<std::size_t> a;
        if (params.merge_object) {
            for (std::size_t k = 0; k < gt.size(); ++k)
                if (gt[k].id == *params.merge_object)
                    a = k;
        } else {
            a = uniform_index(rng, gt.size());
        }
        if (a) {
            const auto box_a = detail::bounding_box(gt[*a].mask);
            std::size_t best = *a;
            int best_gap = std::numeric_limits<int>::max();
            for (std::size_t k = 0; k < gt.size(); ++k) {
                if (k == *a)
                    continue;
                const int gap = detail::box_gap(box_a, detail::bounding_box(gt[k].mask));
                if (gap < best_gap) {
                    best_gap = gap;
                    best = k;
                }
            }
            const auto lo = std::min(*a, best), hi = std::max(*a, best);
            groups.push_back({{lo, hi}, {detail::mask_union(gt[lo].mask, gt[hi].mask)}});
            used[lo] = used[hi] = true;
        }
    }
    for (std::size_t k = 0; k < gt.size(); ++k) {
        if (used[k])
            continue;
        Group g{{k}, {}};
        const bool eligible = !params.split_object || gt[k].id == *params.split_object;
        const double draw = ps > 0.0 ? uniform01(rng) : 1.0;
        std::optional<std::pair<Bitmap, Bitmap>> halves;
        if (eligible && draw < ps)
            halves = detail::split_long_axis(gt[k].mask);
        if (halves) {
            g.pieces.push_back(std::move(halves->first));
            g.pieces.push_back(std::move(halves->second));
        } else {
            g.pieces.push_back(gt[k].mask);
        }
        groups.push_back(std::move(g));
    }
    std::sort(groups.begin(), groups.end(),
              [](const Group &a, const Group &b) { return a.objects.front() < b.objects.front(); });

    BinaryMaskSet out;
    out.width = width;
    out.height = height;
    std::vector<std::vector<std::uint32_t>> piece_index(groups.size());
    for (std::size_t gi = 0; gi < groups.size(); ++gi)
        for (const auto &piece : groups[gi].pieces) {
            Bitmap m = piece;
            if (params.boundary_radius > 0)
                m = detail::morph(m, params.boundary_radius, uniform01(rng) < 0.5);
            if (count_set(m) == 0)
                continue;
            piece_index[gi].push_back(static_cast<std::uint32_t>(out.masks.size()));
            out.masks.push_back(std::move(m));
        }
    if (params.emit_hierarchy) {
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            if (piece_index[gi].empty())
                continue;
            Bitmap coarse = out.masks[piece_index[gi].front()];
            for (auto j : piece_index[gi])
                coarse = detail::mask_union(coarse, out.masks[j]);
            const auto c = static_cast<std::uint32_t>(out.masks.size());
            out.masks.push_back(std::move(coarse));
            for (auto j : piece_index[gi])
                out.contains.emplace_back(c, j);
        }
    }
    return out;
}

/// inject_view over every view's ground-truth map.
inline std::vector<BinaryMaskSet> inject_inconsistency(std::span<const InstanceMap> gt_maps,
                                                       const InjectorParams &params) {
    params.validate();
    std::vector<BinaryMaskSet> out;
    out.reserve(gt_maps.size());
    for (std::size_t v = 0; v < gt_maps.size(); ++v) {
        const auto objects = object_masks(gt_maps[v]);
        out.push_back(inject_view(objects, gt_maps[v].width(), gt_maps[v].height(), v, params));
    }
    return out;
}

} // namespace gtrace

#endif // GTRACE_MASKS_HPP

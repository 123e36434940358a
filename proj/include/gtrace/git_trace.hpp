// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_GIT_TRACE_HPP
#define GTRACE_GIT_TRACE_HPP

#include "gtrace/error.hpp"
#include "gtrace/image_io.hpp"
#include "gtrace/instance_map.hpp"
#include "gtrace/rasterizer.hpp"
#include "gtrace/scene.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gtrace {

struct TraceOptions {
    RasterOptions raster;
    double vis_eps = 1e-4;   ///< total mass below which a Gaussian counts as not visible in a view
    double trace_eps = 1e-4; ///< probability above which a Gaussian belongs to a patch
};

struct PatchProb {
    std::uint32_t patch;
    double prob;

    bool operator==(const PatchProb &) const = default;
};

/// Sparse per-Gaussian patch distributions of one view (CSR, rows sorted by patch ID).
/// Row i is empty when Gaussian i is not visible in the view.
struct ViewWeightRows {
    std::uint32_t patch_count = 1;
    std::vector<std::size_t> offsets; ///< size N + 1
    std::vector<PatchProb> entries;
    std::vector<double> mass; ///< total blend weight per Gaussian before normalisation
    std::size_t fragment_count = 0;

    std::size_t size() const { return mass.size(); }
    std::span<const PatchProb> row(std::size_t i) const {
        return {entries.data() + offsets[i], offsets[i + 1] - offsets[i]};
    }
    bool visible(std::size_t i) const { return offsets[i + 1] > offsets[i]; }

    /// W[i, patch]; zero when absent.
    double prob(std::size_t i, std::uint32_t patch) const {
        for (const auto &e : row(i))
            if (e.patch == patch)
                return e.prob;
        return 0.0;
    }
};

inline constexpr std::int32_t kNotVisible = -1;

/// Conceptual N x T x L tensor stored as one sparse ViewWeightRows per view, plus the
/// N x L table of each row's argmax patch (kNotVisible for empty rows).
struct WeightMatrix {
    std::size_t gaussian_count = 0;
    std::vector<ViewWeightRows> views;
    std::vector<std::int32_t> argmax_trace; ///< row-major [gaussian * L + view]

    std::size_t view_count() const { return views.size(); }
    std::int32_t argmax(std::size_t gaussian, std::size_t view) const {
        return argmax_trace[gaussian * views.size() + view];
    }
};

/// argmax patch of a row, ties to the smaller patch ID; kNotVisible for empty rows.
inline std::int32_t row_argmax(std::span<const PatchProb> row) {
    std::int32_t best = kNotVisible;
    double best_p = -1.0;
    for (const auto &e : row)
        if (e.prob > best_p) {
            best_p = e.prob;
            best = static_cast<std::int32_t>(e.patch);
        }
    return best;
}

/// Reverse rasterisation of one view: every pixel's patch label is attributed to the
/// Gaussians blended at that pixel in proportion to their blend weight. Unlabeled pixels
/// feed the background bucket (patch 0).
inline ViewWeightRows trace_view(const PreparedView &pv, const InstanceMap &map, const TraceOptions &opts = {}) {
    const auto &view = pv.view();
    if (map.width() != view.width || map.height() != view.height)
        throw InvalidArgument("trace_view: instance map is " + std::to_string(map.width()) + "x" +
                              std::to_string(map.height()) + ", view is " + std::to_string(view.width) + "x" +
                              std::to_string(view.height));
    const ContributionMap contrib = render_contributions(pv);
    const std::size_t n = pv.scene().gaussians.size();

    // Per-Gaussian (patch, mass) lists, accumulated in row-major pixel order.
    std::vector<std::vector<PatchProb>> acc(n);
    std::vector<double> total(n, 0.0);
    for (std::size_t p = 0; p < contrib.pixel_count(); ++p) {
        const std::uint32_t patch = map.at(p);
        if (patch >= map.patch_count)
            throw InvalidArgument("trace_view: pixel label " + std::to_string(patch) + " >= patch_count");
        for (const auto &c : contrib.at(p)) {
            total[c.gaussian] += c.weight;
            auto &row = acc[c.gaussian];
            auto it = std::find_if(row.begin(), row.end(), [&](const PatchProb &e) { return e.patch == patch; });
            if (it == row.end())
                row.push_back({patch, c.weight});
            else
                it->prob += c.weight;
        }
    }

    ViewWeightRows out;
    out.patch_count = map.patch_count;
    out.fragment_count = contrib.fragment_count;
    out.mass = total;
    out.offsets.reserve(n + 1);
    out.offsets.push_back(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (total[i] >= opts.vis_eps) {
            auto &row = acc[i];
            std::sort(row.begin(), row.end(), [](const PatchProb &a, const PatchProb &b) { return a.patch < b.patch; });
            for (auto &e : row)
                out.entries.push_back({e.patch, e.prob / total[i]});
        }
        out.offsets.push_back(out.entries.size());
    }
    return out;
}

inline ViewWeightRows trace_view(const Scene &scene, std::size_t view, const InstanceMap &map,
                                 const TraceOptions &opts = {}) {
    return trace_view(PreparedView(scene, view, opts.raster), map, opts);
}

inline void fill_argmax(WeightMatrix &wm) {
    const std::size_t L = wm.views.size();
    wm.argmax_trace.assign(wm.gaussian_count * L, kNotVisible);
    for (std::size_t v = 0; v < L; ++v)
        for (std::size_t i = 0; i < wm.gaussian_count; ++i)
            wm.argmax_trace[i * L + v] = row_argmax(wm.views[v].row(i));
}

/// Traces every view in turn. Only one view's contribution lists are alive at a time.
inline WeightMatrix trace_all(const Scene &scene, std::span<const InstanceMap> maps, const TraceOptions &opts = {}) {
    if (maps.size() != scene.views.size())
        throw InvalidArgument("trace_all: " + std::to_string(maps.size()) + " instance maps for " +
                              std::to_string(scene.views.size()) + " views");
    WeightMatrix wm;
    wm.gaussian_count = scene.gaussians.size();
    wm.views.reserve(maps.size());
    for (std::size_t v = 0; v < maps.size(); ++v) {
        try {
            wm.views.push_back(trace_view(scene, v, maps[v], opts));
        } catch (const ViewError &) {
            throw;
        } catch (const Error &e) {
            throw ViewError(v, e.what());
        }
    }
    fill_argmax(wm);
    return wm;
}

/// Gaussians whose probability on (view, patch) exceeds trace_eps, ascending.
inline std::vector<std::uint32_t> trace_patch_gaussians(const WeightMatrix &wm, std::size_t view, std::uint32_t patch,
                                                        double trace_eps) {
    if (view >= wm.views.size())
        throw InvalidArgument("trace_patch_gaussians: unknown view " + std::to_string(view));
    const auto &rows = wm.views[view];
    if (patch >= rows.patch_count)
        throw InvalidArgument("trace_patch_gaussians: unknown patch " + std::to_string(patch) + " in view " +
                              std::to_string(view));
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows.prob(i, patch) > trace_eps)
            out.push_back(static_cast<std::uint32_t>(i));
    return out;
}

/// Views in which the Gaussian has a non-empty row.
inline std::vector<std::size_t> visible_views(const WeightMatrix &wm, std::size_t gaussian) {
    if (gaussian >= wm.gaussian_count)
        throw InvalidArgument("visible_views: gaussian " + std::to_string(gaussian) + " out of range");
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < wm.views.size(); ++v)
        if (wm.views[v].visible(gaussian))
            out.push_back(v);
    return out;
}

/// For each view and patch, the Gaussians traced to it (inverse of the rows).
struct PatchIndex {
    std::vector<std::vector<std::vector<std::uint32_t>>> members; ///< [view][patch] -> ascending gaussians

    PatchIndex(const WeightMatrix &wm, double trace_eps) {
        members.resize(wm.views.size());
        for (std::size_t v = 0; v < wm.views.size(); ++v) {
            const auto &rows = wm.views[v];
            members[v].resize(rows.patch_count);
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (const auto &e : rows.row(i))
                    if (e.prob > trace_eps)
                        members[v][e.patch].push_back(static_cast<std::uint32_t>(i));
        }
    }
};

// Weight matrix dump, little endian:
//   "GTWM" | u32 version=1 | u32 N | u32 L | u32 patch_count[L] | u64 K |
//   K x { u32 view | u32 gaussian | u32 patch | f64 prob }
// Triplets are ordered by (view, gaussian, patch). Masses are not stored.

inline std::string encode_weight_matrix(const WeightMatrix &wm) {
    std::string out = "GTWM";
    detail::put_u32le(out, 1);
    detail::put_u32le(out, static_cast<std::uint32_t>(wm.gaussian_count));
    detail::put_u32le(out, static_cast<std::uint32_t>(wm.views.size()));
    std::uint64_t k = 0;
    for (const auto &v : wm.views) {
        detail::put_u32le(out, v.patch_count);
        k += v.entries.size();
    }
    for (int b = 0; b < 8; ++b)
        out.push_back(static_cast<char>((k >> (8 * b)) & 0xff));
    for (std::size_t v = 0; v < wm.views.size(); ++v) {
        const auto &rows = wm.views[v];
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (const auto &e : rows.row(i)) {
                detail::put_u32le(out, static_cast<std::uint32_t>(v));
                detail::put_u32le(out, static_cast<std::uint32_t>(i));
                detail::put_u32le(out, e.patch);
                const auto bits = std::bit_cast<std::uint64_t>(e.prob);
                for (int b = 0; b < 8; ++b)
                    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
            }
        }
    }
    return out;
}

inline WeightMatrix decode_weight_matrix(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 4) != "GTWM")
        throw ParseError(0, "bad weight matrix magic");
    if (detail::get_u32le(bytes, 4) != 1)
        throw ParseError(4, "unsupported weight matrix version");
    const std::size_t n = detail::get_u32le(bytes, 8);
    const std::size_t L = detail::get_u32le(bytes, 12);
    std::size_t at = 16;
    WeightMatrix wm;
    wm.gaussian_count = n;
    wm.views.resize(L);
    for (auto &v : wm.views) {
        v.patch_count = detail::get_u32le(bytes, at);
        at += 4;
    }
    auto u64_at = [&](std::size_t pos) {
        if (pos + 8 > bytes.size())
            throw ParseError(pos, "truncated u64");
        std::uint64_t x = 0;
        for (int b = 0; b < 8; ++b)
            x |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + b])) << (8 * b);
        return x;
    };
    const std::uint64_t k = u64_at(at);
    at += 8;
    std::vector<std::vector<std::vector<PatchProb>>> rows(L, std::vector<std::vector<PatchProb>>(n));
    for (std::uint64_t t = 0; t < k; ++t) {
        const auto v = detail::get_u32le(bytes, at);
        const auto i = detail::get_u32le(bytes, at + 4);
        const auto p = detail::get_u32le(bytes, at + 8);
        const double prob = std::bit_cast<double>(u64_at(at + 12));
        if (v >= L || i >= n || p >= wm.views[v].patch_count)
            throw ParseError(at, "triplet index out of range");
        rows[v][i].push_back({p, prob});
        at += 20;
    }
    for (std::size_t v = 0; v < L; ++v) {
        auto &out = wm.views[v];
        out.mass.assign(n, 0.0);
        out.offsets.assign(1, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto &r = rows[v][i];
            std::sort(r.begin(), r.end(), [](const PatchProb &a, const PatchProb &b) { return a.patch < b.patch; });
            out.entries.insert(out.entries.end(), r.begin(), r.end());
            out.offsets.push_back(out.entries.size());
        }
    }
    fill_argmax(wm);
    return wm;
}

} // namespace gtrace

#endif // GTRACE_GIT_TRACE_HPP

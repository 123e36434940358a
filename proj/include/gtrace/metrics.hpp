// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_METRICS_HPP
#define GTRACE_METRICS_HPP

#include "gtrace/error.hpp"
#include "gtrace/image.hpp"
#include "gtrace/instance_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <tuple>
#include <vector>

namespace gtrace {

struct InstanceMatch {
    std::uint32_t gt;
    std::uint32_t pred;
    std::size_t intersection;
    double iou;
    double accuracy; ///< |gt ∩ pred| / |gt|
};

struct MapIou {
    std::vector<InstanceMatch> matches; ///< ascending GT ID
    std::vector<std::uint32_t> unmatched_gt;
    double mean_iou = 0.0; ///< over matched GT instances; 0 when nothing matched
    double mean_acc = 0.0;
};

/// Instance IoU of `pred` against `gt`. IDs are paired greedily by descending intersection
/// (ties to smaller GT then smaller predicted ID); ID 0 is excluded on both sides.
inline MapIou map_iou(const LabelImage &pred, const LabelImage &gt) {
    if (pred.width() != gt.width() || pred.height() != gt.height())
        throw InvalidArgument("map_iou: dimension mismatch");
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> inter;
    std::map<std::uint32_t, std::size_t> gt_size, pred_size;
    for (std::size_t p = 0; p < gt.pixel_count(); ++p) {
        const auto g = gt.data()[p], q = pred.data()[p];
        if (g)
            ++gt_size[g];
        if (q)
            ++pred_size[q];
        if (g && q)
            ++inter[{g, q}];
    }
    std::vector<std::tuple<std::size_t, std::uint32_t, std::uint32_t>> cand;
    for (const auto &[k, n] : inter)
        cand.emplace_back(n, k.first, k.second);
    std::sort(cand.begin(), cand.end(), [](const auto &a, const auto &b) {
        if (std::get<0>(a) != std::get<0>(b))
            return std::get<0>(a) > std::get<0>(b);
        return std::make_pair(std::get<1>(a), std::get<2>(a)) < std::make_pair(std::get<1>(b), std::get<2>(b));
    });
    std::map<std::uint32_t, InstanceMatch> by_gt;
    std::map<std::uint32_t, bool> pred_used;
    for (const auto &[n, g, q] : cand) {
        if (by_gt.count(g) || pred_used[q])
            continue;
        pred_used[q] = true;
        const double uni = static_cast<double>(gt_size[g] + pred_size[q] - n);
        by_gt[g] = {g, q, n, static_cast<double>(n) / uni, static_cast<double>(n) / static_cast<double>(gt_size[g])};
    }
    MapIou out;
    for (const auto &[g, n] : gt_size) {
        auto it = by_gt.find(g);
        if (it == by_gt.end()) {
            out.unmatched_gt.push_back(g);
            continue;
        }
        out.matches.push_back(it->second);
        out.mean_iou += it->second.iou;
        out.mean_acc += it->second.accuracy;
    }
    if (!out.matches.empty()) {
        out.mean_iou /= static_cast<double>(out.matches.size());
        out.mean_acc /= static_cast<double>(out.matches.size());
    }
    return out;
}

inline MapIou map_iou(const InstanceMap &pred, const InstanceMap &gt) { return map_iou(pred.ids, gt.ids); }

/// IoU of two binary masks; 1 when both are empty.
inline double mask_iou(const Bitmap &a, const Bitmap &b) {
    detail::require(a.same_shape(b), "mask_iou: dimension mismatch");
    std::size_t i = 0, u = 0;
    for (std::size_t p = 0; p < a.data().size(); ++p) {
        const bool x = a.data()[p] != 0, y = b.data()[p] != 0;
        i += x && y;
        u += x || y;
    }
    return u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
}

inline constexpr double kPsnrExact = std::numeric_limits<double>::infinity();

inline double psnr_from_mse(double mse) { return mse == 0.0 ? kPsnrExact : 10.0 * std::log10(1.0 / mse); }

/// PSNR over the whole image, for images with values in [0, 1].
inline double psnr(const ImageF &render, const ImageF &reference) {
    detail::require(render.same_shape(reference), "psnr: dimension mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < render.data().size(); ++i) {
        const double d = render.data()[i] - reference.data()[i];
        se += d * d;
    }
    return psnr_from_mse(se / static_cast<double>(render.data().size()));
}

/// PSNR inside the mask's bounding box grown by `margin` pixels and clamped to the image.
inline double psnr_restricted(const ImageF &render, const ImageF &reference, const Bitmap &gt_mask, int margin = 10) {
    detail::require(render.same_shape(reference), "psnr_restricted: dimension mismatch");
    detail::require(gt_mask.width() == render.width() && gt_mask.height() == render.height(),
                    "psnr_restricted: mask does not fit the image");
    int x0 = render.width(), y0 = render.height(), x1 = -1, y1 = -1;
    for (int y = 0; y < gt_mask.height(); ++y)
        for (int x = 0; x < gt_mask.width(); ++x)
            if (gt_mask(x, y)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0)
        throw InvalidArgument("psnr_restricted: empty mask");
    x0 = std::max(0, x0 - margin);
    y0 = std::max(0, y0 - margin);
    x1 = std::min(render.width() - 1, x1 + margin);
    y1 = std::min(render.height() - 1, y1 + margin);
    double se = 0.0;
    std::size_t n = 0;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            for (int c = 0; c < render.channels(); ++c) {
                const double d = render(x, y, c) - reference(x, y, c);
                se += d * d;
                ++n;
            }
    return psnr_from_mse(se / static_cast<double>(n));
}

/// Pixels where any channel exceeds `eps`.
inline Bitmap mask_from_render(const ImageF &render, double eps = 1e-6) {
    Bitmap m(render.width(), render.height());
    for (std::size_t p = 0; p < render.pixel_count(); ++p)
        for (double v : render.pixel(p))
            if (v > eps) {
                m.data()[p] = 1;
                break;
            }
    return m;
}

} // namespace gtrace

#endif // GTRACE_METRICS_HPP

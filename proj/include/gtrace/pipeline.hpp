// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_PIPELINE_HPP
#define GTRACE_PIPELINE_HPP

#include "gtrace/config.hpp"
#include "gtrace/contrastive.hpp"
#include "gtrace/git_trace.hpp"
#include "gtrace/masks.hpp"
#include "gtrace/merge.hpp"
#include "gtrace/metrics.hpp"
#include "gtrace/rasterizer.hpp"
#include "gtrace/refine.hpp"
#include "gtrace/scene.hpp"
#include "gtrace/scene_io.hpp"
#include "gtrace/segment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gtrace {

using ojson = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;

/// {schema_version, stage, metrics, timings}; timings stay empty unless supplied.
inline ojson make_report(const std::string &stage, ojson metrics, ojson timings = ojson::object()) {
    ojson r;
    r["schema_version"] = kReportSchemaVersion;
    r["stage"] = stage;
    r["metrics"] = std::move(metrics);
    r["timings"] = std::move(timings);
    return r;
}

/// Non-finite values are written as strings so reports stay valid JSON.
inline ojson number(double x) {
    if (std::isnan(x))
        return "nan";
    if (std::isinf(x))
        return x > 0 ? "inf" : "-inf";
    return x;
}

inline void check_report(const nlohmann::json &r) {
    if (!r.is_object() || !r.contains("schema_version") || !r.contains("stage") || !r.contains("metrics"))
        throw ValidationError("report", "missing schema_version, stage or metrics");
    if (r["schema_version"] != kReportSchemaVersion)
        throw ValidationError("report", "schema_version " + r["schema_version"].dump() + " is not supported");
}

/// Training and held-out view positions.
struct ViewSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> heldout;
};

inline ViewSplit split_views(std::size_t view_count, std::span<const std::size_t> heldout) {
    ViewSplit s;
    for (std::size_t v = 0; v < view_count; ++v)
        (std::find(heldout.begin(), heldout.end(), v) != heldout.end() ? s.heldout : s.train).push_back(v);
    return s;
}

/// Copy of `scene` keeping only the listed views (in that order).
inline Scene select_views(const Scene &scene, std::span<const std::size_t> views) {
    Scene out;
    out.gaussians = scene.gaussians;
    out.feature_dim = scene.feature_dim;
    for (auto v : views)
        out.views.push_back(scene.views.at(v));
    return out;
}

inline std::vector<std::uint32_t> object_ids(std::span<const InstanceMap> maps) {
    std::vector<std::uint32_t> ids;
    for (const auto &m : maps)
        for (std::uint32_t id = 1; id < m.pixel_counts.size(); ++id)
            if (m.pixel_counts[id] > 0 && std::find(ids.begin(), ids.end(), id) == ids.end())
                ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Stage kernels. Each is a pure function of its inputs.

inline Scene stage_generate(const RunConfig &cfg) {
    return cfg.scene_file.empty() ? generate_scene(cfg.scene) : load_scene_file(cfg.scene_file);
}

inline std::vector<InstanceMap> stage_gtmaps(const Scene &scene, const RasterOptions &raster) {
    std::vector<InstanceMap> maps;
    for (std::size_t v = 0; v < scene.views.size(); ++v)
        maps.push_back(render_gt_instance_map(scene, v, raster));
    return maps;
}

struct Injected {
    std::vector<BinaryMaskSet> masks;
    std::vector<InstanceMap> patches;
};

inline Injected stage_inject(std::span<const InstanceMap> gt, const InjectorParams &params) {
    Injected out;
    out.masks = inject_inconsistency(gt, params);
    for (const auto &m : out.masks)
        out.patches.push_back(overlap_masks(m));
    return out;
}

/// Per-view instance mIoU and mAcc of `pred` against `gt`.
inline ojson map_metrics(std::span<const InstanceMap> pred, std::span<const InstanceMap> gt) {
    detail::require(pred.size() == gt.size(), "map_metrics: view counts differ");
    ojson j;
    ojson miou = ojson::array(), macc = ojson::array();
    double lo = 1.0, sum = 0.0;
    for (std::size_t v = 0; v < pred.size(); ++v) {
        const auto r = map_iou(pred[v], gt[v]);
        miou.push_back(r.mean_iou);
        macc.push_back(r.mean_acc);
        lo = std::min(lo, r.mean_iou);
        sum += r.mean_iou;
    }
    j["per_view_miou"] = miou;
    j["per_view_macc"] = macc;
    j["min_miou"] = pred.empty() ? 0.0 : lo;
    j["mean_miou"] = pred.empty() ? 0.0 : sum / double(pred.size());
    return j;
}

struct MergeStage {
    MergeResult result;
    ojson metrics;
};

inline MergeStage stage_merge(const WeightMatrix &wm, const Injected &inj, std::span<const InstanceMap> gt,
                              const MergeOptions &opts) {
    MergeStage s;
    s.result = merge_patches(wm, inj.patches, inj.masks, opts);
    std::size_t merged = 0;
    for (const auto &p : s.result.log)
        merged += p.merged;
    s.metrics["theta"] = opts.theta;
    s.metrics["patch_keys"] = s.result.keys.size();
    s.metrics["instance_count"] = s.result.instance_count;
    s.metrics["candidates_above_theta"] = s.result.log.size();
    s.metrics["unions"] = merged;
    s.metrics["pre_merge"] = map_metrics(inj.patches, gt);
    s.metrics["post_merge"] = map_metrics(s.result.maps, gt);
    return s;
}

inline RefinementResult stage_refine(const Scene &train, std::span<const InstanceMap> maps, const RunConfig &cfg) {
    Rng rng(cfg.stream("refine"));
    return run_refinement(train, maps, cfg.refine, rng);
}

inline ojson refine_metrics(const RefinementResult &r) {
    ojson j;
    j["rounds"] = ojson::array();
    for (const auto &rep : r.rounds)
        j["rounds"].push_back(rep.to_json());
    j["psnr_before"] = number(r.psnr_before);
    j["psnr_after"] = number(r.psnr_after);
    j["n_gaussians"] = r.scene.gaussians.size();
    return j;
}

/// Fraction of gt_instance == id Gaussians selected, and fraction of the selection carrying
/// another label. Unlabeled Gaussians (split children) count toward neither.
struct Recovery {
    double recovered = 0.0;
    double contamination = 0.0;
    std::size_t n_gt = 0;
    std::size_t n_selected = 0;
};

inline Recovery recovery(const Scene &scene, std::span<const std::uint32_t> selection, InstanceId id) {
    Recovery r;
    std::size_t hit = 0, foreign = 0;
    for (const auto &g : scene.gaussians)
        r.n_gt += g.gt_instance == id;
    for (auto i : selection) {
        const auto &g = scene.gaussians.at(i);
        if (g.gt_instance == id)
            ++hit;
        else if (g.gt_instance)
            ++foreign;
    }
    r.n_selected = selection.size();
    r.recovered = r.n_gt ? double(hit) / double(r.n_gt) : 0.0;
    r.contamination = selection.empty() ? 0.0 : double(foreign) / double(selection.size());
    return r;
}

/// Per-object results of feature-query segmentation and extraction.
struct ObjectQuery {
    InstanceId id = 0;
    QueryResult query;             ///< on the training views
    std::vector<Bitmap> heldout;   ///< predicted masks on the held-out views
    std::vector<double> heldout_iou;
    Recovery extraction;
};

inline double mean(std::span<const double> x) {
    double s = 0.0;
    for (double v : x)
        s += v;
    return x.empty() ? 0.0 : s / double(x.size());
}

inline std::vector<ObjectQuery> stage_segment(const Scene &lifted, const ViewSplit &split,
                                              std::span<const InstanceMap> gt_all, const RunConfig &cfg) {
    const Scene train = select_views(lifted, split.train);
    const Scene held = select_views(lifted, split.heldout);
    detail::require(cfg.reference_view < split.train.size(), "segment: reference view out of range");
    const auto &ref_map = gt_all[split.train[cfg.reference_view]];
    std::vector<ObjectQuery> out;
    for (auto id : object_ids(std::span(&ref_map, 1))) {
        ObjectQuery oq;
        oq.id = id;
        oq.query = query_segment(train, cfg.reference_view, mask_of(ref_map, id), cfg.query);
        oq.heldout = predict_masks(held, oq.query.queries, oq.query.threshold, cfg.query);
        for (std::size_t k = 0; k < split.heldout.size(); ++k)
            oq.heldout_iou.push_back(mask_iou(oq.heldout[k], mask_of(gt_all[split.heldout[k]], id)));
        oq.extraction = recovery(lifted, oq.query.selection, id);
        out.push_back(std::move(oq));
    }
    return out;
}

inline ojson segment_metrics(std::span<const ObjectQuery> qs) {
    ojson j = ojson::array();
    for (const auto &q : qs) {
        ojson o;
        o["object"] = q.id;
        o["queries"] = q.query.queries.size();
        o["threshold"] = q.query.threshold;
        o["reference_iou"] = q.query.reference_iou;
        o["heldout_iou"] = q.heldout_iou;
        o["heldout_miou"] = mean(q.heldout_iou);
        o["n_selected"] = q.extraction.n_selected;
        o["n_gt"] = q.extraction.n_gt;
        o["recovered"] = q.extraction.recovered;
        o["contamination"] = q.extraction.contamination;
        j.push_back(o);
    }
    return j;
}

/// Extraction scored from renders: the selection rendered alone on black, masked where
/// any channel is non-zero, against the ground-truth mask; PSNR in the mask's expanded box
/// against the ground-truth object rendered alone.
inline ojson extraction_render_metrics(const Scene &scene, std::span<const std::uint32_t> selection, InstanceId id,
                                       const Scene &reference, std::span<const InstanceMap> gt,
                                       const RasterOptions &raster) {
    std::vector<std::uint32_t> ref_sel;
    for (std::uint32_t i = 0; i < reference.gaussians.size(); ++i)
        if (reference.gaussians[i].gt_instance == id)
            ref_sel.push_back(i);
    const Scene mine = subset_scene(scene, selection);
    const Scene theirs = subset_scene(reference, ref_sel);
    std::vector<double> iou, db;
    for (std::size_t v = 0; v < scene.views.size(); ++v) {
        const auto gt_mask = mask_of(gt[v], id);
        if (count_set(gt_mask) == 0)
            continue;
        const auto img = render(mine, v, raster).color;
        iou.push_back(mask_iou(mask_from_render(img), gt_mask));
        db.push_back(psnr_restricted(img, render(theirs, v, raster).color, gt_mask));
    }
    ojson j;
    j["mask_iou"] = iou;
    j["mean_mask_iou"] = mean(iou);
    ojson p = ojson::array();
    for (double x : db)
        p.push_back(number(x));
    j["psnr_restricted"] = p;
    return j;
}

struct ObjectPrompt {
    InstanceId id = 0;
    SelfPromptResult result;
    std::vector<double> heldout_iou;
};

inline std::vector<ObjectPrompt> stage_selfprompt(const Scene &scene, const ViewSplit &split,
                                                  std::span<const InstanceMap> gt_all, const RunConfig &cfg) {
    const Scene train = select_views(scene, split.train);
    std::vector<InstanceMap> gt_train;
    for (auto v : split.train)
        gt_train.push_back(gt_all[v]);
    const auto noisy = inject_inconsistency(gt_train, cfg.selfprompt_noise);
    const OraclePrompter oracle(noisy);
    const auto &ref_map = gt_train[cfg.reference_view];
    std::vector<ObjectPrompt> out;
    for (auto id : object_ids(std::span(&ref_map, 1))) {
        // Initial prompt: the mask pixel nearest the mask's centroid.
        const auto m = mask_of(ref_map, id);
        double cx = 0.0, cy = 0.0, n = 0.0;
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x)
                if (m(x, y)) {
                    cx += x;
                    cy += y;
                    n += 1.0;
                }
        cx /= n;
        cy /= n;
        Pixel start;
        double best = 1e300;
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x)
                if (m(x, y) && (x - cx) * (x - cx) + (y - cy) * (y - cy) < best) {
                    best = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    start = {x, y};
                }
        ObjectPrompt op;
        op.id = id;
        op.result = self_prompt(train, cfg.reference_view, std::span(&start, 1), oracle, cfg.selfprompt);
        for (auto v : split.heldout)
            op.heldout_iou.push_back(mask_iou(selection_mask(scene, v, op.result.selection, cfg.raster), mask_of(gt_all[v], id)));
        out.push_back(std::move(op));
    }
    return out;
}

inline ojson selfprompt_metrics(const Scene &scene, std::span<const ObjectPrompt> ps) {
    ojson j = ojson::array();
    for (const auto &p : ps) {
        const auto rec = recovery(scene, p.result.selection, p.id);
        ojson o;
        o["object"] = p.id;
        o["visited"] = p.result.visited;
        o["heldout_iou"] = p.heldout_iou;
        o["heldout_miou"] = mean(p.heldout_iou);
        o["n_selected"] = rec.n_selected;
        o["recovered"] = rec.recovered;
        o["contamination"] = rec.contamination;
        j.push_back(o);
    }
    return j;
}

} // namespace gtrace

#endif // GTRACE_PIPELINE_HPP

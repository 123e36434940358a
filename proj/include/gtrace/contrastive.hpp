// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_CONTRASTIVE_HPP
#define GTRACE_CONTRASTIVE_HPP

#include "gtrace/error.hpp"
#include "gtrace/instance_map.hpp"
#include "gtrace/rasterizer.hpp"
#include "gtrace/rng.hpp"
#include "gtrace/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace gtrace {

/// How pairwise logits are formed from squared feature distances.
enum class LogitForm {
    /// logit = exp(-tau * |f1 - f2|^2), i.e. the kernel similarity itself is the logit.
    DoubleExp,
    /// logit = -tau * |f1 - f2|^2, evaluated with log-sum-exp.
    LogDomain,
};

struct ContrastiveConfig {
    double lr = 1e-5;
    double tau = 0.01;
    std::size_t batch = 256; ///< |U|, pixels per step
    std::size_t steps = 2000;
    bool balanced = true; ///< uniform over instances, then uniform within; otherwise uniform over labeled pixels
    LogitForm form = LogitForm::DoubleExp;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    RasterOptions raster;

    void validate() const {
        detail::require(tau > 0.0, "ContrastiveConfig: tau must be > 0");
        detail::require(batch >= 2, "ContrastiveConfig: batch must be >= 2");
        detail::require(lr > 0.0, "ContrastiveConfig: lr must be > 0");
        detail::require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                        "ContrastiveConfig: betas must be in [0, 1)");
        detail::require(adam_eps > 0.0, "ContrastiveConfig: adam_eps must be > 0");
    }
};

/// sim(f1, f2; tau) = exp(-tau |f1 - f2|^2).
inline double feature_similarity(const VecX &a, const VecX &b, double tau) {
    return std::exp(-tau * (a - b).squaredNorm());
}

struct ContrastiveLoss {
    double loss = 0.0;
    std::vector<VecX> grad; ///< dL/dF[u] for every sampled pixel, in sample order
};

/// Contrastive loss over sampled feature vectors with their instance labels. Positives of u
/// are the same-label samples, u itself included.
inline ContrastiveLoss contrastive_loss(std::span<const VecX> features, std::span<const std::uint32_t> labels,
                                        double tau, LogitForm form = LogitForm::DoubleExp) {
    const std::size_t n = features.size();
    detail::require(n >= 2, "contrastive_loss: at least two samples required");
    detail::require(labels.size() == n, "contrastive_loss: one label per sample required");
    detail::require(tau > 0.0, "contrastive_loss: tau must be > 0");
    for (auto l : labels)
        if (l == 0)
            throw InvalidArgument("contrastive_loss: sampled pixel is unlabeled");
    const Eigen::Index d = features[0].size();
    for (const auto &f : features)
        detail::require(f.size() == d, "contrastive_loss: feature dimensions differ");

    // s[u][v] = -tau |f_u - f_v|^2; logit = exp(s) or s.
    std::vector<double> s(n * n, 0.0);
    for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = u + 1; v < n; ++v)
            s[u * n + v] = s[v * n + u] = -tau * (features[u] - features[v]).squaredNorm();
    const bool dbl = form == LogitForm::DoubleExp;

    ContrastiveLoss out;
    out.grad.assign(n, VecX::Zero(d));
    std::vector<double> logit(n), coef(n);
    for (std::size_t u = 0; u < n; ++u) {
        double mx = -1e300;
        for (std::size_t v = 0; v < n; ++v) {
            logit[v] = dbl ? std::exp(s[u * n + v]) : s[u * n + v];
            mx = std::max(mx, logit[v]);
        }
        double zall = 0.0, zpos = 0.0;
        for (std::size_t v = 0; v < n; ++v) {
            const double e = std::exp(logit[v] - mx);
            zall += e;
            if (labels[v] == labels[u])
                zpos += e;
        }
        out.loss += std::log(zall) - std::log(zpos);
        // dl_u/dlogit_v = e_v / zall - [v in U+] e_v / zpos; then through the logit form.
        for (std::size_t v = 0; v < n; ++v) {
            const double e = std::exp(logit[v] - mx);
            double c = e / zall - (labels[v] == labels[u] ? e / zpos : 0.0);
            if (dbl)
                c *= logit[v];
            coef[v] = c;
        }
        // ds_uv/df_u = -2 tau (f_u - f_v), ds_uv/df_v = +2 tau (f_u - f_v)
        for (std::size_t v = 0; v < n; ++v) {
            if (v == u || coef[v] == 0.0)
                continue;
            const VecX g = (-2.0 * tau * coef[v]) * (features[u] - features[v]);
            out.grad[u] += g;
            out.grad[v] -= g;
        }
    }
    const double inv = 1.0 / static_cast<double>(n);
    out.loss *= inv;
    for (auto &g : out.grad)
        g *= inv;
    return out;
}

/// Per-view pixel lists grouped by label, ascending label; unlabeled pixels are skipped.
struct LabeledPixels {
    std::vector<std::uint32_t> labels;
    std::vector<std::vector<std::uint32_t>> pixels;
    std::size_t total = 0;

    explicit LabeledPixels(const InstanceMap &map) {
        std::map<std::uint32_t, std::vector<std::uint32_t>> by;
        for (std::size_t p = 0; p < map.ids.pixel_count(); ++p)
            if (map.at(p) != 0)
                by[map.at(p)].push_back(static_cast<std::uint32_t>(p));
        for (auto &[l, px] : by) {
            labels.push_back(l);
            total += px.size();
            pixels.push_back(std::move(px));
        }
    }
};

/// Sampled pixel indices with their labels.
inline void sample_pixels(const LabeledPixels &lp, std::size_t count, bool balanced, Rng &rng,
                          std::vector<std::uint32_t> &pixels, std::vector<std::uint32_t> &labels) {
    pixels.clear();
    labels.clear();
    if (lp.total == 0)
        return;
    for (std::size_t k = 0; k < count; ++k) {
        std::size_t inst = 0, at = 0;
        if (balanced) {
            inst = uniform_index(rng, lp.labels.size());
            at = uniform_index(rng, lp.pixels[inst].size());
        } else {
            at = uniform_index(rng, lp.total);
            while (at >= lp.pixels[inst].size())
                at -= lp.pixels[inst++].size();
        }
        pixels.push_back(lp.pixels[inst][at]);
        labels.push_back(lp.labels[inst]);
    }
}

/// Rendered features at the given pixels, plus the blend weights needed to backpropagate.
struct SampledFeatures {
    std::vector<VecX> features;
    std::vector<std::vector<Contribution>> weights;
};

inline SampledFeatures render_features_at(const PreparedView &pv, std::span<const std::uint32_t> pixels) {
    const auto &scene = pv.scene();
    const auto w = static_cast<std::uint32_t>(pv.view().width);
    const auto d = static_cast<Eigen::Index>(scene.feature_dim);
    SampledFeatures out;
    std::vector<SplatFragment> frags;
    for (auto p : pixels) {
        pv.walk(static_cast<int>(p % w), static_cast<int>(p / w), frags);
        VecX f = VecX::Zero(d);
        std::vector<Contribution> c;
        c.reserve(frags.size());
        for (const auto &fr : frags) {
            f += fr.weight() * scene.gaussians[fr.gaussian].feature;
            c.push_back({fr.gaussian, fr.weight()});
        }
        out.features.push_back(std::move(f));
        out.weights.push_back(std::move(c));
    }
    return out;
}

struct ContrastiveTrace {
    std::vector<double> loss; ///< one entry per step
    std::vector<std::uint32_t> view;
};

/// Trains per-Gaussian features against per-view instance maps with Adam. Views are visited
/// round-robin; views without labeled pixels are skipped without an update.
inline Scene train_contrastive(const Scene &scene, std::span<const InstanceMap> maps, const ContrastiveConfig &cfg,
                               ContrastiveTrace *trace = nullptr) {
    cfg.validate();
    if (maps.empty())
        throw InvalidArgument("train_contrastive: no instance maps");
    if (maps.size() != scene.views.size())
        throw InvalidArgument("train_contrastive: " + std::to_string(maps.size()) + " maps for " +
                              std::to_string(scene.views.size()) + " views");
    for (const auto &g : scene.gaussians)
        if (static_cast<std::size_t>(g.feature.size()) != scene.feature_dim)
            throw InvalidArgument("train_contrastive: feature dimension differs from the scene");
    std::vector<LabeledPixels> labeled;
    std::size_t any = 0;
    for (std::size_t v = 0; v < maps.size(); ++v) {
        if (maps[v].width() != scene.views[v].width || maps[v].height() != scene.views[v].height)
            throw ViewError(v, "instance map size differs from the view");
        labeled.emplace_back(maps[v]);
        any += labeled.back().total;
    }
    if (any == 0)
        throw InvalidArgument("train_contrastive: instance maps have no labeled pixels");

    Scene cur = scene;
    if (cfg.steps == 0)
        return cur;
    // Feature updates never move geometry, so the tile bins stay valid.
    std::vector<PreparedView> views;
    for (std::size_t v = 0; v < cur.views.size(); ++v)
        views.emplace_back(cur, v, cfg.raster);

    const std::size_t n = cur.gaussians.size();
    const auto d = static_cast<Eigen::Index>(cur.feature_dim);
    std::vector<VecX> m(n, VecX::Zero(d)), s(n, VecX::Zero(d)), grad(n, VecX::Zero(d));
    std::vector<bool> touched(n, false);
    Rng rng(cfg.seed);
    std::vector<std::uint32_t> pixels, labels;
    std::uint64_t t = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const std::size_t v = step % views.size();
        sample_pixels(labeled[v], cfg.batch, cfg.balanced, rng, pixels, labels);
        if (pixels.empty())
            continue;
        const auto sf = render_features_at(views[v], pixels);
        const auto cl = contrastive_loss(sf.features, labels, cfg.tau, cfg.form);
        if (trace) {
            trace->loss.push_back(cl.loss);
            trace->view.push_back(static_cast<std::uint32_t>(v));
        }
        std::fill(touched.begin(), touched.end(), false);
        for (std::size_t u = 0; u < pixels.size(); ++u)
            for (const auto &c : sf.weights[u]) {
                if (!touched[c.gaussian]) {
                    grad[c.gaussian].setZero();
                    touched[c.gaussian] = true;
                }
                grad[c.gaussian] += c.weight * cl.grad[u];
            }
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < n; ++i) {
            if (!touched[i])
                grad[i].setZero();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            s[i] = cfg.beta2 * s[i] + (1.0 - cfg.beta2) * grad[i].cwiseAbs2();
            auto &f = cur.gaussians[i].feature;
            for (Eigen::Index k = 0; k < d; ++k)
                f[k] -= cfg.lr * (m[i][k] / bc1) / (std::sqrt(s[i][k] / bc2) + cfg.adam_eps);
        }
    }
    return cur;
}

/// Mean rendered-feature similarity of same-instance pixel pairs minus that of
/// different-instance pairs, over up to `per_view` sampled labeled pixels per view.
inline double feature_separation(const Scene &scene, std::span<const InstanceMap> maps, double tau,
                                 std::size_t per_view = 128, std::uint64_t seed = 0, const RasterOptions &raster = {}) {
    detail::require(maps.size() == scene.views.size(), "feature_separation: one map per view required");
    Rng rng(seed);
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    std::vector<std::uint32_t> pixels, labels;
    for (std::size_t v = 0; v < maps.size(); ++v) {
        const LabeledPixels lp(maps[v]);
        sample_pixels(lp, per_view, true, rng, pixels, labels);
        if (pixels.empty())
            continue;
        const auto sf = render_features_at(PreparedView(scene, v, raster), pixels);
        for (std::size_t a = 0; a < pixels.size(); ++a)
            for (std::size_t b = a + 1; b < pixels.size(); ++b) {
                const double s = feature_similarity(sf.features[a], sf.features[b], tau);
                if (labels[a] == labels[b]) {
                    intra += s;
                    ++n_intra;
                } else {
                    inter += s;
                    ++n_inter;
                }
            }
    }
    detail::require(n_intra > 0 && n_inter > 0, "feature_separation: need pixels of two instances");
    return intra / double(n_intra) - inter / double(n_inter);
}

} // namespace gtrace

#endif // GTRACE_CONTRASTIVE_HPP

// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_RASTERIZER_HPP
#define GTRACE_RASTERIZER_HPP

#include "gtrace/error.hpp"
#include "gtrace/image.hpp"
#include "gtrace/instance_map.hpp"
#include "gtrace/parallel.hpp"
#include "gtrace/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace gtrace {

struct RasterOptions {
    double cutoff_radius = 3.0; ///< fragments with |uv| beyond this many sigmas are skipped
    double alpha_clamp = 0.99;  ///< per-fragment effective alpha is min(opacity * g, alpha_clamp)
    double term_eps = 1e-4;     ///< stop once accumulated opacity >= 1 - term_eps
    bool with_features = false;
    std::size_t threads = 0; ///< 0 = hardware concurrency; never changes results
    int tile_size = 16;
};

inline void validate(const RasterOptions &o) {
    detail::require(o.cutoff_radius > 0.0, "RasterOptions: cutoff_radius must be positive");
    detail::require(o.alpha_clamp > 0.0 && o.alpha_clamp <= 1.0, "RasterOptions: alpha_clamp must lie in (0, 1]");
    detail::require(o.term_eps > 0.0 && o.term_eps < 1.0, "RasterOptions: term_eps must lie in (0, 1)");
    detail::require(o.tile_size >= 1, "RasterOptions: tile_size must be >= 1");
}

struct RayHit {
    Vec2 uv;
    double depth; ///< camera-space z of the hit point
};

/// g(u) = exp(-(u^2 + v^2) / 2)
inline double gaussian_value(const Vec2 &uv) { return std::exp(-0.5 * uv.squaredNorm()); }

/// Local (u, v) of the pixel ray's hit on the disk plane, in units of the disk scales.
/// Returns nothing for rays parallel to the plane or hits behind the camera.
inline std::optional<RayHit> intersect_ray_disk(const CameraView &view, int x, int y, const GaussianDisk &disk) {
    const Vec3 origin = view.center();
    const Vec3 dir = view.ray_direction(x, y);
    const Vec3 n = disk.normal();
    const double denom = dir.dot(n);
    if (std::abs(denom) < 1e-12 * dir.norm())
        return std::nullopt;
    const double t = (disk.center - origin).dot(n) / denom;
    if (!(t > 0.0))
        return std::nullopt;
    const Vec3 d = origin + t * dir - disk.center;
    return RayHit{Vec2(d.dot(disk.tangent_u) / disk.scale_u, d.dot(disk.tangent_v) / disk.scale_v), t};
}

/// Fragment of one pixel's walk.
struct SplatFragment {
    std::uint32_t gaussian;
    double depth;
    double g;            ///< gaussian_value at the hit
    double alpha;        ///< effective alpha min(opacity * g, clamp)
    double transmittance; ///< product of (1 - alpha) over nearer fragments
    bool clamped;

    double weight() const { return alpha * transmittance; }
};

struct Contribution {
    std::uint32_t gaussian;
    double weight;
};

/// Per-pixel (gaussian, blend weight) lists in row-major pixel order (CSR layout).
struct ContributionMap {
    int width = 0, height = 0;
    std::vector<std::size_t> offsets; ///< size pixel_count + 1
    std::vector<Contribution> entries;
    std::vector<double> residual; ///< transmittance left after the last blended fragment
    std::size_t fragment_count = 0;

    std::size_t pixel_count() const { return residual.size(); }
    std::span<const Contribution> at(std::size_t pixel) const {
        return {entries.data() + offsets[pixel], offsets[pixel + 1] - offsets[pixel]};
    }
};

struct RenderOutput {
    ImageF color;         ///< 3 channels, black background (not composited)
    ImageF feature;       ///< feature_dim channels; empty unless requested
    ImageF transmittance; ///< residual transmittance, 1 channel
    std::size_t fragment_count = 0;
};

/// Per-view acceleration data: screen-space tile bins plus per-Gaussian plane constants.
/// Read-only once built; shared by rendering, tracing and gradients.
class PreparedView {
  public:
    PreparedView(const Scene &scene, std::size_t view_pos, const RasterOptions &opts)
        : scene_(&scene), opts_(opts) {
        validate(opts);
        if (view_pos >= scene.views.size())
            throw InvalidArgument("view " + std::to_string(view_pos) + " does not belong to the scene (" +
                                  std::to_string(scene.views.size()) + " views)");
        view_ = &scene.views[view_pos];
        origin_ = view_->center();
        tile_ = opts.tile_size;
        tiles_x_ = (view_->width + tile_ - 1) / tile_;
        tiles_y_ = (view_->height + tile_ - 1) / tile_;
        bins_.resize(static_cast<std::size_t>(tiles_x_) * tiles_y_);
        const std::size_t n = scene.gaussians.size();
        normal_.resize(n);
        rel_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto &g = scene.gaussians[i];
            normal_[i] = g.normal();
            rel_[i] = g.center - origin_;
            bin(static_cast<std::uint32_t>(i));
        }
    }

    const Scene &scene() const { return *scene_; }
    const CameraView &view() const { return *view_; }
    const RasterOptions &options() const { return opts_; }

    /// Walks pixel (x, y): collects fragments front to back and blends until termination.
    /// `out` receives the blended fragments; returns the residual transmittance.
    double walk(int x, int y, std::vector<SplatFragment> &out) const {
        out.clear();
        const auto &tile = bins_[static_cast<std::size_t>(y / tile_) * tiles_x_ + x / tile_];
        const Vec3 dir = view_->ray_direction(x, y);
        const double dir_norm = dir.norm();
        const double r2_max = opts_.cutoff_radius * opts_.cutoff_radius;
        for (std::uint32_t i : tile) {
            const auto &g = scene_->gaussians[i];
            const double denom = dir.dot(normal_[i]);
            if (std::abs(denom) < 1e-12 * dir_norm)
                continue;
            const double t = rel_[i].dot(normal_[i]) / denom;
            if (!(t > 0.0))
                continue;
            const Vec3 d = t * dir - rel_[i];
            const double u = d.dot(g.tangent_u) / g.scale_u;
            const double v = d.dot(g.tangent_v) / g.scale_v;
            const double r2 = u * u + v * v;
            if (r2 > r2_max)
                continue;
            out.push_back({i, t, std::exp(-0.5 * r2), 0.0, 0.0, false});
        }
        std::sort(out.begin(), out.end(), [](const SplatFragment &a, const SplatFragment &b) {
            return a.depth < b.depth || (a.depth == b.depth && a.gaussian < b.gaussian);
        });
        double T = 1.0;
        std::size_t k = 0;
        for (; k < out.size(); ++k) {
            auto &f = out[k];
            const double raw = scene_->gaussians[f.gaussian].opacity * f.g;
            f.clamped = raw > opts_.alpha_clamp;
            f.alpha = f.clamped ? opts_.alpha_clamp : raw;
            f.transmittance = T;
            T *= 1.0 - f.alpha;
            if (T <= opts_.term_eps) {
                ++k;
                break;
            }
        }
        out.resize(k);
        return T;
    }

    int tiles_x() const { return tiles_x_; }
    int tiles_y() const { return tiles_y_; }

  private:
    void bin(std::uint32_t i) {
        const auto &g = scene_->gaussians[i];
        const double r = opts_.cutoff_radius;
        const int w = view_->width, h = view_->height;
        double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
        bool full = false;
        for (int su : {-1, 1}) {
            for (int sv : {-1, 1}) {
                const Vec3 corner = g.center + su * r * g.scale_u * g.tangent_u + sv * r * g.scale_v * g.tangent_v;
                const auto p = view_->project(corner);
                if (!p) {
                    full = true;
                    continue;
                }
                x0 = std::min(x0, p->x());
                x1 = std::max(x1, p->x());
                y0 = std::min(y0, p->y());
                y1 = std::max(y1, p->y());
            }
        }
        int px0 = 0, px1 = w - 1, py0 = 0, py1 = h - 1;
        if (!full) {
            // pixel centres sit at integer + 0.5
            px0 = static_cast<int>(std::max(0.0, std::ceil(x0 - 0.5)));
            px1 = static_cast<int>(std::min(double(w - 1), std::floor(x1 - 0.5)));
            py0 = static_cast<int>(std::max(0.0, std::ceil(y0 - 0.5)));
            py1 = static_cast<int>(std::min(double(h - 1), std::floor(y1 - 0.5)));
            // one pixel of slack for rounding in the projection
            px0 = std::max(0, px0 - 1);
            py0 = std::max(0, py0 - 1);
            px1 = std::min(w - 1, px1 + 1);
            py1 = std::min(h - 1, py1 + 1);
            if (px0 > px1 || py0 > py1)
                return;
        }
        for (int ty = py0 / tile_; ty <= py1 / tile_; ++ty)
            for (int tx = px0 / tile_; tx <= px1 / tile_; ++tx)
                bins_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(i);
    }

    const Scene *scene_;
    const CameraView *view_;
    RasterOptions opts_;
    Vec3 origin_;
    int tile_ = 16, tiles_x_ = 0, tiles_y_ = 0;
    std::vector<std::vector<std::uint32_t>> bins_;
    std::vector<Vec3> normal_;
    std::vector<Vec3> rel_;
};

namespace detail {

/// Runs fn(x, y, scratch) over horizontal bands of `band` rows; bands are independent work items.
template <typename Fn>
void for_each_band(int width, int height, int band, std::size_t threads, Fn &&fn) {
    const std::size_t bands = static_cast<std::size_t>((height + band - 1) / band);
    parallel_for(bands, threads, [&](std::size_t b) {
        const int y0 = static_cast<int>(b) * band;
        const int y1 = std::min(height, y0 + band);
        fn(b, y0, y1, width);
    });
}

} // namespace detail

/// Renders color (and optionally features) with front-to-back alpha blending.
inline RenderOutput render(const PreparedView &pv) {
    const auto &scene = pv.scene();
    const auto &view = pv.view();
    const auto &opts = pv.options();
    RenderOutput out;
    out.color = ImageF(view.width, view.height, 3);
    out.transmittance = ImageF(view.width, view.height, 1);
    const int d = static_cast<int>(scene.feature_dim);
    if (opts.with_features)
        out.feature = ImageF(view.width, view.height, d);
    std::vector<std::size_t> band_fragments(static_cast<std::size_t>((view.height + opts.tile_size - 1) / opts.tile_size));
    detail::for_each_band(view.width, view.height, opts.tile_size, opts.threads, [&](std::size_t b, int y0, int y1, int w) {
        std::vector<SplatFragment> frags;
        std::size_t count = 0;
        for (int y = y0; y < y1; ++y) {
            for (int x = 0; x < w; ++x) {
                const double T = pv.walk(x, y, frags);
                count += frags.size();
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                auto c = out.color.pixel(p);
                for (const auto &f : frags) {
                    const auto &g = scene.gaussians[f.gaussian];
                    const double wgt = f.weight();
                    for (int ch = 0; ch < 3; ++ch)
                        c[ch] += g.color[ch] * wgt;
                    if (opts.with_features) {
                        auto fp = out.feature.pixel(p);
                        for (int k = 0; k < d; ++k)
                            fp[k] += g.feature[k] * wgt;
                    }
                }
                out.transmittance.data()[p] = T;
            }
        }
        band_fragments[b] = count;
    });
    for (auto c : band_fragments)
        out.fragment_count += c;
    return out;
}

inline RenderOutput render(const Scene &scene, std::size_t view, const RasterOptions &opts = {}) {
    return render(PreparedView(scene, view, opts));
}

/// Per-pixel blend weights of every contributing Gaussian, same traversal as render().
inline ContributionMap render_contributions(const PreparedView &pv) {
    const auto &view = pv.view();
    const int band = pv.options().tile_size;
    const std::size_t bands = static_cast<std::size_t>((view.height + band - 1) / band);
    struct BandOut {
        std::vector<std::size_t> counts;
        std::vector<Contribution> entries;
        std::vector<double> residual;
        std::size_t fragments = 0;
    };
    std::vector<BandOut> parts(bands);
    detail::for_each_band(view.width, view.height, band, pv.options().threads, [&](std::size_t b, int y0, int y1, int w) {
        std::vector<SplatFragment> frags;
        auto &part = parts[b];
        for (int y = y0; y < y1; ++y) {
            for (int x = 0; x < w; ++x) {
                const double T = pv.walk(x, y, frags);
                part.counts.push_back(frags.size());
                for (const auto &f : frags)
                    part.entries.push_back({f.gaussian, f.weight()});
                part.residual.push_back(T);
                part.fragments += frags.size();
            }
        }
    });
    ContributionMap out;
    out.width = view.width;
    out.height = view.height;
    out.offsets.reserve(view.pixel_count() + 1);
    out.offsets.push_back(0);
    out.residual.reserve(view.pixel_count());
    for (auto &part : parts) {
        for (auto c : part.counts)
            out.offsets.push_back(out.offsets.back() + c);
        out.entries.insert(out.entries.end(), part.entries.begin(), part.entries.end());
        out.residual.insert(out.residual.end(), part.residual.begin(), part.residual.end());
        out.fragment_count += part.fragments;
    }
    return out;
}

inline ContributionMap render_contributions(const Scene &scene, std::size_t view, const RasterOptions &opts = {}) {
    return render_contributions(PreparedView(scene, view, opts));
}

/// Upstream gradients dL/d(output) for one view. Empty images mean "no gradient on that output".
struct OutputGradients {
    ImageF color;         ///< 3 channels
    ImageF feature;       ///< feature_dim channels
    ImageF transmittance; ///< 1 channel
};

/// dL/d(parameter) for the appearance parameters of every Gaussian. Geometry gets no gradient.
struct AppearanceGradients {
    std::vector<Vec3> color;
    std::vector<double> opacity;
    std::vector<VecX> feature; ///< empty unless feature gradients were supplied

    explicit AppearanceGradients(std::size_t n = 0, std::size_t feature_dim = 0, bool features = false)
        : color(n, Vec3::Zero()), opacity(n, 0.0) {
        if (features)
            feature.assign(n, VecX::Zero(static_cast<Eigen::Index>(feature_dim)));
    }

    AppearanceGradients &operator+=(const AppearanceGradients &o) {
        for (std::size_t i = 0; i < color.size(); ++i) {
            color[i] += o.color[i];
            opacity[i] += o.opacity[i];
        }
        for (std::size_t i = 0; i < feature.size() && i < o.feature.size(); ++i)
            feature[i] += o.feature[i];
        return *this;
    }
};

/// Exact derivatives of the blended outputs with respect to color, opacity and feature.
/// Clamped fragments pass no opacity gradient; the set of blended fragments is held fixed.
inline AppearanceGradients appearance_gradients(const PreparedView &pv, const OutputGradients &grad) {
    const auto &scene = pv.scene();
    const auto &view = pv.view();
    const int w = view.width, h = view.height;
    const int d = static_cast<int>(scene.feature_dim);
    const bool has_c = !grad.color.empty(), has_f = !grad.feature.empty(), has_t = !grad.transmittance.empty();
    if (has_c && (grad.color.width() != w || grad.color.height() != h || grad.color.channels() != 3))
        throw InvalidArgument("appearance_gradients: color gradient shape mismatch");
    if (has_f && (grad.feature.width() != w || grad.feature.height() != h || grad.feature.channels() != d))
        throw InvalidArgument("appearance_gradients: feature gradient shape mismatch");
    if (has_t && (grad.transmittance.width() != w || grad.transmittance.height() != h || grad.transmittance.channels() != 1))
        throw InvalidArgument("appearance_gradients: transmittance gradient shape mismatch");

    struct Partial {
        std::uint32_t gaussian;
        Vec3 color;
        double opacity;
        VecX feature;
    };
    const int band = pv.options().tile_size;
    const std::size_t bands = static_cast<std::size_t>((h + band - 1) / band);
    std::vector<std::vector<Partial>> parts(bands);

    detail::for_each_band(w, h, band, pv.options().threads, [&](std::size_t b, int y0, int y1, int width) {
        std::vector<SplatFragment> frags;
        std::unordered_map<std::uint32_t, std::size_t> slot;
        auto &acc = parts[b];
        std::vector<double> dl_da;
        VecX feat_suffix(d), gf(d);
        for (int y = y0; y < y1; ++y) {
            for (int x = 0; x < width; ++x) {
                pv.walk(x, y, frags);
                if (frags.empty())
                    continue;
                const std::size_t p = static_cast<std::size_t>(y) * width + x;
                Vec3 gc = Vec3::Zero();
                if (has_c) {
                    auto s = grad.color.pixel(p);
                    gc = Vec3(s[0], s[1], s[2]);
                }
                if (has_f) {
                    auto s = grad.feature.pixel(p);
                    for (int k = 0; k < d; ++k)
                        gf[k] = s[k];
                }
                const double gt = has_t ? grad.transmittance.data()[p] : 0.0;
                // Back-to-front: B_k = x_k a_k + (1 - a_k) B_{k+1} is what fragments k.. add
                // relative to T_k, so dL/da_k = T_k (x_k - B_{k+1}); P_k is the suffix of (1 - a_j).
                double behind_c = 0.0, behind_t = 1.0;
                feat_suffix.setZero();
                dl_da.assign(frags.size(), 0.0);
                for (std::size_t kk = frags.size(); kk-- > 0;) {
                    const auto &f = frags[kk];
                    const auto &g = scene.gaussians[f.gaussian];
                    const double xc = gc.dot(g.color);
                    double da = f.transmittance * (xc - behind_c);
                    if (has_f)
                        da += f.transmittance * (gf.dot(g.feature) - gf.dot(feat_suffix));
                    if (has_t)
                        da -= gt * f.transmittance * behind_t;
                    dl_da[kk] = da;
                    behind_c = xc * f.alpha + (1.0 - f.alpha) * behind_c;
                    if (has_f)
                        feat_suffix = g.feature * f.alpha + (1.0 - f.alpha) * feat_suffix;
                    behind_t *= 1.0 - f.alpha;
                }
                for (std::size_t kk = 0; kk < frags.size(); ++kk) {
                    const auto &f = frags[kk];
                    auto [it, inserted] = slot.try_emplace(f.gaussian, acc.size());
                    if (inserted)
                        acc.push_back({f.gaussian, Vec3::Zero(), 0.0, has_f ? VecX::Zero(d) : VecX()});
                    auto &a = acc[it->second];
                    const double wgt = f.weight();
                    a.color += gc * wgt;
                    if (has_f)
                        a.feature += gf * wgt;
                    if (!f.clamped)
                        a.opacity += dl_da[kk] * f.g;
                }
            }
        }
    });

    AppearanceGradients out(scene.gaussians.size(), scene.feature_dim, has_f);
    for (auto &part : parts) {
        std::sort(part.begin(), part.end(), [](const Partial &a, const Partial &b) { return a.gaussian < b.gaussian; });
        for (const auto &a : part) {
            out.color[a.gaussian] += a.color;
            out.opacity[a.gaussian] += a.opacity;
            if (has_f)
                out.feature[a.gaussian] += a.feature;
        }
    }
    return out;
}

inline AppearanceGradients appearance_gradients(const Scene &scene, std::size_t view, const OutputGradients &grad,
                                                const RasterOptions &opts = {}) {
    return appearance_gradients(PreparedView(scene, view, opts), grad);
}

/// Ground-truth instance map: per pixel the gt_instance with the largest total blend weight
/// (ties to the smaller ID); pixels with residual transmittance > 0.5 are unlabeled.
inline InstanceMap render_gt_instance_map(const PreparedView &pv) {
    const auto &scene = pv.scene();
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i)
        if (!scene.gaussians[i].gt_instance)
            throw InvalidArgument("render_gt_instance_map: gaussian " + std::to_string(i) + " has no gt_instance");
    const auto &view = pv.view();
    LabelImage ids(view.width, view.height);
    detail::for_each_band(view.width, view.height, pv.options().tile_size, pv.options().threads,
                          [&](std::size_t, int y0, int y1, int w) {
                              std::vector<SplatFragment> frags;
                              std::map<InstanceId, double> totals;
                              for (int y = y0; y < y1; ++y) {
                                  for (int x = 0; x < w; ++x) {
                                      const double T = pv.walk(x, y, frags);
                                      if (T > 0.5)
                                          continue;
                                      totals.clear();
                                      for (const auto &f : frags)
                                          totals[*scene.gaussians[f.gaussian].gt_instance] += f.weight();
                                      InstanceId best = kUnlabeled;
                                      double best_w = -1.0;
                                      for (const auto &[id, wt] : totals)
                                          if (wt > best_w) {
                                              best = id;
                                              best_w = wt;
                                          }
                                      ids(x, y) = best;
                                  }
                              }
                          });
    return make_instance_map(std::move(ids));
}

inline InstanceMap render_gt_instance_map(const Scene &scene, std::size_t view, const RasterOptions &opts = {}) {
    return render_gt_instance_map(PreparedView(scene, view, opts));
}

} // namespace gtrace

#endif // GTRACE_RASTERIZER_HPP

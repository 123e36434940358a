// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#include "gtrace/git_trace.hpp"

#include "oracles/naive_blender.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace gtrace;
using gtrace::testing::flat_disk;
using gtrace::testing::front_camera;
using gtrace::testing::random_scene;

namespace {

InstanceMap uniform_map(int w, int h, std::uint32_t id, std::uint32_t patch_count) {
    InstanceMap m = make_instance_map(LabelImage(w, h, 1, id));
    m.patch_count = patch_count;
    m.pixel_counts.resize(patch_count, 0);
    return m;
}

/// Random patch labels in blocks of 4x4 pixels.
InstanceMap block_map(int w, int h, std::uint32_t patches, std::uint64_t seed) {
    Rng rng(seed);
    LabelImage ids(w, h);
    std::vector<std::uint32_t> block_label(static_cast<std::size_t>(((w + 3) / 4) * ((h + 3) / 4)));
    for (auto &b : block_label)
        b = static_cast<std::uint32_t>(uniform_index(rng, patches));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            ids(x, y) = block_label[static_cast<std::size_t>((y / 4) * ((w + 3) / 4) + x / 4)];
    InstanceMap m = make_instance_map(ids);
    m.patch_count = patches;
    m.pixel_counts.resize(patches, 0);
    return m;
}

} // namespace

TEST(TraceView, OneHotWhenDiskSeesOnePatch) {
    Scene s;
    s.feature_dim = 1;
    s.views.push_back(front_camera(10, 10, 10.0));
    s.gaussians.push_back(flat_disk(Vec3(0, 0, 2), 0.2, 0.8, Vec3::Ones(), 1));
    const auto rows = trace_view(s, 0, uniform_map(10, 10, 3, 5));
    ASSERT_EQ(rows.row(0).size(), 1u);
    EXPECT_EQ(rows.row(0)[0].patch, 3u);
    EXPECT_EQ(rows.row(0)[0].prob, 1.0);
}

TEST(TraceView, NormalisesStatedMasses) {
    // Two pixels: the disk's weight is 0.6 on the patch-1 pixel and 0.2 on the patch-2 pixel.
    Scene s;
    s.feature_dim = 1;
    s.views.push_back(front_camera(2, 1, 1e6));
    auto big = flat_disk(Vec3(0, 0, 1), 10.0, 0.6, Vec3::Ones(), 1);
    s.gaussians.push_back(big);
    LabelImage ids(2, 1);
    ids(0, 0) = 1;
    ids(1, 0) = 2;
    InstanceMap m = make_instance_map(ids);
    // A front disk over the second pixel only, with alpha 2/3, leaves 0.6 * (1/3) = 0.2 there.
    auto occ = flat_disk(Vec3(2.5e-7, 0, 0.5), 1e-7, 2.0 / 3.0, Vec3::Zero(), 1);
    s.gaussians.push_back(occ);
    RasterOptions ro;
    ro.alpha_clamp = 1.0;
    TraceOptions to;
    to.raster = ro;
    const auto c = render_contributions(s, 0, ro);
    ASSERT_EQ(c.at(0).size(), 1u);
    ASSERT_EQ(c.at(1).size(), 2u);
    const auto rows = trace_view(s, 0, m, to);
    ASSERT_EQ(rows.row(0).size(), 2u);
    EXPECT_NEAR(rows.row(0)[0].prob, 0.75, 1e-12);
    EXPECT_NEAR(rows.row(0)[1].prob, 0.25, 1e-12);
    EXPECT_NEAR(rows.mass[0], 0.8, 1e-12);
}

TEST(TraceView, RejectsMismatchedMap) {
    const Scene s = random_scene(1, 3);
    EXPECT_THROW(trace_view(s, 0, uniform_map(8, 8, 0, 1)), InvalidArgument);
}

// Library rows against a dense pixel x fragment double loop over the naive blender.
TEST(TraceView, MatchesBruteForce) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        const Scene s = random_scene(seed, 12, 16, 16);
        const InstanceMap map = block_map(16, 16, 4, seed);
        const auto rows = trace_view(s, 0, map);
        const auto ref = oracle::brute_trace(s, s.views[0], 4, [&](int x, int y) { return map.ids(x, y); }, {});
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (ref.total[i] < 1e-4) {
                EXPECT_FALSE(rows.visible(i));
                continue;
            }
            ASSERT_TRUE(rows.visible(i));
            double sum = 0.0;
            for (std::uint32_t t = 0; t < 4; ++t) {
                EXPECT_NEAR(rows.prob(i, t), ref.mass[i][t] / ref.total[i], 1e-6);
                sum += rows.prob(i, t);
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

// Mass accrued by tracing is the row-major sum of the same contributions, bit for bit.
TEST(TraceView, MassEqualsContributionSumExactly) {
    const Scene s = random_scene(9, 20, 24, 24);
    const InstanceMap map = block_map(24, 24, 3, 9);
    const auto rows = trace_view(s, 0, map);
    const auto c = render_contributions(s, 0);
    std::vector<double> total(s.size(), 0.0);
    for (std::size_t p = 0; p < c.pixel_count(); ++p)
        for (const auto &e : c.at(p))
            total[e.gaussian] += e.weight;
    for (std::size_t i = 0; i < s.size(); ++i)
        EXPECT_EQ(rows.mass[i], total[i]);
    EXPECT_EQ(rows.fragment_count, render(s, 0).fragment_count);
}

TEST(TraceView, ThreadCountDoesNotChangeBits) {
    const Scene s = random_scene(4, 24, 40, 40);
    const InstanceMap map = block_map(40, 40, 5, 4);
    TraceOptions a, b;
    a.raster.threads = 1;
    b.raster.threads = 3;
    const auto ra = trace_view(s, 0, map, a);
    const auto rb = trace_view(s, 0, map, b);
    EXPECT_EQ(ra.entries, rb.entries);
    EXPECT_EQ(ra.mass, rb.mass);
}

TEST(TraceAll, SingleViewEqualsTraceView) {
    const Scene s = random_scene(2, 10);
    const std::vector<InstanceMap> maps{block_map(16, 16, 3, 2)};
    const auto wm = trace_all(s, maps);
    const auto rows = trace_view(s, 0, maps[0]);
    ASSERT_EQ(wm.view_count(), 1u);
    EXPECT_EQ(wm.views[0].entries, rows.entries);
    for (std::size_t i = 0; i < s.size(); ++i)
        EXPECT_EQ(wm.argmax(i, 0), row_argmax(rows.row(i)));
}

TEST(TraceAll, AllZeroMapGoesToBackgroundBucket) {
    const Scene s = random_scene(3, 10);
    const std::vector<InstanceMap> maps{uniform_map(16, 16, 0, 1)};
    const auto wm = trace_all(s, maps);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!wm.views[0].visible(i))
            continue;
        ASSERT_EQ(wm.views[0].row(i).size(), 1u);
        EXPECT_EQ(wm.views[0].row(i)[0].patch, 0u);
        EXPECT_EQ(wm.argmax(i, 0), 0);
    }
}

TEST(TraceAll, SingleObjectRowsAreOneHot) {
    SceneSpec spec;
    spec.object_count = 1;
    spec.disks_u = spec.disks_v = 4;
    spec.image_width = spec.image_height = 32;
    const Scene s = generate_scene(spec);
    std::vector<InstanceMap> maps;
    for (std::size_t v = 0; v < s.views.size(); ++v)
        maps.push_back(render_gt_instance_map(s, v));
    const auto wm = trace_all(s, maps);
    // Brute-force oracle: rows equal normalised naive masses, which put almost all weight
    // on patch 1 (the rim contributes a little to the background bucket).
    for (std::size_t v = 0; v < s.views.size(); ++v) {
        const auto ref = oracle::brute_trace(s, s.views[v], maps[v].patch_count,
                                             [&](int x, int y) { return maps[v].ids(x, y); }, {});
        for (std::size_t i = 0; i < s.size(); ++i) {
            ASSERT_TRUE(wm.views[v].visible(i));
            EXPECT_EQ(wm.argmax(i, v), 1);
            EXPECT_NEAR(wm.views[v].prob(i, 1), ref.mass[i][1] / ref.total[i], 1e-6);
        }
    }
}

TEST(TraceAll, ErrorsNameTheView) {
    const Scene s = [] {
        Scene t = random_scene(3, 4);
        t.views.push_back(t.views[0]);
        return t;
    }();
    const std::vector<InstanceMap> maps{uniform_map(16, 16, 0, 1), uniform_map(8, 8, 0, 1)};
    try {
        trace_all(s, maps);
        FAIL();
    } catch (const ViewError &e) {
        EXPECT_EQ(e.view(), 1u);
    }
}

TEST(TracePatchGaussians, SingleDiskPatch) {
    Scene s;
    s.feature_dim = 1;
    s.views.push_back(front_camera(10, 10, 10.0));
    s.gaussians.push_back(flat_disk(Vec3(0, 0, 2), 0.2, 0.8, Vec3::Ones(), 1));
    s.gaussians.push_back(flat_disk(Vec3(5, 5, 2), 0.2, 0.8, Vec3::Ones(), 1)); // off screen
    const std::vector<InstanceMap> maps{uniform_map(10, 10, 2, 3)};
    const auto wm = trace_all(s, maps);
    EXPECT_EQ(trace_patch_gaussians(wm, 0, 2, 1e-4), std::vector<std::uint32_t>{0});
    EXPECT_TRUE(trace_patch_gaussians(wm, 0, 2, 1.1).empty());
    EXPECT_THROW(trace_patch_gaussians(wm, 0, 7, 1e-4), InvalidArgument);
}

TEST(TracePatchGaussians, MatchesDenseScan) {
    const Scene s = random_scene(21, 16);
    const std::vector<InstanceMap> maps{block_map(16, 16, 4, 21)};
    const auto wm = trace_all(s, maps);
    const auto ref = oracle::brute_trace(s, s.views[0], 4, [&](int x, int y) { return maps[0].ids(x, y); }, {});
    const PatchIndex index(wm, 1e-4);
    for (std::uint32_t t = 0; t < 4; ++t) {
        std::vector<std::uint32_t> expected;
        for (std::uint32_t i = 0; i < s.size(); ++i)
            if (ref.total[i] >= 1e-4 && ref.mass[i][t] / ref.total[i] > 1e-4)
                expected.push_back(i);
        EXPECT_EQ(trace_patch_gaussians(wm, 0, t, 1e-4), expected);
        EXPECT_EQ(index.members[0][t], expected);
    }
}

TEST(VisibleViews, OccludedGaussianIsInvisible) {
    Scene s;
    s.feature_dim = 1;
    for (std::uint32_t v = 0; v < 3; ++v)
        s.views.push_back(front_camera(12, 12, 12.0, Vec3(0.05 * v, 0, 0), v));
    s.gaussians.push_back(flat_disk(Vec3(0, 0, 3), 0.05, 0.9, Vec3::Ones(), 1)); // small, behind
    s.gaussians.push_back(flat_disk(Vec3(0, 0, 1), 2.0, 1.0, Vec3::Ones(), 1));  // opaque wall
    s.gaussians.push_back(flat_disk(Vec3(40, 0, 1), 0.1, 1.0, Vec3::Ones(), 1)); // outside every frustum
    const std::vector<InstanceMap> maps(3, uniform_map(12, 12, 1, 2));
    const auto wm = trace_all(s, maps);
    // the wall is clamped to 0.99, so the back disk leaks ~1% weight: check masses directly
    for (std::size_t v = 0; v < 3; ++v)
        EXPECT_LT(wm.views[v].mass[0], 1e-2 * 12 * 12);
    EXPECT_EQ(visible_views(wm, 1), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_TRUE(visible_views(wm, 2).empty());
    EXPECT_THROW(visible_views(wm, 3), InvalidArgument);

    RasterOptions opaque;
    opaque.alpha_clamp = 1.0;
    TraceOptions to;
    to.raster = opaque;
    const auto wm2 = trace_all(s, maps, to);
    EXPECT_TRUE(visible_views(wm2, 0).empty());
}

TEST(WeightMatrixDump, RoundTrip) {
    const Scene s = random_scene(31, 14);
    const std::vector<InstanceMap> maps{block_map(16, 16, 4, 31)};
    const auto wm = trace_all(s, maps);
    const auto back = decode_weight_matrix(encode_weight_matrix(wm));
    EXPECT_EQ(back.gaussian_count, wm.gaussian_count);
    EXPECT_EQ(back.views[0].entries, wm.views[0].entries);
    EXPECT_EQ(back.views[0].offsets, wm.views[0].offsets);
    EXPECT_EQ(back.argmax_trace, wm.argmax_trace);
    std::string bytes = encode_weight_matrix(wm);
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(decode_weight_matrix(bytes), ParseError);
}

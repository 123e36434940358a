// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_MERGE_HPP
#define GTRACE_MERGE_HPP

#include "gtrace/error.hpp"
#include "gtrace/git_trace.hpp"
#include "gtrace/instance_map.hpp"
#include "gtrace/masks.hpp"
#include "gtrace/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <compare>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gtrace {

struct PatchKey {
    std::uint32_t view = 0;
    std::uint32_t patch = 0;

    auto operator<=>(const PatchKey &) const = default;
};

/// Union-find over dense indices; the root of a set is always its smallest member.
class UnionFind {
  public:
    explicit UnionFind(std::size_t n = 0) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t size() const { return parent_.size(); }

    std::size_t find(std::size_t x) {
        std::size_t root = x;
        while (parent_[root] != root)
            root = parent_[root];
        while (parent_[x] != root) {
            const std::size_t next = parent_[x];
            parent_[x] = root;
            x = next;
        }
        return root;
    }

    /// Joins the sets of a and b; returns the new root.
    std::size_t unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a > b)
            std::swap(a, b);
        parent_[b] = a;
        return a;
    }

  private:
    std::vector<std::size_t> parent_;
};

/// Per-patch vote tallies: for every view, the summed distributions of the patch's traced
/// Gaussians that are visible there, and how many there are. Scoring a pair of patches is
/// then one dot product per view instead of a loop over Gaussian pairs.
class PatchVotes {
  public:
    PatchVotes(const WeightMatrix &wm, double trace_eps) : wm_(&wm), index_(wm, trace_eps) {
        const std::size_t L = wm.views.size();
        offsets_.resize(L + 1, 0);
        for (std::size_t v = 0; v < L; ++v)
            offsets_[v + 1] = offsets_[v] + wm.views[v].patch_count;
        tallies_.resize(offsets_[L]);
    }

    const WeightMatrix &weights() const { return *wm_; }

    std::span<const std::uint32_t> members(PatchKey k) const {
        check(k);
        return index_.members[k.view][k.patch];
    }

    struct Tally {
        std::vector<std::vector<double>> sum; ///< [view][patch]
        std::vector<double> count;            ///< [view]
    };

    const Tally &tally(PatchKey k) const {
        check(k);
        auto &slot = tallies_[offsets_[k.view] + k.patch];
        if (!slot) {
            Tally t;
            const std::size_t L = wm_->views.size();
            t.sum.resize(L);
            t.count.assign(L, 0.0);
            for (std::size_t v = 0; v < L; ++v)
                t.sum[v].assign(wm_->views[v].patch_count, 0.0);
            for (auto i : members(k))
                for (std::size_t v = 0; v < L; ++v) {
                    const auto row = wm_->views[v].row(i);
                    if (row.empty())
                        continue;
                    t.count[v] += 1.0;
                    for (const auto &e : row)
                        t.sum[v][e.patch] += e.prob;
                }
            slot = std::move(t);
        }
        return *slot;
    }

    /// Builds every tally up front so later const access from several threads is read-only.
    void prepare(std::span<const PatchKey> keys) const {
        for (const auto &k : keys)
            tally(k);
    }

  private:
    void check(PatchKey k) const {
        if (k.view >= wm_->views.size() || k.patch >= wm_->views[k.view].patch_count)
            throw InvalidArgument("unknown patch (view " + std::to_string(k.view) + ", patch " +
                                  std::to_string(k.patch) + ")");
    }

    const WeightMatrix *wm_;
    PatchIndex index_;
    std::vector<std::size_t> offsets_;
    mutable std::vector<std::optional<Tally>> tallies_;
};

/// Mean inner product of the two patches' Gaussian distributions over all co-visible
/// (Gaussian a, Gaussian b, view) triples. When both patches live in the same view that view
/// casts no votes. Returns 0 when there are no voters.
inline double patch_similarity(const PatchVotes &votes, PatchKey a, PatchKey b) {
    const auto &ta = votes.tally(a);
    const auto &tb = votes.tally(b);
    double num = 0.0, den = 0.0;
    for (std::size_t v = 0; v < ta.count.size(); ++v) {
        if (a.view == b.view && v == a.view)
            continue;
        if (ta.count[v] == 0.0 || tb.count[v] == 0.0)
            continue;
        den += ta.count[v] * tb.count[v];
        const auto &sa = ta.sum[v];
        const auto &sb = tb.sum[v];
        for (std::size_t t = 0; t < sa.size(); ++t)
            num += sa[t] * sb[t];
    }
    return den > 0.0 ? num / den : 0.0;
}

inline double patch_similarity(const WeightMatrix &wm, PatchKey a, PatchKey b, double trace_eps = 1e-4) {
    return patch_similarity(PatchVotes(wm, trace_eps), a, b);
}

struct MergeOptions {
    double theta = 0.5;
    double trace_eps = 1e-4;
    bool use_hierarchy = true; ///< restrict within-view candidates to patches under a shared coarse mask
    bool cross_view = true;    ///< associate patches across views
    bool cannot_link = true;   ///< refuse cross-view unions of groups that both own a patch in one view
    std::size_t threads = 0;

    void validate() const {
        detail::require(trace_eps >= 0.0, "MergeOptions: trace_eps must be >= 0");
        detail::require(theta == theta, "MergeOptions: theta is NaN");
    }
};

struct ScoredPair {
    PatchKey a, b;
    double score = 0.0;
    bool merged = false; ///< the pair ended up in one group when it was applied

    bool operator==(const ScoredPair &) const = default;
};

struct MergeResult {
    std::vector<PatchKey> keys;            ///< every labelled patch, ascending
    std::vector<std::uint32_t> global_ids; ///< parallel to keys; dense from 1
    std::uint32_t instance_count = 0;
    std::vector<InstanceMap> maps; ///< input maps relabelled with global IDs
    std::vector<ScoredPair> log;   ///< every scored pair in (a, b) order

    std::uint32_t global_id(PatchKey k) const {
        if (k.patch == 0)
            return 0;
        const auto it = std::lower_bound(keys.begin(), keys.end(), k);
        if (it == keys.end() || *it != k)
            throw InvalidArgument("MergeResult: unknown patch");
        return global_ids[static_cast<std::size_t>(it - keys.begin())];
    }
};

/// Within-view candidates share a coarse covering mask when the view's mask set has a
/// hierarchy; otherwise every pair of labelled patches in the view is a candidate.
inline bool share_coarse_mask(const InstanceMap &map, const std::vector<bool> &coarse, std::uint32_t p,
                              std::uint32_t q) {
    if (p >= map.signatures.size() || q >= map.signatures.size())
        return true;
    for (auto j : map.signatures[p])
        if (j < coarse.size() && coarse[j] &&
            std::find(map.signatures[q].begin(), map.signatures[q].end(), j) != map.signatures[q].end())
            return true;
    return false;
}

/// Majority-vote patch merging. All candidate pairs are scored once; pairs above theta are
/// applied in descending score order (ties by key), so raising theta only drops a suffix.
inline MergeResult merge_patches(const WeightMatrix &wm, std::span<const InstanceMap> maps,
                                 std::span<const BinaryMaskSet> hierarchy = {}, const MergeOptions &opts = {}) {
    opts.validate();
    if (maps.size() != wm.views.size())
        throw InvalidArgument("merge_patches: " + std::to_string(maps.size()) + " maps for " +
                              std::to_string(wm.views.size()) + " traced views");
    if (!hierarchy.empty() && hierarchy.size() != maps.size())
        throw InvalidArgument("merge_patches: hierarchy must cover every view");

    MergeResult out;
    for (std::uint32_t v = 0; v < maps.size(); ++v) {
        if (maps[v].patch_count != wm.views[v].patch_count)
            throw ViewError(v, "instance map has " + std::to_string(maps[v].patch_count) +
                                   " patches but the weight matrix was traced with " +
                                   std::to_string(wm.views[v].patch_count));
        for (std::uint32_t t = 1; t < maps[v].patch_count; ++t)
            if (t < maps[v].pixel_counts.size() && maps[v].pixel_counts[t] > 0)
                out.keys.push_back({v, t});
    }

    std::vector<std::pair<std::size_t, std::size_t>> cand;
    for (std::size_t a = 0; a < out.keys.size(); ++a)
        for (std::size_t b = a + 1; b < out.keys.size(); ++b) {
            const PatchKey ka = out.keys[a], kb = out.keys[b];
            if (ka.view == kb.view) {
                if (opts.use_hierarchy && !hierarchy.empty() && hierarchy[ka.view].has_hierarchy() &&
                    !share_coarse_mask(maps[ka.view], hierarchy[ka.view].coarse_flags(), ka.patch, kb.patch))
                    continue;
            } else if (!opts.cross_view) {
                continue;
            }
            cand.emplace_back(a, b);
        }

    PatchVotes votes(wm, opts.trace_eps);
    votes.prepare(out.keys);
    std::vector<double> score(cand.size());
    parallel_for(cand.size(), opts.threads, [&](std::size_t c) {
        score[c] = patch_similarity(votes, out.keys[cand[c].first], out.keys[cand[c].second]);
    });

    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < cand.size(); ++c)
        if (score[c] > opts.theta)
            order.push_back(c);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });

    const std::size_t L = maps.size();
    UnionFind uf(out.keys.size());
    // views owned by each root, for the cannot-link rule
    std::vector<std::vector<bool>> owns(out.keys.size(), std::vector<bool>(L, false));
    for (std::size_t k = 0; k < out.keys.size(); ++k)
        owns[k][out.keys[k].view] = true;
    std::vector<bool> merged(cand.size(), false);
    for (auto c : order) {
        const auto [a, b] = cand[c];
        std::size_t ra = uf.find(a), rb = uf.find(b);
        if (ra == rb) {
            merged[c] = true;
            continue;
        }
        if (opts.cannot_link && out.keys[a].view != out.keys[b].view) {
            bool clash = false;
            for (std::size_t v = 0; v < L && !clash; ++v)
                clash = owns[ra][v] && owns[rb][v];
            if (clash)
                continue;
        }
        const std::size_t root = uf.unite(ra, rb);
        const std::size_t other = root == ra ? rb : ra;
        for (std::size_t v = 0; v < L; ++v)
            owns[root][v] = owns[root][v] || owns[other][v];
        merged[c] = true;
    }

    out.log.reserve(cand.size());
    for (std::size_t c = 0; c < cand.size(); ++c)
        out.log.push_back({out.keys[cand[c].first], out.keys[cand[c].second], score[c], merged[c]});

    // Roots are the smallest keys, so numbering roots in key order is dense and stable.
    std::vector<std::uint32_t> root_id(out.keys.size(), 0);
    out.global_ids.resize(out.keys.size());
    for (std::size_t k = 0; k < out.keys.size(); ++k) {
        const std::size_t r = uf.find(k);
        if (r == k)
            root_id[k] = ++out.instance_count;
        out.global_ids[k] = root_id[r];
    }

    out.maps.reserve(L);
    std::size_t next_key = 0;
    for (std::uint32_t v = 0; v < L; ++v) {
        std::vector<std::uint32_t> lut(maps[v].patch_count, 0);
        while (next_key < out.keys.size() && out.keys[next_key].view == v) {
            lut[out.keys[next_key].patch] = out.global_ids[next_key];
            ++next_key;
        }
        LabelImage ids = maps[v].ids;
        for (auto &id : ids.data())
            id = lut[id];
        out.maps.push_back(make_instance_map(std::move(ids)));
    }
    return out;
}

/// Merge log as line-delimited JSON.
inline std::string merge_log_jsonl(const MergeResult &r) {
    std::string out;
    for (const auto &p : r.log) {
        const nlohmann::ordered_json j = {{"view_a", p.a.view}, {"patch_a", p.a.patch}, {"view_b", p.b.view},
                                          {"patch_b", p.b.patch}, {"score", p.score},     {"merged", p.merged}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

} // namespace gtrace

#endif // GTRACE_MERGE_HPP

// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_INSTANCE_MAP_HPP
#define GTRACE_INSTANCE_MAP_HPP

#include "gtrace/image.hpp"
#include "gtrace/scene.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

namespace gtrace {

/// Per-pixel patch IDs for one view. ID 0 is the unlabeled patch.
///
/// Maps built by overlap_masks() have dense IDs (every ID in [1, patch_count) owns a pixel)
/// and carry the covering-mask signature of each patch. Maps rendered from ground truth or
/// relabelled with global IDs may skip IDs and carry no signatures.
struct InstanceMap {
    LabelImage ids;
    std::uint32_t patch_count = 1;
    std::vector<std::size_t> pixel_counts;             ///< indexed by patch ID
    std::vector<std::vector<std::uint32_t>> signatures; ///< mask indices covering each patch (may be empty)

    int width() const noexcept { return ids.width(); }
    int height() const noexcept { return ids.height(); }
    std::uint32_t at(std::size_t pixel) const { return ids.data()[pixel]; }

    bool operator==(const InstanceMap &) const = default;
};

/// Wraps a label image: patch_count = max ID + 1, pixel counts filled, no signatures.
inline InstanceMap make_instance_map(LabelImage ids) {
    InstanceMap m;
    std::uint32_t max_id = 0;
    for (auto id : ids.data())
        max_id = std::max(max_id, id);
    m.patch_count = max_id + 1;
    m.pixel_counts.assign(m.patch_count, 0);
    for (auto id : ids.data())
        ++m.pixel_counts[id];
    m.ids = std::move(ids);
    return m;
}

/// Binary mask of the pixels labelled `id`.
inline Bitmap mask_of(const InstanceMap &map, std::uint32_t id) {
    Bitmap m(map.width(), map.height());
    for (std::size_t p = 0; p < map.ids.pixel_count(); ++p)
        m.data()[p] = map.at(p) == id ? 1 : 0;
    return m;
}

} // namespace gtrace

#endif // GTRACE_INSTANCE_MAP_HPP

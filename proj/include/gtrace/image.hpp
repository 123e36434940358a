// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_IMAGE_HPP
#define GTRACE_IMAGE_HPP

#include "gtrace/error.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace gtrace {

/// Row-major interleaved image with `channels` values per pixel.
template <typename T>
class Image {
  public:
    Image() = default;
    Image(int width, int height, int channels = 1, T fill = T{})
        : width_(width), height_(height), channels_(channels),
          data_(static_cast<std::size_t>(width) * height * channels, fill) {
        detail::require(width >= 0 && height >= 0 && channels >= 1, "Image: bad dimensions");
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int channels() const noexcept { return channels_; }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }
    bool empty() const noexcept { return data_.empty(); }

    T &operator()(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
    const T &operator()(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

    /// Channel values of pixel p (row-major pixel index).
    std::span<T> pixel(std::size_t p) { return {data_.data() + p * channels_, static_cast<std::size_t>(channels_)}; }
    std::span<const T> pixel(std::size_t p) const {
        return {data_.data() + p * channels_, static_cast<std::size_t>(channels_)};
    }

    std::vector<T> &data() noexcept { return data_; }
    const std::vector<T> &data() const noexcept { return data_; }

    bool same_shape(const Image &o) const noexcept {
        return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
    }

    bool operator==(const Image &) const = default;

  private:
    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int width_ = 0, height_ = 0, channels_ = 1;
    std::vector<T> data_;
};

using ImageF = Image<double>;
using Bitmap = Image<std::uint8_t>;
using LabelImage = Image<std::uint32_t>;

inline std::size_t count_set(const Bitmap &m) {
    std::size_t n = 0;
    for (auto v : m.data())
        n += v != 0;
    return n;
}

} // namespace gtrace

#endif // GTRACE_IMAGE_HPP

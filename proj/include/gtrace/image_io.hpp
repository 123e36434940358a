// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_IMAGE_IO_HPP
#define GTRACE_IMAGE_IO_HPP

#include "gtrace/error.hpp"
#include "gtrace/image.hpp"
#include "gtrace/instance_map.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>

// Netpbm color (P6, 8 bit), Netpbm 16-bit graymap (P5, maxval 65535, big endian per
// the Netpbm spec) and a little-endian raw float container:
//   "GTRF" | u32 height | u32 width | u32 channels | float32 data[height*width*channels]

namespace gtrace {

inline constexpr char kRawFloatMagic[4] = {'G', 'T', 'R', 'F'};

namespace detail {

inline std::string read_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string &path, const std::string &bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void put_u32le(std::string &s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32le(std::string_view s, std::size_t at) {
    if (at + 4 > s.size())
        throw ParseError(at, "truncated u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

/// Parses "P? width height maxval" followed by one whitespace byte; returns the data offset.
inline std::size_t parse_pnm_header(std::string_view bytes, std::string_view magic, int &w, int &h, int &maxval) {
    if (bytes.substr(0, 2) != magic)
        throw ParseError(0, "expected " + std::string(magic) + " header");
    std::size_t pos = 2;
    int values[3];
    for (int &v : values) {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        long acc = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && acc < (1L << 30))
            acc = acc * 10 + (bytes[pos++] - '0');
        if (pos == start)
            throw ParseError(pos, "expected a number in the header");
        v = static_cast<int>(acc);
    }
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw ParseError(pos, "expected whitespace after the header");
    w = values[0];
    h = values[1];
    maxval = values[2];
    return pos + 1;
}

} // namespace detail

/// P6 bytes; channel values are clamped to [0, 1] and rounded to 8 bits.
inline std::string encode_ppm(const ImageF &img) {
    detail::require(img.channels() == 3, "encode_ppm: need 3 channels");
    std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
    out.reserve(out.size() + img.data().size());
    for (double v : img.data())
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    return out;
}

inline ImageF decode_ppm(std::string_view bytes) {
    int w, h, maxval;
    const std::size_t at = detail::parse_pnm_header(bytes, "P6", w, h, maxval);
    if (maxval != 255)
        throw ParseError(0, "only maxval 255 is supported");
    const std::size_t need = static_cast<std::size_t>(w) * h * 3;
    if (bytes.size() < at + need)
        throw ParseError(bytes.size(), "truncated pixel data");
    ImageF img(w, h, 3);
    for (std::size_t i = 0; i < need; ++i)
        img.data()[i] = static_cast<unsigned char>(bytes[at + i]) / 255.0;
    return img;
}

/// 16-bit P5 graymap of patch / instance IDs.
inline std::string encode_pgm16(const LabelImage &ids) {
    std::string out = "P5\n" + std::to_string(ids.width()) + " " + std::to_string(ids.height()) + "\n65535\n";
    for (auto id : ids.data()) {
        if (id > 65535)
            throw InvalidArgument("encode_pgm16: id " + std::to_string(id) + " exceeds 65535");
        out.push_back(static_cast<char>(id >> 8));
        out.push_back(static_cast<char>(id & 0xff));
    }
    return out;
}

inline LabelImage decode_pgm16(std::string_view bytes) {
    int w, h, maxval;
    const std::size_t at = detail::parse_pnm_header(bytes, "P5", w, h, maxval);
    if (maxval != 65535)
        throw ParseError(0, "expected maxval 65535");
    const std::size_t n = static_cast<std::size_t>(w) * h;
    if (bytes.size() < at + 2 * n)
        throw ParseError(bytes.size(), "truncated pixel data");
    LabelImage ids(w, h);
    for (std::size_t i = 0; i < n; ++i)
        ids.data()[i] = (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2 * i])) << 8) |
                        static_cast<unsigned char>(bytes[at + 2 * i + 1]);
    return ids;
}

inline std::string encode_mask_pgm(const Bitmap &mask) {
    LabelImage ids(mask.width(), mask.height());
    for (std::size_t p = 0; p < mask.pixel_count(); ++p)
        ids.data()[p] = mask.data()[p] ? 65535 : 0;
    return encode_pgm16(ids);
}

inline Bitmap decode_mask_pgm(std::string_view bytes) {
    const LabelImage ids = decode_pgm16(bytes);
    Bitmap m(ids.width(), ids.height());
    for (std::size_t p = 0; p < ids.pixel_count(); ++p)
        m.data()[p] = ids.data()[p] != 0;
    return m;
}

inline std::string encode_raw_float(const ImageF &img) {
    std::string out(kRawFloatMagic, 4);
    detail::put_u32le(out, static_cast<std::uint32_t>(img.height()));
    detail::put_u32le(out, static_cast<std::uint32_t>(img.width()));
    detail::put_u32le(out, static_cast<std::uint32_t>(img.channels()));
    for (double v : img.data()) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        detail::put_u32le(out, bits);
    }
    return out;
}

inline ImageF decode_raw_float(std::string_view bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kRawFloatMagic, 4) != 0)
        throw ParseError(0, "bad raw float magic");
    const auto h = detail::get_u32le(bytes, 4);
    const auto w = detail::get_u32le(bytes, 8);
    const auto c = detail::get_u32le(bytes, 12);
    if (c == 0)
        throw ParseError(12, "zero channels");
    const std::size_t n = static_cast<std::size_t>(h) * w * c;
    if (bytes.size() < 16 + 4 * n)
        throw ParseError(bytes.size(), "truncated float data");
    ImageF img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
    for (std::size_t i = 0; i < n; ++i)
        img.data()[i] = std::bit_cast<float>(detail::get_u32le(bytes, 16 + 4 * i));
    return img;
}

inline void write_ppm(const std::string &path, const ImageF &img) { detail::write_file(path, encode_ppm(img)); }
inline void write_pgm16(const std::string &path, const LabelImage &ids) { detail::write_file(path, encode_pgm16(ids)); }
inline void write_raw_float(const std::string &path, const ImageF &img) { detail::write_file(path, encode_raw_float(img)); }
inline LabelImage read_pgm16(const std::string &path) { return decode_pgm16(detail::read_file(path)); }
inline ImageF read_raw_float(const std::string &path) { return decode_raw_float(detail::read_file(path)); }

} // namespace gtrace

#endif // GTRACE_IMAGE_IO_HPP

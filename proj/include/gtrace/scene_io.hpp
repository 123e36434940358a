// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_SCENE_IO_HPP
#define GTRACE_SCENE_IO_HPP

#include "gtrace/error.hpp"
#include "gtrace/scene.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>

namespace gtrace {

inline constexpr std::string_view kSceneFormat = "gtrace-scene";
inline constexpr int kSceneVersion = 1;

/// Shortest decimal string that parses back to exactly `x`.
inline std::string format_double(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    if (ec != std::errc())
        throw Error("format_double: conversion failed");
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, const std::string &path) {
    double x = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc() || end != s.data() + s.size())
        throw ValidationError(path, "not a decimal number: '" + std::string(s) + "'");
    return x;
}

namespace detail {

using nlohmann::json;

template <typename Vec>
json vec_to_json(const Vec &v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i)
        a.push_back(format_double(v[i]));
    return a;
}

inline const json &field(const json &obj, const char *key, const std::string &path) {
    if (!obj.is_object())
        throw ValidationError(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end())
        throw ValidationError(path + "." + key, "missing");
    return *it;
}

inline double number_field(const json &j, const std::string &path) {
    if (!j.is_string())
        throw ValidationError(path, "expected a decimal string");
    return parse_double(j.get_ref<const std::string &>(), path);
}

inline VecX vector_field(const json &j, const std::string &path, std::size_t expected) {
    if (!j.is_array())
        throw ValidationError(path, "expected an array");
    if (expected != 0 && j.size() != expected)
        throw ValidationError(path, "expected " + std::to_string(expected) + " entries, got " + std::to_string(j.size()));
    VecX v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = number_field(j[i], path + "[" + std::to_string(i) + "]");
    return v;
}

inline std::int64_t integer_field(const json &j, const std::string &path) {
    if (!j.is_number_integer())
        throw ValidationError(path, "expected an integer");
    return j.get<std::int64_t>();
}

inline json disk_to_json(const GaussianDisk &g) {
    json o;
    o["center"] = vec_to_json(g.center);
    o["tangent_u"] = vec_to_json(g.tangent_u);
    o["tangent_v"] = vec_to_json(g.tangent_v);
    o["scale"] = json::array({format_double(g.scale_u), format_double(g.scale_v)});
    o["opacity"] = format_double(g.opacity);
    o["color"] = vec_to_json(g.color);
    o["feature"] = vec_to_json(g.feature);
    o["gt_instance"] = g.gt_instance ? json(*g.gt_instance) : json(nullptr);
    return o;
}

inline GaussianDisk disk_from_json(const json &o, std::size_t feature_dim, const std::string &path) {
    GaussianDisk g;
    g.center = vector_field(field(o, "center", path), path + ".center", 3);
    g.tangent_u = vector_field(field(o, "tangent_u", path), path + ".tangent_u", 3);
    g.tangent_v = vector_field(field(o, "tangent_v", path), path + ".tangent_v", 3);
    const VecX s = vector_field(field(o, "scale", path), path + ".scale", 2);
    g.scale_u = s[0];
    g.scale_v = s[1];
    g.opacity = number_field(field(o, "opacity", path), path + ".opacity");
    g.color = vector_field(field(o, "color", path), path + ".color", 3);
    g.feature = vector_field(field(o, "feature", path), path + ".feature", feature_dim);
    const json &gt = field(o, "gt_instance", path);
    if (!gt.is_null()) {
        const auto id = integer_field(gt, path + ".gt_instance");
        if (id < 0 || id > 0xffffffffll)
            throw ValidationError(path + ".gt_instance", "out of range");
        g.gt_instance = static_cast<InstanceId>(id);
    }
    validate(g, feature_dim, path);
    return g;
}

inline json view_to_json(const CameraView &v) {
    json o;
    o["view_index"] = v.view_index;
    json r = json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            r.push_back(format_double(v.rotation(i, j)));
    o["rotation"] = r;
    o["translation"] = vec_to_json(v.translation);
    o["fx"] = format_double(v.fx);
    o["fy"] = format_double(v.fy);
    o["cx"] = format_double(v.cx);
    o["cy"] = format_double(v.cy);
    o["width"] = v.width;
    o["height"] = v.height;
    return o;
}

inline CameraView view_from_json(const json &o, const std::string &path) {
    CameraView v;
    const auto idx = integer_field(field(o, "view_index", path), path + ".view_index");
    if (idx < 0)
        throw ValidationError(path + ".view_index", "negative");
    v.view_index = static_cast<std::uint32_t>(idx);
    const VecX r = vector_field(field(o, "rotation", path), path + ".rotation", 9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            v.rotation(i, j) = r[i * 3 + j];
    v.translation = vector_field(field(o, "translation", path), path + ".translation", 3);
    v.fx = number_field(field(o, "fx", path), path + ".fx");
    v.fy = number_field(field(o, "fy", path), path + ".fy");
    v.cx = number_field(field(o, "cx", path), path + ".cx");
    v.cy = number_field(field(o, "cy", path), path + ".cy");
    v.width = static_cast<int>(integer_field(field(o, "width", path), path + ".width"));
    v.height = static_cast<int>(integer_field(field(o, "height", path), path + ".height"));
    validate(v, path);
    return v;
}

} // namespace detail

inline nlohmann::json scene_to_json(const Scene &scene) {
    nlohmann::json root;
    root["format"] = kSceneFormat;
    root["version"] = kSceneVersion;
    root["feature_dim"] = scene.feature_dim;
    auto &gs = root["gaussians"] = nlohmann::json::array();
    for (const auto &g : scene.gaussians)
        gs.push_back(detail::disk_to_json(g));
    auto &vs = root["views"] = nlohmann::json::array();
    for (const auto &v : scene.views)
        vs.push_back(detail::view_to_json(v));
    return root;
}

inline Scene scene_from_json(const nlohmann::json &root) {
    using detail::field;
    const auto &fmt = field(root, "format", "");
    if (!fmt.is_string() || fmt.get<std::string>() != kSceneFormat)
        throw ValidationError("format", "not a gtrace scene file");
    const auto version = detail::integer_field(field(root, "version", ""), "version");
    if (version != kSceneVersion)
        throw ValidationError("version", "unsupported version " + std::to_string(version));
    const auto dim = detail::integer_field(field(root, "feature_dim", ""), "feature_dim");
    if (dim < 1)
        throw ValidationError("feature_dim", "must be >= 1");
    Scene scene;
    scene.feature_dim = static_cast<std::size_t>(dim);
    const auto &gs = field(root, "gaussians", "");
    if (!gs.is_array())
        throw ValidationError("gaussians", "expected an array");
    scene.gaussians.reserve(gs.size());
    for (std::size_t i = 0; i < gs.size(); ++i)
        scene.gaussians.push_back(detail::disk_from_json(gs[i], scene.feature_dim, "gaussians[" + std::to_string(i) + "]"));
    const auto &vs = field(root, "views", "");
    if (!vs.is_array())
        throw ValidationError("views", "expected an array");
    for (std::size_t i = 0; i < vs.size(); ++i)
        scene.views.push_back(detail::view_from_json(vs[i], "views[" + std::to_string(i) + "]"));
    return scene;
}

/// Serialises to UTF-8 JSON (see docs/scene.schema.json). Floats are shortest round-trip strings.
inline std::string save_scene(const Scene &scene) { return scene_to_json(scene).dump(1) + "\n"; }

/// Parses a scene. Throws ParseError (with byte offset) on malformed JSON and
/// ValidationError (with field path) on bad content.
inline Scene load_scene(std::string_view bytes) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(e.byte, e.what());
    }
    return scene_from_json(root);
}

inline void save_scene_file(const Scene &scene, const std::string &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot open " + path + " for writing");
    out << save_scene(scene);
}

inline Scene load_scene_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return load_scene(bytes);
}

} // namespace gtrace

#endif // GTRACE_SCENE_IO_HPP

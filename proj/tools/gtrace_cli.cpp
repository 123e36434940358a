// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Every subcommand reads the run configuration plus the artifacts
// of earlier stages from the output directory, writes its own artifacts and a JSON report
// under reports/, and exits nonzero with a JSON error object on stderr on failure.

#include "gtrace/image_io.hpp"
#include "gtrace/pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace gtrace;

namespace {

constexpr const char *kOutputEnv = "GTRACE_OUTPUT_DIR";

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::string out;
    bool timings = false;
    // eval
    std::string pred = "merged";
    std::string gt = "gt";
};

/// Raised for failures that are the caller's fault (missing inputs, bad flags).
class UsageError : public Error {
  public:
    using Error::Error;
};

struct Context {
    RunConfig cfg;
    fs::path out;
    bool timings = false;
    Options opts;

    fs::path at(const std::string &rel) const { return out / rel; }

    std::string need(const std::string &rel) const {
        const auto p = at(rel);
        if (!fs::exists(p))
            throw UsageError("missing input " + p.string() + " (run the earlier stage first)");
        return p.string();
    }
};

std::string view_name(std::size_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%02zu", v);
    return buf;
}

std::string object_name(std::uint32_t id) { return "object_" + std::to_string(id); }

void write_text(const fs::path &p, const std::string &text) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f)
        throw Error("cannot write " + p.string());
    f << text;
}

void write_bytes(const fs::path &p, const std::string &bytes) { write_text(p, bytes); }

nlohmann::json read_json(const std::string &path) {
    try {
        return nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::exception &e) {
        throw ValidationError(path, e.what());
    }
}

Context make_context(const Options &o) {
    Context c;
    c.opts = o;
    c.cfg = o.config.empty() ? run_config_from_json(nlohmann::json::object()) : run_config_from_json(read_json(o.config));
    if (o.seed)
        c.cfg.seed = *o.seed;
    if (o.threads)
        c.cfg.raster.threads = *o.threads;
    resolve(c.cfg);
    c.cfg.validate();
    if (!o.out.empty())
        c.out = o.out;
    else if (const char *env = std::getenv(kOutputEnv); env && *env)
        c.out = env;
    else
        c.out = c.cfg.output_dir;
    c.timings = o.timings;
    fs::create_directories(c.out);
    return c;
}

// ---- artifacts ----

Scene load_full_scene(const Context &c, const std::string &rel) { return load_scene_file(c.need(rel)); }

std::vector<InstanceMap> load_maps(const Context &c, const std::string &dir, std::span<const std::size_t> views) {
    std::vector<InstanceMap> maps;
    for (auto v : views)
        maps.push_back(make_instance_map(read_pgm16(c.need(dir + "/" + view_name(v) + ".pgm"))));
    return maps;
}

void save_maps(const Context &c, const std::string &dir, std::span<const InstanceMap> maps,
               std::span<const std::size_t> views) {
    fs::create_directories(c.at(dir));
    for (std::size_t k = 0; k < maps.size(); ++k)
        write_pgm16(c.at(dir + "/" + view_name(views[k]) + ".pgm").string(), maps[k].ids);
}

void save_mask(const fs::path &p, const Bitmap &m) { write_bytes(p, encode_mask_pgm(m)); }

Bitmap load_mask(const std::string &p) { return decode_mask_pgm(detail::read_file(p)); }

void save_mask_sets(const Context &c, std::span<const BinaryMaskSet> sets, std::span<const std::size_t> views) {
    ojson index = ojson::array();
    for (std::size_t k = 0; k < sets.size(); ++k) {
        const auto &s = sets[k];
        for (std::size_t j = 0; j < s.masks.size(); ++j)
            save_mask(c.at("masks/" + view_name(views[k]) + "_m" + std::to_string(j) + ".pgm"), s.masks[j]);
        ojson e;
        e["view"] = views[k];
        e["width"] = s.width;
        e["height"] = s.height;
        e["mask_count"] = s.masks.size();
        e["contains"] = ojson::array();
        for (const auto &[a, b] : s.contains)
            e["contains"].push_back({a, b});
        index.push_back(e);
    }
    write_text(c.at("masks/index.json"), index.dump(1) + "\n");
}

std::vector<BinaryMaskSet> load_mask_sets(const Context &c, std::span<const std::size_t> views) {
    const auto index = read_json(c.need("masks/index.json"));
    if (!index.is_array() || index.size() != views.size())
        throw ValidationError("masks/index.json", "does not list the training views");
    std::vector<BinaryMaskSet> sets;
    for (std::size_t k = 0; k < views.size(); ++k) {
        const auto &e = index[k];
        if (e.at("view").get<std::size_t>() != views[k])
            throw ValidationError("masks/index.json[" + std::to_string(k) + "].view", "unexpected view");
        BinaryMaskSet s;
        s.width = e.at("width").get<int>();
        s.height = e.at("height").get<int>();
        const auto n = e.at("mask_count").get<std::size_t>();
        for (std::size_t j = 0; j < n; ++j)
            s.masks.push_back(load_mask(c.need("masks/" + view_name(views[k]) + "_m" + std::to_string(j) + ".pgm")));
        for (const auto &edge : e.at("contains"))
            s.contains.emplace_back(edge.at(0).get<std::uint32_t>(), edge.at(1).get<std::uint32_t>());
        sets.push_back(std::move(s));
    }
    return sets;
}

std::vector<std::uint32_t> read_selection(const Context &c, const std::string &rel) {
    return read_json(c.need(rel)).at("selection").get<std::vector<std::uint32_t>>();
}

// ---- reports and timings ----

using Clock = std::chrono::steady_clock;

void record_timing(const Context &c, const std::string &stage, double seconds) {
    const auto p = c.at("timings.json");
    ojson t = ojson::object();
    if (fs::exists(p))
        t = ojson::parse(detail::read_file(p.string()));
    t[stage] = seconds;
    write_text(p, t.dump(1) + "\n");
}

void write_report(const Context &c, const std::string &stage, ojson metrics, double seconds) {
    ojson timings = ojson::object();
    if (c.timings)
        timings["seconds"] = seconds;
    const auto r = make_report(stage, std::move(metrics), std::move(timings));
    write_text(c.at("reports/" + stage + ".json"), r.dump(1) + "\n");
}

ViewSplit split_of(const Context &c, const Scene &scene) { return split_views(scene.views.size(), c.cfg.heldout_views); }

Scene with_views(Scene s, const Scene &views_from) {
    s.views = views_from.views;
    return s;
}

// ---- stages ----

ojson run_generate(const Context &c) {
    const Scene scene = stage_generate(c.cfg);
    validate(scene);
    save_scene_file(scene, c.at("scene.json").string());
    ojson m;
    m["n_gaussians"] = scene.gaussians.size();
    m["n_views"] = scene.views.size();
    m["feature_dim"] = scene.feature_dim;
    m["objects"] = object_ids(stage_gtmaps(scene, c.cfg.raster));
    return m;
}

ojson run_render(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    ojson m;
    m["fragments"] = ojson::array();
    for (std::size_t v = 0; v < scene.views.size(); ++v) {
        const auto out = render(scene, v, c.cfg.raster);
        write_bytes(c.at("render/" + view_name(v) + ".ppm"), encode_ppm(out.color));
        m["fragments"].push_back(out.fragment_count);
    }
    return m;
}

ojson run_gtmaps(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const auto maps = stage_gtmaps(scene, c.cfg.raster);
    std::vector<std::size_t> all(scene.views.size());
    for (std::size_t v = 0; v < all.size(); ++v)
        all[v] = v;
    save_maps(c, "gt", maps, all);
    ojson m;
    m["objects"] = object_ids(maps);
    m["labeled_pixels"] = ojson::array();
    for (const auto &map : maps)
        m["labeled_pixels"].push_back(map.ids.pixel_count() - map.pixel_counts[0]);
    return m;
}

ojson run_inject(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const auto split = split_of(c, scene);
    const auto gt = load_maps(c, "gt", split.train);
    const auto inj = stage_inject(gt, c.cfg.injector);
    save_mask_sets(c, inj.masks, split.train);
    save_maps(c, "patches", inj.patches, split.train);
    ojson m;
    m["train_views"] = split.train;
    m["mask_counts"] = ojson::array();
    for (const auto &s : inj.masks)
        m["mask_counts"].push_back(s.masks.size());
    m["patch_metrics"] = map_metrics(inj.patches, gt);
    return m;
}

Injected load_injected(const Context &c, std::span<const std::size_t> train) {
    Injected inj;
    inj.masks = load_mask_sets(c, train);
    for (const auto &s : inj.masks)
        inj.patches.push_back(overlap_masks(s));
    return inj;
}

ojson run_trace(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const auto split = split_of(c, scene);
    const auto inj = load_injected(c, split.train);
    const auto wm = trace_all(select_views(scene, split.train), inj.patches, c.cfg.trace);
    write_bytes(c.at("weights.bin"), encode_weight_matrix(wm));
    ojson m;
    m["n_gaussians"] = wm.gaussian_count;
    m["n_views"] = wm.views.size();
    ojson visible = ojson::array();
    for (const auto &rows : wm.views) {
        std::size_t n = 0;
        for (std::size_t i = 0; i < wm.gaussian_count; ++i)
            n += rows.visible(i);
        visible.push_back(n);
    }
    m["visible_per_view"] = visible;
    return m;
}

ojson run_merge(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const auto split = split_of(c, scene);
    const auto inj = load_injected(c, split.train);
    const auto wm = decode_weight_matrix(detail::read_file(c.need("weights.bin")));
    const auto gt = load_maps(c, "gt", split.train);
    const auto ms = stage_merge(wm, inj, gt, c.cfg.merge);
    save_maps(c, "merged", ms.result.maps, split.train);
    write_text(c.at("merge_log.jsonl"), merge_log_jsonl(ms.result));
    return ms.metrics;
}

ojson run_refine(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const auto split = split_of(c, scene);
    const auto merged = load_maps(c, "merged", split.train);
    const auto r = stage_refine(select_views(scene, split.train), merged, c.cfg);
    save_scene_file(with_views(r.scene, scene), c.at("scene_refined.json").string());
    write_text(c.at("rounds.jsonl"), rounds_jsonl(r));
    return refine_metrics(r);
}

ojson run_lift(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const auto split = split_of(c, scene);
    const Scene refined = load_full_scene(c, "scene_refined.json");
    const auto merged = load_maps(c, "merged", split.train);
    ContrastiveTrace trace;
    const Scene train = select_views(refined, split.train);
    const Scene lifted = train_contrastive(train, merged, c.cfg.contrastive, &trace);
    save_scene_file(with_views(lifted, scene), c.at("scene_lifted.json").string());
    std::string lines;
    for (std::size_t k = 0; k < trace.loss.size(); ++k) {
        ojson l;
        l["step"] = k;
        l["view"] = trace.view[k];
        l["loss"] = number(trace.loss[k]);
        lines += l.dump() + "\n";
    }
    write_text(c.at("lift_loss.jsonl"), lines);
    ojson m;
    m["steps"] = trace.loss.size();
    m["loss_first"] = trace.loss.empty() ? ojson(nullptr) : number(trace.loss.front());
    m["loss_last"] = trace.loss.empty() ? ojson(nullptr) : number(trace.loss.back());
    const double tau = c.cfg.contrastive.tau;
    m["separation_before"] = number(feature_separation(train, merged, tau, 128, c.cfg.stream("lift/eval"), c.cfg.raster));
    m["separation_after"] = number(feature_separation(lifted, merged, tau, 128, c.cfg.stream("lift/eval"), c.cfg.raster));
    return m;
}

ojson run_segment(const Context &c) {
    const Scene lifted = load_full_scene(c, "scene_lifted.json");
    const auto split = split_of(c, lifted);
    std::vector<std::size_t> all(lifted.views.size());
    for (std::size_t v = 0; v < all.size(); ++v)
        all[v] = v;
    const auto gt = load_maps(c, "gt", all);
    const auto qs = stage_segment(lifted, split, gt, c.cfg);
    for (const auto &q : qs) {
        const auto dir = "segment/" + object_name(q.id);
        std::vector<std::optional<double>> iou(lifted.views.size());
        for (std::size_t k = 0; k < split.heldout.size(); ++k)
            iou[split.heldout[k]] = q.heldout_iou[k];
        for (std::size_t k = 0; k < split.train.size(); ++k)
            save_mask(c.at(dir + "/" + view_name(split.train[k]) + ".pgm"), q.query.masks[k]);
        for (std::size_t k = 0; k < split.heldout.size(); ++k)
            save_mask(c.at(dir + "/" + view_name(split.heldout[k]) + ".pgm"), q.heldout[k]);
        auto manifest = query_manifest(q.query, iou);
        manifest["selection"] = q.query.selection;
        write_text(c.at(dir + ".json"), manifest.dump(1) + "\n");
    }
    return segment_metrics(qs);
}

ojson run_extract(const Context &c) {
    const Scene scene = load_full_scene(c, "scene.json");
    const Scene lifted = load_full_scene(c, "scene_lifted.json");
    const auto split = split_of(c, scene);
    std::vector<std::size_t> all(scene.views.size());
    for (std::size_t v = 0; v < all.size(); ++v)
        all[v] = v;
    const auto gt = load_maps(c, "gt", all);
    ojson m = ojson::array();
    for (auto id : object_ids(std::span(&gt[split.train[c.cfg.reference_view]], 1))) {
        const auto sel = read_selection(c, "segment/" + object_name(id) + ".json");
        const Scene part = subset_scene(lifted, sel);
        for (auto v : split.heldout)
            write_bytes(c.at("extract/" + object_name(id) + "_" + view_name(v) + ".ppm"),
                        encode_ppm(render(part, v, c.cfg.raster).color));
        auto o = extraction_render_metrics(lifted, sel, id, scene, gt, c.cfg.raster);
        ojson e;
        e["object"] = id;
        e["n_selected"] = sel.size();
        for (auto &[k, val] : o.items())
            e[k] = val;
        m.push_back(e);
    }
    return m;
}

ojson run_selfprompt(const Context &c) {
    const Scene refined = load_full_scene(c, "scene_refined.json");
    const auto split = split_of(c, refined);
    std::vector<std::size_t> all(refined.views.size());
    for (std::size_t v = 0; v < all.size(); ++v)
        all[v] = v;
    const auto gt = load_maps(c, "gt", all);
    const auto ps = stage_selfprompt(refined, split, gt, c.cfg);
    for (const auto &p : ps) {
        const auto dir = "selfprompt/" + object_name(p.id);
        for (std::size_t k = 0; k < split.heldout.size(); ++k)
            save_mask(c.at(dir + "/" + view_name(split.heldout[k]) + ".pgm"),
                      selection_mask(refined, split.heldout[k], p.result.selection, c.cfg.raster));
        ojson manifest;
        manifest["visited"] = ojson::array();
        for (auto v : p.result.visited)
            manifest["visited"].push_back(split.train[v]);
        manifest["prompts"] = ojson::array();
        for (const auto &pts : p.result.prompts) {
            ojson a = ojson::array();
            for (const auto &q : pts)
                a.push_back({q.x, q.y});
            manifest["prompts"].push_back(a);
        }
        manifest["heldout_iou"] = p.heldout_iou;
        manifest["selection"] = p.result.selection;
        write_text(c.at(dir + ".json"), manifest.dump(1) + "\n");
    }
    return selfprompt_metrics(refined, ps);
}

ojson run_eval(const Context &c) {
    const fs::path pred = fs::path(c.opts.pred).is_absolute() ? fs::path(c.opts.pred) : c.at(c.opts.pred);
    const fs::path gt = fs::path(c.opts.gt).is_absolute() ? fs::path(c.opts.gt) : c.at(c.opts.gt);
    if (!fs::is_directory(pred) || !fs::is_directory(gt))
        throw UsageError("eval: " + pred.string() + " and " + gt.string() + " must be directories");
    std::vector<std::string> names;
    for (const auto &e : fs::directory_iterator(pred))
        if (e.path().extension() == ".pgm")
            names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty())
        throw UsageError("eval: no .pgm maps in " + pred.string());
    std::vector<InstanceMap> p, g;
    for (const auto &n : names) {
        if (!fs::exists(gt / n))
            throw UsageError("eval: " + (gt / n).string() + " is missing");
        p.push_back(make_instance_map(read_pgm16((pred / n).string())));
        g.push_back(make_instance_map(read_pgm16((gt / n).string())));
    }
    ojson m;
    m["maps"] = names;
    const auto metrics = map_metrics(p, g);
    for (const auto &[k, v] : metrics.items())
        m[k] = v;
    return m;
}

const std::vector<std::string> kPipeline = {"generate", "gtmaps",  "inject",  "trace",      "merge",
                                            "refine",   "lift",    "segment", "extract",    "selfprompt"};

ojson run_report(const Context &c) {
    ojson m;
    for (const auto &s : kPipeline) {
        const auto p = c.at("reports/" + s + ".json");
        if (!fs::exists(p))
            continue;
        const auto r = read_json(p.string());
        check_report(r);
        m[s] = ojson::parse(r["metrics"].dump());
    }
    return m;
}

using StageFn = std::function<ojson(const Context &)>;

const std::map<std::string, StageFn> &stages() {
    static const std::map<std::string, StageFn> s = {
        {"generate", run_generate}, {"render", run_render},   {"gtmaps", run_gtmaps},   {"inject", run_inject},
        {"trace", run_trace},       {"merge", run_merge},     {"refine", run_refine},   {"lift", run_lift},
        {"segment", run_segment},   {"extract", run_extract}, {"selfprompt", run_selfprompt},
        {"eval", run_eval},
    };
    return s;
}

void run_stage(const Context &c, const std::string &name) {
    const auto t0 = Clock::now();
    ojson metrics = stages().at(name)(c);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    record_timing(c, name, dt);
    write_report(c, name, std::move(metrics), dt);
}

void run_final_report(const Context &c) {
    ojson timings = ojson::object();
    if (c.timings && fs::exists(c.at("timings.json")))
        timings = ojson::parse(detail::read_file(c.at("timings.json").string()));
    const auto r = make_report("pipeline", run_report(c), timings);
    write_text(c.at("report.json"), r.dump(1) + "\n");
}

int fail(const std::string &stage, const std::string &type, const std::string &message, int code) {
    nlohmann::ordered_json e;
    e["error"]["stage"] = stage;
    e["error"]["type"] = type;
    e["error"]["message"] = message;
    std::cerr << e.dump() << "\n";
    return code;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Gaussian instance tracing pipeline"};
    app.require_subcommand(1, 1);
    Options o;
    auto add_common = [&](CLI::App *sub) {
        sub->add_option("--config", o.config, "run configuration (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "override the global seed");
        sub->add_option("--threads", o.threads, "cap worker threads (results do not depend on it)");
        sub->add_option("--out", o.out, std::string("output directory (else $") + kOutputEnv + ", else config)");
        sub->add_flag("--timings", o.timings, "include wall-clock seconds in reports");
    };
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"generate", "build the synthetic scene"},
        {"render", "render every view of scene.json"},
        {"gtmaps", "ground-truth instance maps"},
        {"inject", "corrupted per-view masks and patch maps"},
        {"trace", "trace patch labels onto Gaussians"},
        {"merge", "associate patches into consistent instances"},
        {"refine", "split and prune ambiguous Gaussians"},
        {"lift", "train instance features"},
        {"segment", "query-based segmentation"},
        {"extract", "render extracted objects"},
        {"selfprompt", "segmentation from point prompts"},
        {"eval", "mIoU/mAcc of predicted against reference label maps"},
        {"pipeline", "run every stage in order"},
        {"report", "collect stage reports into report.json"},
    };
    for (const auto &[name, help] : commands) {
        auto *sub = app.add_subcommand(name, help);
        add_common(sub);
        if (name == "eval") {
            sub->add_option("--pred", o.pred, "predicted maps directory (relative to the output dir)");
            sub->add_option("--gt", o.gt, "reference maps directory (relative to the output dir)");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return fail("cli", "usage", e.what(), 2);
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    std::string stage = cmd;
    try {
        const Context c = make_context(o);
        if (cmd == "pipeline") {
            for (const auto &s : kPipeline) {
                stage = s;
                run_stage(c, s);
            }
            stage = "report";
            run_final_report(c);
        } else if (cmd == "report") {
            run_final_report(c);
        } else {
            run_stage(c, cmd);
        }
    } catch (const UsageError &e) {
        return fail(stage, "usage", e.what(), 2);
    } catch (const ValidationError &e) {
        return fail(stage, "validation", e.what(), 1);
    } catch (const ParseError &e) {
        return fail(stage, "parse", e.what(), 1);
    } catch (const ViewError &e) {
        return fail(stage, "view", e.what(), 1);
    } catch (const std::exception &e) {
        return fail(stage, "error", e.what(), 1);
    }
    return 0;
}

// Command implementations behind the atlas_istn executable.
//
// A run is described by a flat key = value config. Defaults come from
// default_config(); a config file and command-line flags override them in
// that order. Every command writes the resolved config to its output
// directory, and every report carries the config hash, seed and version.

#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlas_istn/pipeline.hpp"

#ifndef ATLAS_ISTN_VERSION
#define ATLAS_ISTN_VERSION "0.0.0"
#endif

namespace atlas_istn::cli {

// Bad flags, unknown keys or malformed values. Maps to exit code 1.
class usage_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using ConfigMap = std::map<std::string, std::string>;

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline ConfigMap default_config() {
    const DatasetSpec d;
    const TrainConfig t;
    const RefineConfig r;
    auto f = format_double;
    auto u = [](std::size_t v) { return std::to_string(v); };
    return {
        {"seed", "0"},
        {"data.dir", ""},
        {"data.n_train", u(d.n_train)},
        {"data.n_val", u(d.n_val)},
        {"data.n_test", u(d.n_test)},
        {"glyph.foreground", f(d.glyph.foreground)},
        {"glyph.background", f(d.glyph.background)},
        {"glyph.noise_sigma", f(d.glyph.noise_sigma)},
        {"warp.rotation_deg", f(d.warp.rotation_deg)},
        {"warp.scale_min", f(d.warp.scale_min)},
        {"warp.scale_max", f(d.warp.scale_max)},
        {"warp.translation_px", f(d.warp.translation_px)},
        {"warp.bspline_sigma", f(d.warp.bspline_sigma)},
        {"warp.max_retries", u(d.warp.max_retries)},
        {"clutter.min_count", u(d.clutter.min_count)},
        {"clutter.max_count", u(d.clutter.max_count)},
        {"clutter.intensity_min", f(d.clutter.intensity_min)},
        {"clutter.intensity_max", f(d.clutter.intensity_max)},
        {"clutter.keep_out_margin", u(d.clutter.keep_out_margin)},
        {"train.variant", variant_name(t.variant)},
        {"train.epochs", u(t.epochs)},
        {"train.batch_size", u(t.batch_size)},
        {"train.lr0", f(t.lr0)},
        {"train.lr_half_life", f(t.lr_half_life)},
        {"train.affine_start_epoch", u(t.affine_start_epoch)},
        {"train.eta", f(t.eta)},
        {"train.lambda", f(t.weights.lambda)},
        {"train.omega", f(t.weights.omega.value)},
        {"train.omega_schedule", "constant"},
        {"train.omega_center", f(t.weights.omega.center)},
        {"train.omega_width", f(t.weights.omega.width)},
        {"train.n_squarings", u(t.n_squarings)},
        {"train.checkpoint_every", "25"},
        {"aug.enabled", "true"},
        {"aug.translation_px", f(t.augment.translation_px)},
        {"aug.rotation_deg", f(t.augment.rotation_deg)},
        {"aug.scale_min", f(t.augment.scale_min)},
        {"aug.scale_max", f(t.augment.scale_max)},
        {"itn.base_filters", u(t.itn.base_filters)},
        {"itn.scales", u(t.itn.scales)},
        {"stn.base_filters", u(t.stn.base_filters)},
        {"stn.scales", u(t.stn.scales)},
        {"stn.affine_hidden", u(t.stn.affine_hidden)},
        {"refine.iterations", u(r.iterations)},
        {"refine.lr", f(r.lr)},
        {"refine.beta_star", f(r.beta_star)},
        {"refine.gamma_star", f(r.gamma_star)},
        {"refine.lambda_star", f(r.lambda_star)},
        {"eval.checkpoint", ""},
        {"eval.split", "test_corrupt"},
        {"eval.modes", "itn,itn_1cc,1pass,refine"},
        {"eval.workers", "1"},
        {"eval.inverse_consistency", "true"},
        {"eval.save_masks", "true"},
        {"eval.max_cases", "0"},
        {"sweep.grid", "0.1,0.3,1,3,10,30"},
        {"map.case_i", "0"},
        {"map.case_j", "1"},
    };
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

// Applies `key = value` lines ('#' starts a comment) on top of `base`.
inline void apply_config_text(ConfigMap& base, const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw usage_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        if (!base.count(key)) throw usage_error(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        base[key] = trim(line.substr(eq + 1));
    }
}

inline void set_key(ConfigMap& c, const std::string& key, const std::string& value) {
    if (!c.count(key)) throw usage_error("unknown config key '" + key + "'");
    c[key] = value;
}

inline std::string serialize_config(const ConfigMap& c) {
    std::string out;
    for (const auto& [k, v] : c) out += k + " = " + v + "\n";
    return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string config_hash(const ConfigMap& c) { return hex64(fnv1a64(serialize_config(c))); }

// Hash over the keys that shape a training run, used to refuse resuming a
// checkpoint written under a different setup.
inline std::string training_hash(const ConfigMap& c) {
    std::string s;
    for (const auto& [k, v] : c)
        if (k.rfind("eval.", 0) && k.rfind("sweep.", 0) && k.rfind("map.", 0) && k.rfind("refine.", 0) &&
            k != "train.checkpoint_every" && k != "train.epochs")
            s += k + "=" + v + "\n";
    return hex64(fnv1a64(s));
}

namespace detail {

inline double get_double(const ConfigMap& c, const std::string& k) {
    const std::string& v = c.at(k);
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw usage_error("config '" + k + "': not a number: '" + v + "'");
    return out;
}

inline std::uint64_t get_uint(const ConfigMap& c, const std::string& k) {
    const std::string& v = c.at(k);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw usage_error("config '" + k + "': not a non-negative integer: '" + v + "'");
    return out;
}

inline bool get_bool(const ConfigMap& c, const std::string& k) {
    const std::string& v = c.at(k);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw usage_error("config '" + k + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

}  // namespace detail

struct EvalSettings {
    std::filesystem::path checkpoint;
    Split split = Split::test_corrupt;
    std::vector<Mode> modes;
    std::size_t workers = 1;
    bool inverse_consistency = true;
    bool save_masks = true;
    std::size_t max_cases = 0;  // 0 = all
};

struct RunConfig {
    ConfigMap raw;
    std::uint64_t seed = 0;
    std::filesystem::path data_dir;
    DatasetSpec data;
    TrainConfig train;
    std::size_t checkpoint_every = 25;
    RefineConfig refine;
    EvalSettings eval;
    std::vector<double> sweep_grid;
    std::size_t case_i = 0, case_j = 1;
};

inline RunConfig resolve(const ConfigMap& c) {
    using namespace detail;
    RunConfig r;
    r.raw = c;
    try {
        r.seed = get_uint(c, "seed");
        r.data_dir = c.at("data.dir");
        r.data.seed = r.seed;
        r.data.n_train = get_uint(c, "data.n_train");
        r.data.n_val = get_uint(c, "data.n_val");
        r.data.n_test = get_uint(c, "data.n_test");
        r.data.glyph.foreground = get_double(c, "glyph.foreground");
        r.data.glyph.background = get_double(c, "glyph.background");
        r.data.glyph.noise_sigma = get_double(c, "glyph.noise_sigma");
        r.data.warp.rotation_deg = get_double(c, "warp.rotation_deg");
        r.data.warp.scale_min = get_double(c, "warp.scale_min");
        r.data.warp.scale_max = get_double(c, "warp.scale_max");
        r.data.warp.translation_px = get_double(c, "warp.translation_px");
        r.data.warp.bspline_sigma = get_double(c, "warp.bspline_sigma");
        r.data.warp.max_retries = get_uint(c, "warp.max_retries");
        r.data.clutter.min_count = get_uint(c, "clutter.min_count");
        r.data.clutter.max_count = get_uint(c, "clutter.max_count");
        r.data.clutter.intensity_min = get_double(c, "clutter.intensity_min");
        r.data.clutter.intensity_max = get_double(c, "clutter.intensity_max");
        r.data.clutter.keep_out_margin = get_uint(c, "clutter.keep_out_margin");
        if (r.data.clutter.min_count > r.data.clutter.max_count)
            throw usage_error("config: clutter.min_count exceeds clutter.max_count");

        auto& t = r.train;
        t.seed = r.seed;
        t.variant = parse_variant(c.at("train.variant"));
        t.epochs = get_uint(c, "train.epochs");
        t.batch_size = get_uint(c, "train.batch_size");
        t.lr0 = get_double(c, "train.lr0");
        t.lr_half_life = get_double(c, "train.lr_half_life");
        t.affine_start_epoch = get_uint(c, "train.affine_start_epoch");
        t.eta = get_double(c, "train.eta");
        t.weights.lambda = get_double(c, "train.lambda");
        t.weights.omega.value = get_double(c, "train.omega");
        const std::string sched = c.at("train.omega_schedule");
        if (sched == "constant")
            t.weights.omega.kind = OmegaSchedule::Kind::constant;
        else if (sched == "sigmoid_fade")
            t.weights.omega.kind = OmegaSchedule::Kind::sigmoid_fade;
        else
            throw usage_error("config 'train.omega_schedule': expected constant or sigmoid_fade");
        t.weights.omega.center = get_double(c, "train.omega_center");
        t.weights.omega.width = get_double(c, "train.omega_width");
        t.n_squarings = get_uint(c, "train.n_squarings");
        r.checkpoint_every = get_uint(c, "train.checkpoint_every");
        t.augment.enabled = get_bool(c, "aug.enabled");
        t.augment.translation_px = get_double(c, "aug.translation_px");
        t.augment.rotation_deg = get_double(c, "aug.rotation_deg");
        t.augment.scale_min = get_double(c, "aug.scale_min");
        t.augment.scale_max = get_double(c, "aug.scale_max");
        t.itn.base_filters = get_uint(c, "itn.base_filters");
        t.itn.scales = get_uint(c, "itn.scales");
        t.stn.base_filters = get_uint(c, "stn.base_filters");
        t.stn.scales = get_uint(c, "stn.scales");
        t.stn.affine_hidden = get_uint(c, "stn.affine_hidden");
        t.validate();
        t.itn_config().validate();
        t.stn_config().validate();

        r.refine.iterations = get_uint(c, "refine.iterations");
        r.refine.lr = get_double(c, "refine.lr");
        r.refine.beta_star = get_double(c, "refine.beta_star");
        r.refine.gamma_star = get_double(c, "refine.gamma_star");
        r.refine.lambda_star = get_double(c, "refine.lambda_star");
        r.refine.n_squarings = t.n_squarings;
        r.refine.weights().validate();

        r.eval.checkpoint = c.at("eval.checkpoint");
        r.eval.split = parse_split(c.at("eval.split"));
        for (const auto& m : split_list(c.at("eval.modes"))) r.eval.modes.push_back(parse_mode(m));
        if (r.eval.modes.empty()) throw usage_error("config 'eval.modes' is empty");
        r.eval.workers = std::max<std::uint64_t>(1, get_uint(c, "eval.workers"));
        r.eval.inverse_consistency = get_bool(c, "eval.inverse_consistency");
        r.eval.save_masks = get_bool(c, "eval.save_masks");
        r.eval.max_cases = get_uint(c, "eval.max_cases");

        for (const auto& v : split_list(c.at("sweep.grid"))) {
            ConfigMap one{{"v", v}};
            r.sweep_grid.push_back(get_double(one, "v"));
        }
        r.case_i = get_uint(c, "map.case_i");
        r.case_j = get_uint(c, "map.case_j");
    } catch (const usage_error&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw usage_error(e.what());
    }
    return r;
}

// ---- shared helpers ----------------------------------------------------

inline nlohmann::json provenance(const RunConfig& rc, const std::string& command) {
    return {{"command", command},
            {"version", ATLAS_ISTN_VERSION},
            {"config_hash", config_hash(rc.raw)},
            {"seed", rc.seed}};
}

inline void write_resolved_config(const std::filesystem::path& out, const RunConfig& rc) {
    write_text(out / "config.txt", serialize_config(rc.raw));
}

// Dataset from data.dir when it holds a manifest, otherwise generated in
// memory from the config (generation is a pure function of the spec).
inline Dataset obtain_dataset(const RunConfig& rc) {
    if (!rc.data_dir.empty()) {
        if (!std::filesystem::exists(rc.data_dir / "manifest.json"))
            throw std::runtime_error("no manifest.json in data directory " + rc.data_dir.string());
        return load_dataset(rc.data_dir);
    }
    return generate_dataset(rc.data);
}

inline void log_line(const std::string& s) { std::cerr << s << std::endl; }

// ---- generate ----------------------------------------------------------

inline int cmd_generate(const RunConfig& rc, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    const Dataset d = generate_dataset(rc.data);
    write_dataset(out, rc.data, d);
    write_resolved_config(out, rc);
    log_line("generated " + std::to_string(d.train.size() + d.val.size() + d.test_clean.size() + d.test_corrupt.size()) +
             " samples in " + out.string());
    return 0;
}

// ---- train -------------------------------------------------------------

inline bool has_atlas_updates(Variant v) { return v != Variant::itn_only && v != Variant::fixed_atlas; }

inline void write_history(const std::filesystem::path& out, const TrainState& st) {
    std::string lines;
    for (const auto& r : st.history) lines += to_json(r).dump() + "\n";
    write_text(out / "history.jsonl", lines);
}

// Writes the checkpoint into a scratch directory, then swaps it in, so an
// interrupted run always leaves a complete checkpoint behind.
inline void write_checkpoint(const std::filesystem::path& out, const RunConfig& rc, const TrainState& st) {
    const auto tmp = out / "checkpoint.tmp", dst = out / "checkpoint";
    std::filesystem::remove_all(tmp);
    save_train_state(tmp, st);
    write_text(tmp / "training_hash.txt", training_hash(rc.raw) + "\n");
    std::filesystem::remove_all(dst);
    std::filesystem::rename(tmp, dst);
    write_history(out, st);
}

inline int cmd_train(const RunConfig& rc, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    write_resolved_config(out, rc);
    const Dataset d = obtain_dataset(rc);
    const TrainConfig& cfg = rc.train;
    TrainState st;
    if (std::filesystem::exists(out / "checkpoint" / "state.json")) {
        const std::string saved = trim(read_text(out / "checkpoint" / "training_hash.txt"));
        if (saved != training_hash(rc.raw))
            throw std::runtime_error("checkpoint in " + out.string() + " was written with a different configuration");
        st = load_train_state(out / "checkpoint");
        log_line("resuming from epoch " + std::to_string(st.epoch));
    } else {
        st = init_train_state(d.train, cfg);
    }
    const auto t0 = std::chrono::steady_clock::now();
    train(st, d.train, d.val, cfg, [&](const TrainState& s) {
        const auto& r = s.history.back();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[256];
        std::snprintf(buf, sizeof buf, "epoch %zu  seg %.4f a2s %.4f s2a %.4f reg %.4f  val dsc itn %.4f 1pass %.4f  %.0fs",
                      r.epoch, r.seg, r.a2s, r.s2a, r.reg, r.val_dsc_itn, r.val_dsc_1pass, secs);
        log_line(buf);
        const bool last = s.epoch == cfg.epochs;
        if (last || (rc.checkpoint_every && s.epoch % rc.checkpoint_every == 0)) {
            write_checkpoint(out, rc, s);
            if (has_atlas_updates(cfg.variant)) {
                char dir[32];
                std::snprintf(dir, sizeof dir, "atlas/epoch_%04zu", s.epoch);
                std::filesystem::create_directories(out / dir);
                export_atlas_pgm(out / dir, s.atlas);
            }
        }
    });
    if (cfg.epochs == 0 || st.history.size() < cfg.epochs) write_checkpoint(out, rc, st);
    const auto topo = topology(foreground_masks(st.atlas.labelmap).front());
    nlohmann::json report = provenance(rc, "train");
    report["variant"] = variant_name(cfg.variant);
    report["epochs"] = st.epoch;
    report["atlas_topology"] = {{"components", topo.components}, {"holes", topo.holes}};
    if (!st.history.empty()) report["final"] = to_json(st.history.back());
    write_text(out / "train_report.json", report.dump(2) + "\n");
    return 0;
}

// ---- evaluation --------------------------------------------------------

struct LoadedRun {
    RunConfig config;  // the training run's resolved config
    TrainState state;
};

inline LoadedRun load_run(const std::filesystem::path& train_dir) {
    if (!std::filesystem::exists(train_dir / "checkpoint" / "state.json"))
        throw std::runtime_error("no checkpoint under " + train_dir.string());
    ConfigMap c = default_config();
    apply_config_text(c, read_text(train_dir / "config.txt"), (train_dir / "config.txt").string());
    return {resolve(c), load_train_state(train_dir / "checkpoint")};
}

inline bool run_affine_active(const LoadedRun& run) { return affine_active(run.config.train, run.state.epoch); }

inline EvalOptions eval_options(const RunConfig& rc, const LoadedRun& run, std::vector<Mode> modes) {
    EvalOptions o;
    o.modes = std::move(modes);
    o.refine = rc.refine;
    o.refine.n_squarings = run.config.train.n_squarings;
    o.variant = run.config.train.variant;
    o.affine = run_affine_active(run);
    o.inverse_consistency = rc.eval.inverse_consistency;
    o.workers = rc.eval.workers;
    if (o.variant == Variant::itn_only) {
        o.independent_stn = true;
        o.independent_seed = run.config.seed * 2 + 2;
    }
    const bool wants_itn = has_mode(o, Mode::itn) || has_mode(o, Mode::itn_1cc);
    if (o.variant == Variant::vml && (wants_itn || has_mode(o, Mode::refine)))
        throw usage_error("variant vml has no ITN; only mode 1pass is available");
    return o;
}

inline std::vector<Sample> eval_cases(const RunConfig& rc, const Dataset& d, Split split) {
    std::vector<Sample> cases = d.split(split);
    if (rc.eval.max_cases && cases.size() > rc.eval.max_cases) cases.resize(rc.eval.max_cases);
    if (cases.empty()) throw std::runtime_error(std::string("split ") + split_name(split) + " is empty");
    return cases;
}

inline void save_case_masks(const std::filesystem::path& out, const std::vector<CaseResult>& results,
                            const std::vector<Mode>& modes) {
    for (const auto& r : results) {
        char name[32];
        std::snprintf(name, sizeof name, "%04zu.pgm", r.index);
        for (Mode m : modes) {
            const Mask* mask = nullptr;
            Mask cc;
            switch (m) {
                case Mode::itn: mask = &r.itn_mask; break;
                case Mode::itn_1cc: cc = largest_component(r.itn_mask); mask = &cc; break;
                case Mode::one_pass: mask = &r.one_pass_mask; break;
                case Mode::refine: mask = &r.refine_mask; break;
            }
            GrayImage g{mask->height, mask->width, std::vector<std::uint8_t>(mask->pixels.size())};
            for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = mask->pixels[i] ? 255 : 0;
            save_pgm(out / "masks" / mode_name(m) / name, g);
        }
    }
}

inline nlohmann::json run_meta(const LoadedRun& run) {
    return {{"variant", variant_name(run.config.train.variant)},
            {"trained_epochs", run.state.epoch},
            {"training_config_hash", config_hash(run.config.raw)},
            {"affine_active", run_affine_active(run)}};
}

inline int cmd_evaluate(const RunConfig& rc, const std::filesystem::path& out) {
    if (rc.eval.checkpoint.empty()) throw usage_error("evaluate needs --checkpoint");
    std::filesystem::create_directories(out);
    write_resolved_config(out, rc);
    const LoadedRun run = load_run(rc.eval.checkpoint);
    const auto opts = eval_options(rc, run, rc.eval.modes);
    const Dataset d = obtain_dataset(rc);
    const auto cases = eval_cases(rc, d, rc.eval.split);
    const auto results = evaluate_cases(cases, run.state.model, run.state.atlas, opts);
    if (rc.eval.save_masks) save_case_masks(out, results, opts.modes);
    nlohmann::json report = provenance(rc, "evaluate");
    report["model"] = run_meta(run);
    report["split"] = split_name(rc.eval.split);
    report["refine"] = {{"iterations", rc.refine.iterations}, {"lr", rc.refine.lr}, {"beta_star", rc.refine.beta_star},
                        {"gamma_star", rc.refine.gamma_star}, {"lambda_star", rc.refine.lambda_star}};
    report["asd"] = "symmetric mean over both boundaries";
    report["summary"] = summary_json(results, opts.modes);
    report["cases"] = cases_json(results);
    write_text(out / "report.json", report.dump(2) + "\n");
    for (Mode m : opts.modes) {
        const auto s = summarize(results, mode_name(m));
        char buf[200];
        std::snprintf(buf, sizeof buf, "%-8s dsc %.4f  asd %.3f  hd %.3f  topology ok %.2f", mode_name(m), s.dsc_mean,
                      s.asd_mean, s.hd_mean, s.topology_ok_rate);
        log_line(buf);
    }
    return 0;
}

inline int cmd_sweep_lambda(const RunConfig& rc, const std::filesystem::path& out) {
    if (rc.eval.checkpoint.empty()) throw usage_error("sweep-lambda needs --checkpoint");
    if (rc.sweep_grid.empty()) throw usage_error("sweep-lambda: empty lambda grid");
    std::filesystem::create_directories(out);
    write_resolved_config(out, rc);
    const LoadedRun run = load_run(rc.eval.checkpoint);
    const Dataset d = obtain_dataset(rc);
    nlohmann::json report = provenance(rc, "sweep-lambda");
    report["model"] = run_meta(run);
    report["grid"] = rc.sweep_grid;
    std::string csv = "lambda_star,split,mode,dsc_mean,dsc_std,asd_mean,hd_mean,topology_ok_rate\n";
    auto csv_row = [&](const std::string& lam, const char* split, const char* mode, const ModeSummary& s) {
        csv += lam + "," + split + "," + mode + "," + format_double(s.dsc_mean) + "," + format_double(s.dsc_std) + "," +
               format_double(s.asd_mean) + "," + format_double(s.hd_mean) + "," + format_double(s.topology_ok_rate) + "\n";
    };
    for (Split split : {Split::test_clean, Split::test_corrupt}) {
        const auto cases = eval_cases(rc, d, split);
        nlohmann::json per_split;
        // Reference modes do not depend on lambda*.
        std::vector<Mode> ref_modes;
        if (run.config.train.variant != Variant::vml) ref_modes.push_back(Mode::itn);
        ref_modes.push_back(Mode::one_pass);
        const auto ref = evaluate_cases(cases, run.state.model, run.state.atlas, eval_options(rc, run, ref_modes));
        per_split["reference"] = summary_json(ref, ref_modes);
        for (Mode m : ref_modes) csv_row("", split_name(split), mode_name(m), summarize(ref, mode_name(m)));
        nlohmann::json rows = nlohmann::json::array();
        for (double lam : rc.sweep_grid) {
            RunConfig one = rc;
            one.refine.lambda_star = lam;
            const auto res = evaluate_cases(cases, run.state.model, run.state.atlas, eval_options(one, run, {Mode::refine}));
            const auto s = summarize(res, "refine");
            rows.push_back({{"lambda_star", lam}, {"refine", to_json(s)}});
            csv_row(format_double(lam), split_name(split), "refine", s);
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s lambda* %g: refined dsc %.4f  topology ok %.2f", split_name(split), lam,
                          s.dsc_mean, s.topology_ok_rate);
            log_line(buf);
        }
        per_split["refine"] = rows;
        report[split_name(split)] = per_split;
    }
    write_text(out / "sweep.json", report.dump(2) + "\n");
    write_text(out / "sweep.csv", csv);
    return 0;
}

inline int cmd_map_subjects(const RunConfig& rc, const std::filesystem::path& out) {
    if (rc.eval.checkpoint.empty()) throw usage_error("map-subjects needs --checkpoint");
    std::filesystem::create_directories(out);
    write_resolved_config(out, rc);
    const LoadedRun run = load_run(rc.eval.checkpoint);
    const Dataset d = obtain_dataset(rc);
    const auto& cases = d.split(rc.eval.split);
    if (rc.case_i >= cases.size() || rc.case_j >= cases.size())
        throw std::runtime_error("map-subjects: case index out of range for split " +
                                 std::string(split_name(rc.eval.split)) + " (" + std::to_string(cases.size()) + " cases)");
    const bool use_refine = std::find(rc.eval.modes.begin(), rc.eval.modes.end(), Mode::refine) != rc.eval.modes.end();
    auto opts = eval_options(rc, run, {use_refine ? Mode::refine : Mode::one_pass});
    opts.inverse_consistency = true;
    opts.workers = 1;
    const auto ri = evaluate_case(cases[rc.case_i], run.state.model, run.state.atlas, opts);
    const auto rj = evaluate_case(cases[rc.case_j], run.state.model, run.state.atlas, opts);
    const auto m = inter_subject_map(ri.phi, ri.phi_inv, rj.phi, rj.phi_inv, run.state.atlas);
    const Mask seg_i = foreground_masks(m.atlas_i).front(), seg_j = foreground_masks(m.atlas_j).front();
    const Mask j_to_i = foreground_masks(m.j_to_i).front(), i_to_j = foreground_masks(m.i_to_j).front();
    const Mask round = foreground_masks(m.i_round_trip).front();
    auto save = [&](const char* name, const Mask& mk) {
        GrayImage g{mk.height, mk.width, std::vector<std::uint8_t>(mk.pixels.size())};
        for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = mk.pixels[i] ? 255 : 0;
        save_pgm(out / name, g);
    };
    save("subject_i.pgm", seg_i);
    save("subject_j.pgm", seg_j);
    save("j_to_i.pgm", j_to_i);
    save("i_to_j.pgm", i_to_j);
    save("i_round_trip.pgm", round);
    nlohmann::json report = provenance(rc, "map-subjects");
    report["model"] = run_meta(run);
    report["split"] = split_name(rc.eval.split);
    report["transforms"] = use_refine ? "refine" : "1pass";
    report["case_i"] = {{"index", rc.case_i}, {"mice", ri.mice}, {"ic_dsc", ri.ic_dsc},
                        {"dsc_vs_truth", dsc(seg_i, cases[rc.case_i].mask)}};
    report["case_j"] = {{"index", rc.case_j}, {"mice", rj.mice}, {"ic_dsc", rj.ic_dsc},
                        {"dsc_vs_truth", dsc(seg_j, cases[rc.case_j].mask)}};
    report["j_to_i"] = {{"dsc_vs_subject_i", dsc(j_to_i, seg_i)}, {"dsc_vs_truth_i", dsc(j_to_i, cases[rc.case_i].mask)}};
    report["i_to_j"] = {{"dsc_vs_subject_j", dsc(i_to_j, seg_j)}, {"dsc_vs_truth_j", dsc(i_to_j, cases[rc.case_j].mask)}};
    report["round_trip_i"] = {{"dsc_vs_subject_i", dsc(round, seg_i)}};
    write_text(out / "map_report.json", report.dump(2) + "\n");
    log_line("round-trip DSC " + format_double(dsc(round, seg_i)) + ", IC-DSC i " + format_double(ri.ic_dsc) +
             ", j " + format_double(rj.ic_dsc));
    return 0;
}

inline int cmd_export_atlas(const RunConfig& rc, const std::filesystem::path& out) {
    if (rc.eval.checkpoint.empty()) throw usage_error("export-atlas needs --checkpoint");
    std::filesystem::create_directories(out);
    write_resolved_config(out, rc);
    const LoadedRun run = load_run(rc.eval.checkpoint);
    export_atlas_pgm(out, run.state.atlas);
    const auto topo = topology(foreground_masks(run.state.atlas.labelmap).front());
    nlohmann::json report = provenance(rc, "export-atlas");
    report["model"] = run_meta(run);
    report["atlas_epoch"] = run.state.atlas.epoch;
    report["atlas_topology"] = {{"components", topo.components}, {"holes", topo.holes}};
    write_text(out / "atlas_report.json", report.dump(2) + "\n");
    return 0;
}

}  // namespace atlas_istn::cli

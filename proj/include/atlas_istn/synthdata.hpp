// Synthetic glyph dataset: a binary letter B under random affine + B-spline
// warps, rendered as a two-level noisy image. A corrupted copy of each test
// image adds distractor ellipses and bars away from the glyph.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlas_istn/io.hpp"
#include "atlas_istn/metrics.hpp"
#include "atlas_istn/warp.hpp"

namespace atlas_istn {

namespace detail {

// Rectangle [x0, xc] x [y0, y1] closed on the right by a half ellipse that
// reaches x1.
inline bool inside_d_shape(double x, double y, double x0, double x1, double y0, double y1) {
    if (y < y0 || y > y1 || x < x0) return false;
    const double ry = (y1 - y0) / 2, cy = (y0 + y1) / 2, xc = x1 - 0.9 * ry;
    if (x <= xc) return true;
    const double dx = (x - xc) / (x1 - xc), dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

}  // namespace detail

// The bundled 64x64 letter B: two stacked D shapes with a D-shaped counter in
// each bowl. One 8-connected component, two holes, 772 pixels.
inline Mask letter_b_glyph() {
    Mask m(64, 64);
    for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
            const double fx = double(x), fy = double(y);
            const bool outer = detail::inside_d_shape(fx, fy, 19, 42, 12, 32) || detail::inside_d_shape(fx, fy, 19, 45, 30, 51);
            const bool hole = detail::inside_d_shape(fx, fy, 26, 35, 19, 25) || detail::inside_d_shape(fx, fy, 26, 38, 37, 44);
            m(y, x) = outer && !hole;
        }
    return m;
}

struct GlyphSpec {
    Mask base = letter_b_glyph();
    double foreground = 0.8;
    double background = 0.2;
    double noise_sigma = 0.1;
};

struct WarpSpec {
    double rotation_deg = 20.0;
    double scale_min = 0.85;
    double scale_max = 1.15;
    double translation_px = 6.0;
    std::size_t control_grid = 4;
    double bspline_sigma = 3.0;
    std::size_t max_retries = 10;
};

struct ClutterSpec {
    std::size_t min_count = 3;
    std::size_t max_count = 8;
    double ellipse_axis_min = 2.0, ellipse_axis_max = 6.0;
    double bar_length_min = 6.0, bar_length_max = 14.0;
    double bar_width_min = 2.0, bar_width_max = 4.0;
    double intensity_min = 0.6, intensity_max = 0.9;
    double noise_sigma = 0.1;
    std::size_t keep_out_margin = 2;
};

enum class Split { train, val, test_clean, test_corrupt };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test_clean: return "test_clean";
        case Split::test_corrupt: return "test_corrupt";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    for (Split v : {Split::train, Split::val, Split::test_clean, Split::test_corrupt})
        if (s == split_name(v)) return v;
    throw std::invalid_argument("unknown split '" + s + "' (train, val, test_clean, test_corrupt)");
}

struct Sample {
    Tensor<float> image;  // [1,1,H,W] in [0,1]
    Tensor<float> label;  // [1,2,H,W] one-hot
    Mask mask;            // foreground of label
    Split split = Split::train;
    std::size_t index = 0;
    std::uint64_t seed = 0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t sample_seed(std::uint64_t base, Split split, std::size_t index) {
    return splitmix64(splitmix64(base) ^ (std::uint64_t(split) << 40) ^ std::uint64_t(index));
}

// Uniform cubic B-spline patch over the whole frame, 4x4 control points with
// N(0, sigma) displacements. Returns a [1,2,H,W] field.
inline Tensor<float> sample_bspline_field(std::size_t h, std::size_t w, std::size_t grid, double sigma,
                                          std::mt19937_64& rng) {
    if (grid != 4) throw std::invalid_argument("sample_bspline_field: only a 4x4 control grid is supported");
    if (sigma < 0) throw std::invalid_argument("sample_bspline_field: sigma must be non-negative");
    std::normal_distribution<double> dist(0.0, 1.0);
    double cp[2][4][4];
    for (auto& comp : cp)
        for (auto& row : comp)
            for (double& v : row) v = sigma * dist(rng);
    auto basis = [](double t, double out[4]) {
        const double t2 = t * t, t3 = t2 * t, s = 1 - t;
        out[0] = s * s * s / 6;
        out[1] = (3 * t3 - 6 * t2 + 4) / 6;
        out[2] = (-3 * t3 + 3 * t2 + 3 * t + 1) / 6;
        out[3] = t3 / 6;
    };
    Tensor<float> f(Shape{1, 2, h, w}, 0.f);
    auto d = f.mutable_data();
    std::vector<std::array<double, 4>> bx(w), by(h);
    for (std::size_t x = 0; x < w; ++x) basis(w > 1 ? double(x) / double(w - 1) : 0.0, bx[x].data());
    for (std::size_t y = 0; y < h; ++y) basis(h > 1 ? double(y) / double(h - 1) : 0.0, by[y].data());
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j) acc += by[y][i] * bx[x][j] * cp[c][i][j];
                d[(c * h + y) * w + x] = float(acc);
            }
    return f;
}

namespace detail {

inline double bilinear(const Mask& m, double sx, double sy) {
    sx = std::clamp(sx, 0.0, double(m.width - 1));
    sy = std::clamp(sy, 0.0, double(m.height - 1));
    const std::size_t x0 = std::min<std::size_t>(std::size_t(sx), m.width - 2);
    const std::size_t y0 = std::min<std::size_t>(std::size_t(sy), m.height - 2);
    const double wx = sx - double(x0), wy = sy - double(y0);
    return (1 - wy) * ((1 - wx) * m(y0, x0) + wx * m(y0, x0 + 1)) + wy * ((1 - wx) * m(y0 + 1, x0) + wx * m(y0 + 1, x0 + 1));
}

inline bool touches_border(const Mask& m) {
    for (std::size_t x = 0; x < m.width; ++x)
        if (m(0, x) || m(m.height - 1, x)) return true;
    for (std::size_t y = 0; y < m.height; ++y)
        if (m(y, 0) || m(y, m.width - 1)) return true;
    return false;
}

inline Tensor<float> one_hot(const Mask& m) {
    const std::size_t hw = m.height * m.width;
    Tensor<float> t(Shape{1, 2, m.height, m.width});
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < hw; ++i) {
        d[i] = m.pixels[i] ? 0.f : 1.f;
        d[hw + i] = m.pixels[i] ? 1.f : 0.f;
    }
    return t;
}

}  // namespace detail

inline Tensor<float> one_hot(const Mask& m) { return detail::one_hot(m); }

// Warped glyph label plus its noisy two-level image. Retries until the glyph
// is inside the frame and keeps the base topology.
inline Sample make_pair(const GlyphSpec& glyph, const WarpSpec& ws, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Mask& base = glyph.base;
    const std::size_t h = base.height, w = base.width;
    const double cx = (double(w) - 1) / 2, cy = (double(h) - 1) / 2;
    const Topology target = topology(base);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    for (std::size_t attempt = 0; attempt < ws.max_retries; ++attempt) {
        const double theta = uniform(-ws.rotation_deg, ws.rotation_deg) * M_PI / 180.0;
        const double scale = uniform(ws.scale_min, ws.scale_max);
        const double tx = uniform(-ws.translation_px, ws.translation_px);
        const double ty = uniform(-ws.translation_px, ws.translation_px);
        const Affine2 inv = invert_affine(build_affine(tx, ty, theta, std::log(scale), std::log(scale)));
        const auto u = sample_bspline_field(h, w, ws.control_grid, ws.bspline_sigma, rng);
        auto ud = u.data();
        Mask label(h, w);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t p = y * w + x;
                const auto q = inv.apply(double(x) + ud[p], double(y) + ud[h * w + p], cx, cy);
                label.pixels[p] = detail::bilinear(base, q[0], q[1]) >= 0.5;
            }
        if (detail::touches_border(label) || !(topology(label) == target)) continue;
        std::normal_distribution<double> noise(0.0, glyph.noise_sigma);
        Tensor<float> image(Shape{1, 1, h, w});
        auto id = image.mutable_data();
        for (std::size_t p = 0; p < h * w; ++p) {
            const double v = (label.pixels[p] ? glyph.foreground : glyph.background) +
                             (glyph.noise_sigma > 0 ? noise(rng) : 0.0);
            id[p] = float(std::clamp(v, 0.0, 1.0));
        }
        Sample s;
        s.image = std::move(image);
        s.label = detail::one_hot(label);
        s.mask = std::move(label);
        s.seed = seed;
        return s;
    }
    throw std::runtime_error("make_pair: glyph left the frame or changed topology after " +
                             std::to_string(ws.max_retries) + " attempts (seed " + std::to_string(seed) + ")");
}

// Adds clutter outside the glyph's bounding box dilated by the keep-out
// margin. The label is untouched.
inline Sample corrupt(const Sample& clean, const ClutterSpec& cs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    std::normal_distribution<double> noise(0.0, 1.0);
    Sample out = clean;
    out.image = clean.image.detach();
    out.split = Split::test_corrupt;
    const Mask& m = clean.mask;
    const std::size_t h = m.height, w = m.width;
    long y0 = long(h), y1 = -1, x0 = long(w), x1 = -1;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (m(y, x)) {
                y0 = std::min(y0, long(y));
                y1 = std::max(y1, long(y));
                x0 = std::min(x0, long(x));
                x1 = std::max(x1, long(x));
            }
    const long pad = long(cs.keep_out_margin);
    auto keep_out = [&](long y, long x) { return y >= y0 - pad && y <= y1 + pad && x >= x0 - pad && x <= x1 + pad; };
    const std::size_t count =
        cs.max_count == 0 ? 0 : std::uniform_int_distribution<std::size_t>(cs.min_count, cs.max_count)(rng);
    auto img = out.image.mutable_data();
    for (std::size_t k = 0; k < count; ++k) {
        const double level = uniform(cs.intensity_min, cs.intensity_max);
        // Centres are drawn outside the keep-out box so every shape shows.
        double ccx = 0, ccy = 0;
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            ccx = uniform(0, double(w));
            ccy = uniform(0, double(h));
            placed = !keep_out(long(ccy), long(ccx));
        }
        if (!placed) break;
        const double ang = uniform(0, M_PI);
        const bool ellipse = unit(rng) < 0.5;
        double a, b;
        if (ellipse) {
            a = uniform(cs.ellipse_axis_min, cs.ellipse_axis_max);
            b = uniform(cs.ellipse_axis_min, cs.ellipse_axis_max);
        } else {
            a = uniform(cs.bar_length_min, cs.bar_length_max) / 2;
            b = uniform(cs.bar_width_min, cs.bar_width_max) / 2;
        }
        const double c = std::cos(ang), s = std::sin(ang);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = double(x) - ccx, dy = double(y) - ccy;
                const double along = dx * c + dy * s, across = -dx * s + dy * c;
                const bool hit = ellipse ? (along / a) * (along / a) + (across / b) * (across / b) <= 1.0
                                         : std::abs(along) <= a && std::abs(across) <= b;
                if (!hit || keep_out(long(y), long(x))) continue;
                img[y * w + x] = float(std::clamp(level + cs.noise_sigma * noise(rng), 0.0, 1.0));
            }
    }
    return out;
}

struct DatasetSpec {
    GlyphSpec glyph;
    WarpSpec warp;
    ClutterSpec clutter;
    std::size_t n_train = 200, n_val = 20, n_test = 100;
    std::uint64_t seed = 0;
};

struct Dataset {
    std::vector<Sample> train, val, test_clean, test_corrupt;

    const std::vector<Sample>& split(Split s) const {
        switch (s) {
            case Split::train: return train;
            case Split::val: return val;
            case Split::test_clean: return test_clean;
            case Split::test_corrupt: return test_corrupt;
        }
        throw std::invalid_argument("bad split");
    }
};

inline Sample make_indexed(const DatasetSpec& spec, Split split, std::size_t i) {
    Sample s = make_pair(spec.glyph, spec.warp, sample_seed(spec.seed, split, i));
    s.split = split;
    s.index = i;
    return s;
}

// In-memory generation; a pure function of the spec.
inline Dataset generate_dataset(const DatasetSpec& spec) {
    Dataset d;
    for (std::size_t i = 0; i < spec.n_train; ++i) d.train.push_back(make_indexed(spec, Split::train, i));
    for (std::size_t i = 0; i < spec.n_val; ++i) d.val.push_back(make_indexed(spec, Split::val, i));
    for (std::size_t i = 0; i < spec.n_test; ++i) {
        d.test_clean.push_back(make_indexed(spec, Split::test_clean, i));
        Sample c = corrupt(d.test_clean.back(), spec.clutter, sample_seed(spec.seed, Split::test_corrupt, i));
        d.test_corrupt.push_back(std::move(c));
    }
    return d;
}

namespace detail {

inline std::string sample_stem(const Sample& s) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", s.index);
    return std::string(split_name(s.split)) + "/" + buf;
}

inline Tensor<float> mask_tensor(const Mask& m) {
    Tensor<float> t(Shape{m.height, m.width});
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = m.pixels[i];
    return t;
}

}  // namespace detail

inline nlohmann::json dataset_spec_json(const DatasetSpec& s) {
    const auto& w = s.warp;
    const auto& c = s.clutter;
    return {{"seed", s.seed},
            {"counts", {{"train", s.n_train}, {"val", s.n_val}, {"test_clean", s.n_test}, {"test_corrupt", s.n_test}}},
            {"glyph", {{"foreground", s.glyph.foreground}, {"background", s.glyph.background},
                       {"noise_sigma", s.glyph.noise_sigma}, {"height", s.glyph.base.height}, {"width", s.glyph.base.width}}},
            {"warp", {{"rotation_deg", w.rotation_deg}, {"scale_min", w.scale_min}, {"scale_max", w.scale_max},
                      {"translation_px", w.translation_px}, {"control_grid", w.control_grid},
                      {"bspline_sigma", w.bspline_sigma}, {"max_retries", w.max_retries}}},
            {"clutter", {{"min_count", c.min_count}, {"max_count", c.max_count},
                         {"ellipse_axis", {c.ellipse_axis_min, c.ellipse_axis_max}},
                         {"bar_length", {c.bar_length_min, c.bar_length_max}},
                         {"bar_width", {c.bar_width_min, c.bar_width_max}},
                         {"intensity", {c.intensity_min, c.intensity_max}}, {"noise_sigma", c.noise_sigma},
                         {"keep_out_margin", c.keep_out_margin}}}};
}

// Writes <out>/<split>/<index>_{image,label}.{pgm,atn1} and manifest.json.
inline nlohmann::json write_dataset(const std::filesystem::path& out, const DatasetSpec& spec, const Dataset& d) {
    nlohmann::json samples = nlohmann::json::array();
    for (Split sp : {Split::train, Split::val, Split::test_clean, Split::test_corrupt})
        for (const Sample& s : d.split(sp)) {
            const std::string stem = detail::sample_stem(s);
            const std::size_t h = s.mask.height, w = s.mask.width;
            save_atn1(out / (stem + "_image.atn1"), s.image);
            save_pgm(out / (stem + "_image.pgm"), to_gray(s.image.data(), h, w));
            const auto lt = detail::mask_tensor(s.mask);
            save_atn1(out / (stem + "_label.atn1"), lt);
            save_pgm(out / (stem + "_label.pgm"), to_gray(lt.data(), h, w));
            samples.push_back({{"split", split_name(sp)}, {"index", s.index}, {"seed", s.seed},
                               {"image", stem + "_image.atn1"}, {"label", stem + "_label.atn1"},
                               {"image_pgm", stem + "_image.pgm"}, {"label_pgm", stem + "_label.pgm"}});
        }
    nlohmann::json manifest{{"spec", dataset_spec_json(spec)}, {"samples", samples}};
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

inline Sample load_sample(const std::filesystem::path& root, const nlohmann::json& entry) {
    Sample s;
    s.split = parse_split(entry.at("split"));
    s.index = entry.at("index");
    s.seed = entry.at("seed");
    s.image = load_atn1(root / entry.at("image").get<std::string>());
    const auto lt = load_atn1(root / entry.at("label").get<std::string>());
    if (lt.rank() != 2) throw io_error("label blob must be [H,W]: " + entry.at("label").get<std::string>());
    std::vector<std::uint8_t> px(lt.numel());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = lt.at(i) >= 0.5f;
    s.mask = Mask(lt.size(0), lt.size(1), std::move(px));
    s.label = detail::one_hot(s.mask);
    if (s.image.shape() != Shape{1, 1, lt.size(0), lt.size(1)})
        throw io_error("image blob shape " + shape_str(s.image.shape()) + " does not match its label");
    return s;
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    const auto manifest = nlohmann::json::parse(read_text(root / "manifest.json"));
    Dataset d;
    for (const auto& e : manifest.at("samples")) {
        Sample s = load_sample(root, e);
        switch (s.split) {
            case Split::train: d.train.push_back(std::move(s)); break;
            case Split::val: d.val.push_back(std::move(s)); break;
            case Split::test_clean: d.test_clean.push_back(std::move(s)); break;
            case Split::test_corrupt: d.test_corrupt.push_back(std::move(s)); break;
        }
    }
    return d;
}

}  // namespace atlas_istn

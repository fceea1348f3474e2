// Segmentation network (ITN) and registration network (STN).
//
// ITN: 2D U-net. Level 0 runs at full resolution, each deeper level starts
// with a stride-2 conv; the decoder upsamples bilinearly and concatenates the
// matching encoder features. Output is linear logits.
//
// STN: takes [yhat_fg, atlas_fg] concatenated along channels. Its first conv
// has stride 2, so the decoder ends at half resolution where the SVF head
// sits. The affine head pools the bottleneck globally and predicts
// (tx, ty, theta, log_sx, log_sy) through a two-layer MLP. Both heads start at
// zero, so an untrained STN yields the identity transform.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlas_istn/io.hpp"
#include "atlas_istn/ops.hpp"
#include "atlas_istn/params.hpp"
#include "atlas_istn/warp.hpp"

namespace atlas_istn {

struct ItnConfig {
    std::size_t in_channels = 1;
    std::size_t out_channels = 2;
    std::size_t scales = 3;
    std::size_t base_filters = 16;

    void validate() const {
        if (out_channels < 2) throw std::invalid_argument("ItnConfig: out_channels must be >= 2");
        if (scales < 1 || in_channels < 1 || base_filters < 1) throw std::invalid_argument("ItnConfig: bad sizes");
    }
};

struct StnConfig {
    std::size_t in_channels = 2;
    std::size_t scales = 3;
    std::size_t base_filters = 32;
    std::size_t affine_hidden = 64;
    bool affine_enabled = true;
    bool svf_enabled = true;

    void validate() const {
        if (!affine_enabled && !svf_enabled)
            throw std::invalid_argument("StnConfig: at least one of affine/svf must be enabled");
        if (scales < 1 || in_channels < 1 || base_filters < 1) throw std::invalid_argument("StnConfig: bad sizes");
    }
};

template <class T>
struct ModelParams {
    ItnConfig itn_config;
    StnConfig stn_config;
    ParamSet<T> itn;
    ParamSet<T> stn;
};

namespace detail {

template <class T>
void add_conv(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::mt19937_64& rng,
              bool zero = false) {
    Tensor<T> w(Shape{cout, cin, 3, 3}, T(0));
    if (!zero) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(cin * 9)));
        for (T& v : w.mutable_data()) v = T(dist(rng));
    }
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor<T>(Shape{cout}, T(0)));
}

template <class T>
void add_fc(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
            bool zero = false) {
    Tensor<T> w(Shape{out, in}, T(0));
    if (!zero) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(in)));
        for (T& v : w.mutable_data()) v = T(dist(rng));
    }
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor<T>(Shape{out}, T(0)));
}

template <class T>
Tensor<T> conv(const ParamSet<T>& ps, const std::string& name, const Tensor<T>& x, std::size_t stride = 1) {
    return conv2d(x, ps.at(name + ".w"), ps.at(name + ".b"), stride, 1);
}

template <class T>
Tensor<T> conv_relu(const ParamSet<T>& ps, const std::string& name, const Tensor<T>& x, std::size_t stride = 1) {
    return relu(conv(ps, name, x, stride));
}

inline std::string level(const char* prefix, std::size_t k) { return std::string(prefix) + std::to_string(k); }

inline void require_divisible(const Shape& s, std::size_t scales, const char* who) {
    const std::size_t f = std::size_t(1) << scales;
    if (s.size() != 4 || s[2] % f != 0 || s[3] % f != 0)
        throw shape_error(std::string(who) + ": spatial size of " + shape_str(s) + " must be divisible by " +
                          std::to_string(f));
}

}  // namespace detail

template <class T>
ParamSet<T> init_itn(const ItnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ParamSet<T> ps;
    const std::size_t b = cfg.base_filters;
    detail::add_conv(ps, "itn.enc0", cfg.in_channels, b, rng);
    for (std::size_t k = 1; k < cfg.scales; ++k) {
        detail::add_conv(ps, detail::level("itn.down", k), b << (k - 1), b << k, rng);
        detail::add_conv(ps, detail::level("itn.enc", k), b << k, b << k, rng);
    }
    for (std::size_t k = cfg.scales - 1; k-- > 0;)
        detail::add_conv(ps, detail::level("itn.dec", k), (b << (k + 1)) + (b << k), b << k, rng);
    detail::add_conv(ps, "itn.out", b, cfg.out_channels, rng);
    return ps;
}

template <class T>
ParamSet<T> init_stn(const StnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ParamSet<T> ps;
    const std::size_t b = cfg.base_filters;
    detail::add_conv(ps, "stn.down0", cfg.in_channels, b, rng);
    detail::add_conv(ps, "stn.enc0", b, b, rng);
    for (std::size_t k = 1; k < cfg.scales; ++k) {
        detail::add_conv(ps, detail::level("stn.down", k), b << (k - 1), b << k, rng);
        detail::add_conv(ps, detail::level("stn.enc", k), b << k, b << k, rng);
    }
    for (std::size_t k = cfg.scales - 1; k-- > 0;)
        detail::add_conv(ps, detail::level("stn.dec", k), (b << (k + 1)) + (b << k), b << k, rng);
    detail::add_conv(ps, "stn.svf", b, 2, rng, /*zero=*/true);
    detail::add_fc(ps, "stn.aff1", b << (cfg.scales - 1), cfg.affine_hidden, rng);
    detail::add_fc(ps, "stn.aff2", cfg.affine_hidden, 5, rng, /*zero=*/true);
    return ps;
}

template <class T>
ModelParams<T> init_model(const ItnConfig& itn_cfg, const StnConfig& stn_cfg, std::uint64_t seed) {
    return {itn_cfg, stn_cfg, init_itn<T>(itn_cfg, seed * 2 + 1), init_stn<T>(stn_cfg, seed * 2 + 2)};
}

// x [N,in,H,W] -> logits [N,C,H,W].
template <class T>
Tensor<T> itn_forward(const Tensor<T>& x, const ParamSet<T>& ps, const ItnConfig& cfg) {
    detail::require_divisible(x.shape(), cfg.scales, "itn_forward");
    if (x.size(1) != cfg.in_channels)
        throw shape_error("itn_forward: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                          shape_str(x.shape()));
    std::vector<Tensor<T>> enc{detail::conv_relu(ps, "itn.enc0", x)};
    for (std::size_t k = 1; k < cfg.scales; ++k) {
        auto d = detail::conv_relu(ps, detail::level("itn.down", k), enc.back(), 2);
        enc.push_back(detail::conv_relu(ps, detail::level("itn.enc", k), d));
    }
    Tensor<T> h = enc.back();
    for (std::size_t k = cfg.scales - 1; k-- > 0;)
        h = detail::conv_relu(ps, detail::level("itn.dec", k), concat_channels<T>({upsample_bilinear_2x(h), enc[k]}));
    return detail::conv(ps, "itn.out", h);
}

template <class T>
struct StnOutput {
    Tensor<T> svf;     // [N,2,H/2,W/2], full-resolution pixel units
    Tensor<T> affine;  // [N,5]; undefined when the affine part is inactive
};

// moving_fg [N,Cf,H,W], fixed_fg [N or 1,Cf,H,W].
template <class T>
StnOutput<T> stn_forward(const Tensor<T>& moving_fg, const Tensor<T>& fixed_fg, const ParamSet<T>& ps,
                         const StnConfig& cfg, bool affine_active = true) {
    detail::require_divisible(moving_fg.shape(), cfg.scales, "stn_forward");
    const std::size_t n = moving_fg.size(0);
    Tensor<T> fixed = fixed_fg.size(0) == n ? fixed_fg : repeat_batch(fixed_fg, n);
    Tensor<T> in = concat_channels<T>({moving_fg, fixed});
    if (in.size(1) != cfg.in_channels)
        throw shape_error("stn_forward: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                          std::to_string(in.size(1)));
    std::vector<Tensor<T>> enc;
    enc.push_back(detail::conv_relu(ps, "stn.enc0", detail::conv_relu(ps, "stn.down0", in, 2)));
    for (std::size_t k = 1; k < cfg.scales; ++k) {
        auto d = detail::conv_relu(ps, detail::level("stn.down", k), enc.back(), 2);
        enc.push_back(detail::conv_relu(ps, detail::level("stn.enc", k), d));
    }
    StnOutput<T> out;
    const std::size_t h = moving_fg.size(2) / 2, w = moving_fg.size(3) / 2;
    if (cfg.svf_enabled) {
        Tensor<T> d = enc.back();
        for (std::size_t k = cfg.scales - 1; k-- > 0;)
            d = detail::conv_relu(ps, detail::level("stn.dec", k), concat_channels<T>({upsample_bilinear_2x(d), enc[k]}));
        out.svf = detail::conv(ps, "stn.svf", d);
    } else {
        out.svf = Tensor<T>(Shape{n, 2, h, w}, T(0));
    }
    if (cfg.affine_enabled && affine_active) {
        auto hidden = relu(fully_connected(global_mean_pool(enc.back()), ps.at("stn.aff1.w"), ps.at("stn.aff1.b")));
        out.affine = fully_connected(hidden, ps.at("stn.aff2.w"), ps.at("stn.aff2.b"));
    }
    return out;
}

template <class T>
struct ForwardResult {
    Tensor<T> y_hat;
    StnOutput<T> stn;
    Transformation<T> transform;
};

// Segment x, then register the foreground logits to the atlas foreground.
template <class T>
ForwardResult<T> full_forward(const Tensor<T>& x, const Tensor<T>& atlas_fg, const ModelParams<T>& m,
                              bool affine_active = true, std::size_t n_squarings = 6) {
    ForwardResult<T> r;
    r.y_hat = itn_forward(x, m.itn, m.itn_config);
    r.stn = stn_forward(slice_channels(r.y_hat, 1, r.y_hat.size(1)), atlas_fg, m.stn, m.stn_config, affine_active);
    r.transform = transformation_computation(r.stn.svf, r.stn.affine, n_squarings);
    return r;
}

// Checkpoint layout: <dir>/<prefix>.json lists names, shapes and blob paths;
// blobs live in <dir>/<prefix>/<name>.atn1.
inline void save_param_set(const std::filesystem::path& dir, const std::string& prefix, const ParamSet<float>& ps) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& [name, t] : ps) {
        const std::string file = prefix + "/" + name + ".atn1";
        save_atn1(dir / file, t);
        manifest.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
    }
    write_text(dir / (prefix + ".json"), manifest.dump(2) + "\n");
}

inline ParamSet<float> load_param_set(const std::filesystem::path& dir, const std::string& prefix) {
    const auto manifest = nlohmann::json::parse(read_text(dir / (prefix + ".json")));
    ParamSet<float> ps;
    for (const auto& e : manifest) {
        auto t = load_atn1(dir / e.at("file").get<std::string>());
        if (t.shape() != e.at("shape").get<Shape>())
            throw io_error("checkpoint: shape mismatch for " + e.at("name").get<std::string>());
        ps.add(e.at("name").get<std::string>(), std::move(t));
    }
    return ps;
}

inline nlohmann::json to_json(const ItnConfig& c) {
    return {{"in_channels", c.in_channels}, {"out_channels", c.out_channels}, {"scales", c.scales},
            {"base_filters", c.base_filters}};
}

inline nlohmann::json to_json(const StnConfig& c) {
    return {{"in_channels", c.in_channels},       {"scales", c.scales},
            {"base_filters", c.base_filters},     {"affine_hidden", c.affine_hidden},
            {"affine_enabled", c.affine_enabled}, {"svf_enabled", c.svf_enabled}};
}

inline void save_model(const std::filesystem::path& dir, const ModelParams<float>& m) {
    save_param_set(dir, "itn", m.itn);
    save_param_set(dir, "stn", m.stn);
    write_text(dir / "model.json",
               nlohmann::json{{"itn", to_json(m.itn_config)}, {"stn", to_json(m.stn_config)}}.dump(2) + "\n");
}

inline ModelParams<float> load_model(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_text(dir / "model.json"));
    ModelParams<float> m;
    const auto& ji = j.at("itn");
    m.itn_config = {ji.at("in_channels"), ji.at("out_channels"), ji.at("scales"), ji.at("base_filters")};
    const auto& js = j.at("stn");
    m.stn_config = {js.at("in_channels"), js.at("scales"),         js.at("base_filters"),
                    js.at("affine_hidden"), js.at("affine_enabled"), js.at("svf_enabled")};
    m.itn = load_param_set(dir, "itn");
    m.stn = load_param_set(dir, "stn");
    return m;
}

}  // namespace atlas_istn

// Atlas labelmap and image, updated once per epoch by an exponential moving
// average of the training cases mapped into atlas space.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlas_istn/io.hpp"
#include "atlas_istn/tensor.hpp"

namespace atlas_istn {

struct AtlasState {
    Tensor<float> labelmap;  // [1,C,H,W]
    Tensor<float> image;     // [1,1,H,W]
    std::size_t epoch = 0;
    double eta = 0.01;
};

namespace detail {

// Mean over the batch of [N,C,H,W] tensors given as a list of [1,C,H,W] or
// [N,C,H,W] blocks, accumulated in double in list order.
inline Tensor<float> batch_mean(const std::vector<Tensor<float>>& parts, const char* who) {
    if (parts.empty()) throw std::invalid_argument(std::string(who) + ": no cases");
    const Shape& s0 = parts.front().shape();
    if (s0.size() != 4) throw shape_error(std::string(who) + ": expected [N,C,H,W], got " + shape_str(s0));
    const std::size_t plane = s0[1] * s0[2] * s0[3];
    std::vector<double> acc(plane, 0.0);
    std::size_t count = 0;
    for (const auto& p : parts) {
        if (p.rank() != 4 || p.size(1) != s0[1] || p.size(2) != s0[2] || p.size(3) != s0[3])
            throw shape_error(std::string(who) + ": inconsistent case shape " + shape_str(p.shape()));
        auto d = p.data();
        for (std::size_t b = 0; b < p.size(0); ++b, ++count)
            for (std::size_t i = 0; i < plane; ++i) acc[i] += d[b * plane + i];
    }
    Tensor<float> out(Shape{1, s0[1], s0[2], s0[3]});
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < plane; ++i) o[i] = float(acc[i] / double(count));
    return out;
}

inline void blend(Tensor<float>& state, const Tensor<float>& mean, double eta) {
    if (state.shape() != mean.shape())
        throw shape_error("epoch_update: atlas " + shape_str(state.shape()) + " vs mean " + shape_str(mean.shape()));
    auto s = state.mutable_data();
    auto m = mean.data();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = float((1.0 - eta) * double(s[i]) + eta * double(m[i]));
}

}  // namespace detail

// labels: one-hot [N,C,H,W] blocks, images: [N,1,H,W] blocks.
inline AtlasState init_atlas(const std::vector<Tensor<float>>& labels, const std::vector<Tensor<float>>& images,
                             double eta = 0.01) {
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("init_atlas: eta must lie in [0,1]");
    return {detail::batch_mean(labels, "init_atlas"), detail::batch_mean(images, "init_atlas"), 0, eta};
}

// Blends the mean of the warped cases into the atlas with rate eta.
inline void epoch_update(AtlasState& st, const std::vector<Tensor<float>>& warped_labels,
                         const std::vector<Tensor<float>>& warped_images) {
    detail::blend(st.labelmap, detail::batch_mean(warped_labels, "epoch_update"), st.eta);
    detail::blend(st.image, detail::batch_mean(warped_images, "epoch_update"), st.eta);
    ++st.epoch;
}

// Per-pixel argmax over channels, ties to the lowest index. [N,C,H,W] ->
// N label images of H*W.
inline std::vector<std::vector<std::uint8_t>> argmax_channels(const Tensor<float>& t) {
    if (t.rank() != 4) throw shape_error("argmax_channels: expected [N,C,H,W], got " + shape_str(t.shape()));
    const std::size_t n = t.size(0), c = t.size(1), hw = t.size(2) * t.size(3);
    std::vector<std::vector<std::uint8_t>> out(n, std::vector<std::uint8_t>(hw, 0));
    auto d = t.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
            std::size_t best = 0;
            float bv = d[b * c * hw + p];
            for (std::size_t k = 1; k < c; ++k) {
                const float v = d[(b * c + k) * hw + p];
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            out[b][p] = std::uint8_t(best);
        }
    return out;
}

inline void save_atlas(const std::filesystem::path& dir, const AtlasState& st) {
    save_atn1(dir / "atlas_labelmap.atn1", st.labelmap);
    save_atn1(dir / "atlas_image.atn1", st.image);
    write_text(dir / "atlas.json", nlohmann::json{{"epoch", st.epoch}, {"eta", st.eta}}.dump() + "\n");
}

inline AtlasState load_atlas(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_text(dir / "atlas.json"));
    return {load_atn1(dir / "atlas_labelmap.atn1"), load_atn1(dir / "atlas_image.atn1"), j.at("epoch"), j.at("eta")};
}

// Per-channel and image PGMs for inspection.
inline void export_atlas_pgm(const std::filesystem::path& dir, const AtlasState& st) {
    const std::size_t c = st.labelmap.size(1), h = st.labelmap.size(2), w = st.labelmap.size(3);
    auto d = st.labelmap.data();
    for (std::size_t k = 0; k < c; ++k)
        save_pgm(dir / ("atlas_channel" + std::to_string(k) + ".pgm"), to_gray(d.subspan(k * h * w, h * w), h, w));
    save_pgm(dir / "atlas_image.pgm", to_gray(st.image.data(), h, w));
    auto seg = argmax_channels(st.labelmap).front();
    GrayImage g{h, w, std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) g.pixels[i] = std::uint8_t(c > 1 ? seg[i] * 255 / (c - 1) : 0);
    save_pgm(dir / "atlas_argmax.pgm", g);
}

}  // namespace atlas_istn
